use optile::db::Db;
use optile::layout::Layout;
use optile::memorylimits::{MemVec, MemoryLimits};
use optile::search::synthesize;
use optile::spec::{PrimKind, Spec, SpecKind};
use optile::target::{MemoryLevel, Target};
use optile::tensorspec::{Dtype, TensorSpec};
use std::sync::RwLock;
use std::time::Instant;

fn main() {
    let target = Target::default();
    let ts = |shape: Vec<u32>, level: MemoryLevel, v: Option<u32>| {
        let rank = shape.len() as u8;
        TensorSpec::fresh(Dtype::F32, shape, level, Layout::row_major(rank), v, &target).unwrap()
    };
    let args: Vec<String> = std::env::args().collect();
    let case = args.get(1).map(|s| s.as_str()).unwrap_or("tiny");
    let spec = match case {
        "tiny" => Spec::new(
            SpecKind::Prim(PrimKind::MatmulAccum),
            vec![1, 1, 1, 8],
            vec![
                ts(vec![1, 1, 1], MemoryLevel::RF, None),
                ts(vec![1, 1, 8], MemoryLevel::VRF, Some(8)),
                ts(vec![1, 1, 8], MemoryLevel::VRF, Some(8)),
            ],
            false,
            MemoryLimits::new(MemVec([64, 64, 256, 1024])),
        )
        .unwrap(),
        _ => Spec::new(
            SpecKind::Prim(PrimKind::MatmulAccum),
            vec![1, 4, 4, 16],
            vec![
                ts(vec![1, 4, 4], MemoryLevel::RF, None),
                ts(vec![1, 4, 16], MemoryLevel::VRF, Some(8)),
                ts(vec![1, 4, 16], MemoryLevel::L1, None),
            ],
            false,
            MemoryLimits::new(MemVec([64, 256, 1024, 4096])),
        )
        .unwrap(),
    };
    let db = RwLock::new(Db::new());
    let start = Instant::now();
    let done = std::sync::atomic::AtomicBool::new(false);
    let payload = std::thread::scope(|scope| {
        let db_ref = &db;
        let done_ref = &done;
        scope.spawn(move || {
            while !done_ref.load(std::sync::atomic::Ordering::Relaxed) {
                std::thread::sleep(std::time::Duration::from_secs(2));
                eprintln!("t={:?} specs={}", start.elapsed(), db_ref.read().unwrap().len());
            }
        });
        let p = synthesize(&spec, db_ref, &target).unwrap();
        done_ref.store(true, std::sync::atomic::Ordering::Relaxed);
        p
    });
    println!(
        "case={case} main={} depth={} elapsed={:?} specs={}",
        payload.main,
        payload.depth,
        start.elapsed(),
        db.read().unwrap().len()
    );
}

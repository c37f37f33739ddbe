//! Top-down synthesis: enumerate the rewrites applicable to a goal spec,
//! recurse on each rewrite's child specs, and keep the rewrite minimizing
//! the composed cost. Outcomes are memoized in the database, so a spec is
//! solved at most once per database lifetime, and unsatisfiable specs are
//! memoized as such rather than re-searched.
//!
//! Ties are broken by total peak bytes, then tree depth, then a fixed action
//! enumeration order (selects, the accumulating rewrite, tiles by dimension
//! and extent, moves by operand, level, and layout, then splits), which makes
//! results deterministic and database puts idempotent even under racing
//! workers.

use crate::cost::{loop_trip_count, node_cost, UNSAT_MAIN};
use crate::db::{round_peak, Db, DbError, DbPayload, Decision};
use crate::ir::ImplNode;
use crate::kernel::KERNELS;
use crate::layout::{enumerate_layouts, Layout};
use crate::memorylimits::MemVec;
use crate::rewrites::{apply, Rewrite, RewriteError, Schedule, ScheduleError};
use crate::spec::{PrimKind, Spec, SpecKind};
use crate::target::{Target, LEVELS};
use rayon::prelude::*;
use std::collections::HashMap;
use std::sync::{Mutex, RwLock};

#[derive(thiserror::Error, Debug)]
pub enum SearchError {
    #[error("unsatisfiable under its memory limits: {spec} (hole at {path:?})")]
    Unsat { spec: String, path: Vec<usize> },
    #[error("database holds no decision for {0} (corrupt or partial database)")]
    MissingDecision(String),
    #[error(transparent)]
    Db(#[from] DbError),
    #[error("stored decision no longer applies: {0}")]
    StaleDecision(#[from] RewriteError),
}

/// All rewrites applicable to a spec, deduplicated and in the fixed
/// enumeration order. Only single-dimension tile sizes appear; multi-dim
/// tilings arise from recursive tiling.
pub fn enumerate_actions(spec: &Spec, target: &Target) -> Vec<Rewrite> {
    let mut cache = LayoutCache::default();
    enumerate_actions_cached(spec, target, &mut cache)
}

#[derive(Default)]
struct LayoutCache(HashMap<Vec<u32>, std::sync::Arc<Vec<Layout>>>);

impl LayoutCache {
    fn for_shape(&mut self, shape: &[u32]) -> std::sync::Arc<Vec<Layout>> {
        if let Some(ls) = self.0.get(shape) {
            return ls.clone();
        }
        let ls = std::sync::Arc::new(enumerate_layouts(shape));
        self.0.insert(shape.to_vec(), ls.clone());
        ls
    }
}

fn enumerate_actions_cached(
    spec: &Spec,
    target: &Target,
    layouts: &mut LayoutCache,
) -> Vec<Rewrite> {
    let mut out = Vec::new();
    let info = spec.operand_info();

    for kernel in KERNELS {
        if kernel.applicable(spec).is_ok() {
            out.push(Rewrite::Select { kernel });
        }
    }

    if matches!(spec.kind, SpecKind::Prim(PrimKind::Matmul)) {
        out.push(Rewrite::ToAccum);
    }

    for (d, &extent) in spec.shape.iter().enumerate() {
        let in_output = info.dim_in_output(d as u8);
        if !in_output && !spec.kind.output_is_read() {
            continue;
        }
        // Largest tiles first: their cheap loop bodies give the search an
        // early upper bound.
        let mut e = extent / 2;
        while e >= 1 {
            let mut shape = spec.shape.clone();
            shape[d] = e;
            out.push(Rewrite::Tile {
                shape: shape.clone(),
                parallel: false,
            });
            if !spec.serial_only && in_output {
                out.push(Rewrite::Tile {
                    shape,
                    parallel: true,
                });
            }
            if e == 1 {
                break;
            }
            e /= 2;
        }
    }

    for (oi, ts) in spec.operands.iter().enumerate() {
        let candidates = layouts.for_shape(&ts.shape);
        for &level in ts.level.move_destinations() {
            let vector_size = if level.is_vector_rf() {
                Some((target.vector_register_bytes / ts.dtype.bytes()) as u32)
            } else {
                None
            };
            // Memory fit: the fresh buffer's bytes against this spec's limit.
            let bytes = match vector_size {
                Some(v) => ts.volume().div_ceil(u64::from(v)) * target.vector_register_bytes,
                None => ts.bytes(),
            };
            if bytes > spec.limits.available[level] {
                continue;
            }
            for layout in candidates.iter() {
                let same_spot = level == ts.level
                    && ts.aligned
                    && ts.is_fully_contiguous()
                    && ts.vector_size == vector_size
                    && layout.extensionally_equal(&ts.layout, &ts.shape);
                if same_spot {
                    continue;
                }
                out.push(Rewrite::MoveParam {
                    operand: oi as u8,
                    level,
                    layout: layout.clone(),
                    vector_size,
                });
            }
        }
    }

    if let SpecKind::Compose(kinds) = &spec.kind {
        for index in 0..kinds.len() - 1 {
            let head = index + 1;
            let head_kind = kinds[head];
            let out_param = head_kind.operand_count() - 1;
            let inter_shape: Vec<u32> = crate::spec::operand_info(
                &SpecKind::Prim(head_kind),
                info.comp_maps[head].len(),
            )
            .expect("component arity validated")
            .dim_maps[out_param]
                .iter()
                .map(|&d| spec.shape[info.comp_maps[head][usize::from(d)] as usize])
                .collect();
            let volume: u64 = inter_shape.iter().map(|&e| u64::from(e)).product();
            let dtype = spec.output().dtype;
            let candidates = layouts.for_shape(&inter_shape);
            for level in LEVELS {
                let vector_size = if level.is_vector_rf() {
                    Some((target.vector_register_bytes / dtype.bytes()) as u32)
                } else {
                    None
                };
                let bytes = match vector_size {
                    Some(v) => volume.div_ceil(u64::from(v)) * target.vector_register_bytes,
                    None => volume * dtype.bytes(),
                };
                if bytes > spec.limits.available[level] {
                    continue;
                }
                for layout in candidates.iter() {
                    out.push(Rewrite::Bufferize {
                        index: index as u8,
                        level,
                        layout: layout.clone(),
                        vector_size,
                    });
                }
            }
        }
    }

    out
}

struct Ctx<'a> {
    target: &'a Target,
    db: &'a RwLock<Db>,
    layouts: Mutex<LayoutCache>,
    /// Recursion depths below this evaluate their actions in parallel.
    par_depth: u32,
}

/// Synthesizes the optimal decision for a spec, memoizing every subproblem.
/// Returns the unsat payload rather than an error when no implementation
/// fits the limits.
pub fn synthesize(spec: &Spec, db: &RwLock<Db>, target: &Target) -> Result<DbPayload, SearchError> {
    synthesize_with_jobs(spec, db, target, 1)
}

pub fn synthesize_with_jobs(
    spec: &Spec,
    db: &RwLock<Db>,
    target: &Target,
    jobs: usize,
) -> Result<DbPayload, SearchError> {
    let ctx = Ctx {
        target,
        db,
        layouts: Mutex::new(LayoutCache::default()),
        par_depth: if jobs > 1 { 2 } else { 0 },
    };
    synth_rec(&ctx, spec, 0)
}

/// One candidate's composed outcome.
struct Candidate {
    main: u32,
    depth: u8,
    peak: MemVec,
}

impl Candidate {
    fn key(&self) -> (u32, u64, u8) {
        (self.main, self.peak.sum(), self.depth)
    }
}

fn synth_rec(ctx: &Ctx, spec: &Spec, depth: u32) -> Result<DbPayload, SearchError> {
    if let Some(hit) = ctx.db.read().unwrap().get(spec)? {
        return Ok(hit);
    }

    let actions = {
        let mut layouts = ctx.layouts.lock().unwrap();
        enumerate_actions_cached(spec, ctx.target, &mut layouts)
    };

    // `bound` is the best main cost found so far. Because node costs are
    // monotone in every child cost, a partial composition padded with zeros
    // is a lower bound, so an action strictly over the bound can be abandoned
    // without affecting the minimum (ties are always fully evaluated).
    let evaluate = |action: &Rewrite, bound: u32| -> Result<Option<Candidate>, SearchError> {
        let Ok(node) = apply(spec, action, ctx.target) else {
            return Ok(None);
        };
        let arity = node.children().len();
        let mut child_mains = vec![0u32; arity];
        let mut child_depth = 0u8;
        let mut child_payloads = Vec::with_capacity(arity);
        for (i, child) in node.children().iter().enumerate() {
            let ImplNode::SpecHole { spec: child_spec } = child else {
                unreachable!("rewrites produce spec-hole children");
            };
            let payload = synth_rec(ctx, child_spec, depth + 1)?;
            if payload.main == UNSAT_MAIN {
                return Ok(None);
            }
            child_mains[i] = payload.main;
            child_depth = child_depth.max(payload.depth);
            child_payloads.push(payload);
            let lower = node_cost(&node, &child_mains, ctx.target).expect("arity matches");
            if lower > bound {
                return Ok(None);
            }
        }
        let main = node_cost(&node, &child_mains, ctx.target).expect("arity matches");
        if main == UNSAT_MAIN {
            return Ok(None);
        }
        let peak = compose_peak(&node, &child_payloads, ctx.target);
        Ok(Some(Candidate {
            main,
            depth: child_depth.saturating_add(1),
            peak: round_peak(&peak),
        }))
    };

    let mut best: Option<(usize, Candidate)> = None;
    let mut consider = |best: &mut Option<(usize, Candidate)>, i: usize, c: Candidate| {
        let better = match best {
            None => true,
            Some((bi, b)) => (c.key(), i) < (b.key(), *bi),
        };
        if better {
            *best = Some((i, c));
        }
    };
    if depth < ctx.par_depth {
        let shared_bound = std::sync::atomic::AtomicU32::new(UNSAT_MAIN);
        let results: Vec<Option<Candidate>> = actions
            .par_iter()
            .map(|a| {
                let bound = shared_bound.load(std::sync::atomic::Ordering::Relaxed);
                let result = evaluate(a, bound)?;
                if let Some(c) = &result {
                    shared_bound.fetch_min(c.main, std::sync::atomic::Ordering::Relaxed);
                }
                Ok(result)
            })
            .collect::<Result<_, SearchError>>()?;
        for (i, c) in results.into_iter().enumerate() {
            if let Some(c) = c {
                consider(&mut best, i, c);
            }
        }
    } else {
        for (i, action) in actions.iter().enumerate() {
            let bound = best.as_ref().map(|(_, c)| c.main).unwrap_or(UNSAT_MAIN);
            if let Some(c) = evaluate(action, bound)? {
                consider(&mut best, i, c);
            }
        }
    }

    let payload = match best {
        None => DbPayload::unsat(),
        Some((i, c)) => DbPayload {
            decision: Decision::Apply(actions[i].clone()),
            main: c.main,
            depth: c.depth,
            peak: c.peak,
        },
    };
    ctx.db.write().unwrap().put(spec, &payload)?;
    Ok(payload)
}

/// Composes per-level peak memory from child summaries. Pipelines charge the
/// intermediate against both stages here; the finer interlocking accounting
/// in [ImplNode::peak_memory] can only be cheaper, so this stays a sound
/// upper bound for tie-breaking.
fn compose_peak(node: &ImplNode, children: &[DbPayload], target: &Target) -> MemVec {
    match node {
        ImplNode::KernelApp { .. } | ImplNode::SpecHole { .. } => MemVec::zero(),
        ImplNode::Loop { .. } => children[0].peak,
        ImplNode::Block { .. } => children
            .iter()
            .fold(MemVec::zero(), |acc, c| acc.max_per_level(&c.peak)),
        ImplNode::AllocBind { buffer, .. } => {
            let mut peak = children
                .iter()
                .fold(MemVec::zero(), |acc, c| acc.max_per_level(&c.peak));
            peak[buffer.level] =
                peak[buffer.level].saturating_add(buffer.allocated_bytes(target));
            peak
        }
        ImplNode::Pipeline { intermediate, .. } => {
            let mut peak = children
                .iter()
                .fold(MemVec::zero(), |acc, c| acc.max_per_level(&c.peak));
            peak[intermediate.level] =
                peak[intermediate.level].saturating_add(intermediate.allocated_bytes(target));
            peak
        }
    }
}

/// Rebuilds the complete optimal implementation by following stored
/// decisions. Fails when the database misses a dependency or the spec was
/// memoized unsatisfiable.
pub fn reconstruct(spec: &Spec, db: &RwLock<Db>, target: &Target) -> Result<ImplNode, SearchError> {
    let payload = db
        .read()
        .unwrap()
        .get(spec)?
        .ok_or_else(|| SearchError::MissingDecision(spec.to_string()))?;
    match payload.decision {
        Decision::Unsat => Err(SearchError::Unsat {
            spec: spec.to_string(),
            path: Vec::new(),
        }),
        Decision::Apply(rw) => {
            let mut node = apply(spec, &rw, target)?;
            fill_holes(&mut node, db, target)?;
            Ok(node)
        }
    }
}

fn fill_holes(node: &mut ImplNode, db: &RwLock<Db>, target: &Target) -> Result<(), SearchError> {
    for child in node.children_mut() {
        if let ImplNode::SpecHole { spec } = child {
            *child = reconstruct(&spec.clone(), db, target)?;
        } else {
            fill_holes(child, db, target)?;
        }
    }
    Ok(())
}

/// Replaces every remaining hole of a partial implementation with its
/// synthesized optimal subtree. Scheduled regions are untouched.
pub fn synthesize_all(
    mut root: ImplNode,
    db: &RwLock<Db>,
    target: &Target,
) -> Result<ImplNode, SearchError> {
    let mut path = Vec::new();
    synthesize_all_rec(&mut root, db, target, &mut path)?;
    Ok(root)
}

fn synthesize_all_rec(
    node: &mut ImplNode,
    db: &RwLock<Db>,
    target: &Target,
    path: &mut Vec<usize>,
) -> Result<(), SearchError> {
    if let ImplNode::SpecHole { spec } = node {
        let spec = spec.clone();
        let payload = synthesize(&spec, db, target)?;
        if payload.main == UNSAT_MAIN {
            return Err(SearchError::Unsat {
                spec: spec.to_string(),
                path: path.clone(),
            });
        }
        *node = reconstruct(&spec, db, target)?;
        return Ok(());
    }
    let multi = node.children().len() > 1;
    for (i, child) in node.children_mut().iter_mut().enumerate() {
        if multi {
            path.push(i);
        }
        synthesize_all_rec(child, db, target, path)?;
        if multi {
            path.pop();
        }
    }
    Ok(())
}

impl<'t> Schedule<'t> {
    /// Completes the partial implementation with synthesis, filling every
    /// remaining hole optimally.
    pub fn synthesize_all(self, db: &RwLock<Db>) -> Result<Schedule<'t>, ScheduleError> {
        let target = self.target;
        let root = synthesize_all(self.root, db, target).map_err(|e| match e {
            SearchError::StaleDecision(rw) => ScheduleError::Rewrite(rw),
            other => ScheduleError::Synthesis(other.to_string()),
        })?;
        Ok(Schedule {
            target,
            goal: self.goal,
            root,
        })
    }
}

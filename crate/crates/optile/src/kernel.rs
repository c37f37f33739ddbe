//! Microkernels: the leaves implementations bottom out in. Each kernel has a
//! decidable applicability predicate over specs and a cost proportional to
//! the number of values or registers it touches.

use crate::spec::{PrimKind, Spec, SpecKind};
use crate::target::{MemoryLevel, Target};
use std::fmt;

#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash)]
pub enum Kernel {
    MultAdd,
    BroadcastVecMultAdd,
    ScalarMove,
    VectorMove,
    CastMoveBf16F32,
    ScalarZero,
    VectorZero,
}

pub const KERNELS: [Kernel; 7] = [
    Kernel::MultAdd,
    Kernel::BroadcastVecMultAdd,
    Kernel::ScalarMove,
    Kernel::VectorMove,
    Kernel::CastMoveBf16F32,
    Kernel::ScalarZero,
    Kernel::VectorZero,
];

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::MultAdd => "MultAdd",
            Kernel::BroadcastVecMultAdd => "BroadcastVecMultAdd",
            Kernel::ScalarMove => "ScalarMove",
            Kernel::VectorMove => "VectorMove",
            Kernel::CastMoveBf16F32 => "CastMove_bf16_f32",
            Kernel::ScalarZero => "ScalarZero",
            Kernel::VectorZero => "VectorZero",
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        KERNELS.iter().position(|k| *k == self).unwrap()
    }

    pub fn from_index(idx: usize) -> Option<Kernel> {
        KERNELS.get(idx).copied()
    }

    /// Checks the kernel against a spec, reporting the first failing clause.
    pub fn applicable(self, spec: &Spec) -> Result<(), &'static str> {
        match self {
            Kernel::MultAdd => {
                let SpecKind::Prim(PrimKind::MatmulAccum) = spec.kind else {
                    return Err("kind must be MatmulAccum");
                };
                if spec.shape != [1, 1, 1, 1] {
                    return Err("shape must be 1x1x1x1");
                }
                if spec.operands.iter().any(|o| o.level != MemoryLevel::RF) {
                    return Err("all operands must be in RF");
                }
                let d = spec.operands[0].dtype;
                if spec.operands.iter().any(|o| o.dtype != d) {
                    return Err("operand dtypes must match");
                }
                if d == crate::tensorspec::Dtype::Bf16 {
                    return Err("no bf16 arithmetic");
                }
                Ok(())
            }
            Kernel::BroadcastVecMultAdd => {
                let SpecKind::Prim(PrimKind::MatmulAccum) = spec.kind else {
                    return Err("kind must be MatmulAccum");
                };
                let [b, m, k, n] = spec.shape[..] else {
                    return Err("shape must be rank 4");
                };
                if b != 1 || m != 1 || k != 1 {
                    return Err("b, m, and k must be 1");
                }
                let lhs = &spec.operands[0];
                let rhs = &spec.operands[1];
                let out = &spec.operands[2];
                if lhs.level != MemoryLevel::RF {
                    return Err("lhs must be an RF scalar");
                }
                if rhs.level != MemoryLevel::VRF || out.level != MemoryLevel::VRF {
                    return Err("rhs and out must be in VRF");
                }
                if spec
                    .operands
                    .iter()
                    .any(|o| o.dtype != crate::tensorspec::Dtype::F32)
                {
                    return Err("operands must be f32");
                }
                let v = rhs.vector_size.unwrap();
                if out.vector_size != Some(v) {
                    return Err("rhs and out vector sizes must match");
                }
                if n % v != 0 {
                    return Err("n must be a multiple of the vector size");
                }
                if !rhs.is_fully_contiguous() || !out.is_fully_contiguous() {
                    return Err("rhs and out must be fully contiguous");
                }
                if !rhs.layout.extensionally_equal(&out.layout, &rhs.shape) {
                    return Err("rhs and out layouts must agree");
                }
                Ok(())
            }
            Kernel::ScalarMove => {
                let SpecKind::Prim(PrimKind::Move) = spec.kind else {
                    return Err("kind must be Move");
                };
                if spec.volume() != 1 {
                    return Err("volume must be 1");
                }
                let src = &spec.operands[0];
                let dst = &spec.operands[1];
                if src.dtype != dst.dtype {
                    return Err("dtypes must match");
                }
                let pair_ok = |a: MemoryLevel, b: MemoryLevel| {
                    a == MemoryLevel::RF && matches!(b, MemoryLevel::L1 | MemoryLevel::GL)
                };
                if !pair_ok(src.level, dst.level) && !pair_ok(dst.level, src.level) {
                    return Err("must move a value between RF and L1 or GL");
                }
                Ok(())
            }
            Kernel::VectorMove => {
                let SpecKind::Prim(PrimKind::Move) = spec.kind else {
                    return Err("kind must be Move");
                };
                let src = &spec.operands[0];
                let dst = &spec.operands[1];
                if src.dtype != dst.dtype {
                    return Err("dtypes must match");
                }
                let (vec_side, mem_side) = match (src.level, dst.level) {
                    (MemoryLevel::VRF, MemoryLevel::L1 | MemoryLevel::GL) => (src, dst),
                    (MemoryLevel::L1 | MemoryLevel::GL, MemoryLevel::VRF) => (dst, src),
                    _ => return Err("must move between VRF and L1 or GL"),
                };
                if !mem_side.is_fully_contiguous() || !vec_side.is_fully_contiguous() {
                    return Err("both sides must be fully contiguous");
                }
                let v = vec_side.vector_size.unwrap();
                if spec.volume() % u64::from(v) != 0 {
                    return Err("volume must be a multiple of the vector size");
                }
                if !src.layout.extensionally_equal(&dst.layout, &src.shape) {
                    return Err("source and destination layouts must agree");
                }
                Ok(())
            }
            Kernel::CastMoveBf16F32 => {
                let SpecKind::Prim(PrimKind::Move) = spec.kind else {
                    return Err("kind must be Move");
                };
                if spec.volume() != 1 {
                    return Err("volume must be 1");
                }
                let src = &spec.operands[0];
                let dst = &spec.operands[1];
                if src.dtype != crate::tensorspec::Dtype::Bf16
                    || dst.dtype != crate::tensorspec::Dtype::F32
                {
                    return Err("must cast bf16 to f32");
                }
                if src.level == MemoryLevel::VRF || dst.level == MemoryLevel::VRF {
                    return Err("vector-register casts are not supported");
                }
                Ok(())
            }
            Kernel::ScalarZero => {
                let SpecKind::Prim(PrimKind::Zero) = spec.kind else {
                    return Err("kind must be Zero");
                };
                if spec.volume() != 1 {
                    return Err("volume must be 1");
                }
                if spec.operands[0].level == MemoryLevel::VRF {
                    return Err("use VectorZero for VRF");
                }
                Ok(())
            }
            Kernel::VectorZero => {
                let SpecKind::Prim(PrimKind::Zero) = spec.kind else {
                    return Err("kind must be Zero");
                };
                let out = &spec.operands[0];
                if out.level != MemoryLevel::VRF {
                    return Err("operand must be in VRF");
                }
                if !out.is_fully_contiguous() {
                    return Err("operand must be fully contiguous");
                }
                if spec.volume() % u64::from(out.vector_size.unwrap()) != 0 {
                    return Err("volume must be a multiple of the vector size");
                }
                Ok(())
            }
        }
    }

    /// Kernel application cost: the configured unit cost times the number of
    /// values or vector registers written.
    pub fn cost(self, spec: &Spec, target: &Target) -> u32 {
        let kc = &target.kernel_costs;
        let (unit, count) = match self {
            Kernel::MultAdd => (kc.mult_add, 1),
            Kernel::BroadcastVecMultAdd => {
                let out = &spec.operands[2];
                (
                    kc.broadcast_vec_mult_add,
                    out.volume() / u64::from(out.vector_size.unwrap()),
                )
            }
            Kernel::ScalarMove => (kc.scalar_move, 1),
            Kernel::VectorMove => {
                let v = spec.operands[0]
                    .vector_size
                    .or(spec.operands[1].vector_size)
                    .unwrap();
                (kc.vector_move, spec.volume() / u64::from(v))
            }
            Kernel::CastMoveBf16F32 => (kc.cast_move_bf16_f32, 1),
            Kernel::ScalarZero => (kc.scalar_zero, 1),
            Kernel::VectorZero => {
                let out = &spec.operands[0];
                (
                    kc.vector_zero,
                    out.volume() / u64::from(out.vector_size.unwrap()),
                )
            }
        };
        u64::from(unit)
            .saturating_mul(count)
            .try_into()
            .unwrap_or(u32::MAX)
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

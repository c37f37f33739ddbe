//! The rewrite rules that decompose specs into partial implementations, and
//! the scheduling interface that exposes them to users.
//!
//! Every rewrite consumes a spec and produces one implementation node whose
//! children are smaller spec holes. Each application strictly decreases the
//! lexicographic measure (composed length, limit budget, volume, distance
//! from the accumulating form), so any rewrite sequence terminates.

use crate::ir::{ImplNode, IrError, LoopTile, OperandSlot};
use crate::kernel::Kernel;
use crate::layout::{Layout, LayoutError};
use crate::memorylimits::{LimitExceeded, MemVec, MemoryLimits, PipelineSlack, SlackSide};
use crate::spec::{move_spec, zero_spec, PrimKind, Spec, SpecError, SpecKind};
use crate::target::{MemoryLevel, Target};
use crate::tensorspec::{TensorSpec, TensorSpecError};
use std::fmt;

/// An action applicable to a spec.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Rewrite {
    Tile {
        shape: Vec<u32>,
        parallel: bool,
    },
    MoveParam {
        operand: u8,
        level: MemoryLevel,
        layout: Layout,
        vector_size: Option<u32>,
    },
    Select {
        kernel: Kernel,
    },
    Bufferize {
        index: u8,
        level: MemoryLevel,
        layout: Layout,
        vector_size: Option<u32>,
    },
    ToAccum,
}

impl fmt::Display for Rewrite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rewrite::Tile { shape, parallel } => {
                write!(f, "tile{}([", if *parallel { "_parallel" } else { "" })?;
                for (i, e) in shape.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, "])")
            }
            Rewrite::MoveParam {
                operand,
                level,
                layout,
                vector_size,
            } => {
                write!(f, "move_param({operand}, {level}, {layout}")?;
                if let Some(v) = vector_size {
                    write!(f, ", v{v}")?;
                }
                write!(f, ")")
            }
            Rewrite::Select { kernel } => write!(f, "select({kernel})"),
            Rewrite::Bufferize {
                index,
                level,
                layout,
                vector_size,
            } => {
                write!(f, "bufferize({index}, {level}, {layout}")?;
                if let Some(v) = vector_size {
                    write!(f, ", v{v}")?;
                }
                write!(f, ")")
            }
            Rewrite::ToAccum => write!(f, "to_accum"),
        }
    }
}

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum RewriteError {
    #[error("tile shape has {got} dimensions, spec has {expected}")]
    TileArity { expected: usize, got: usize },
    #[error("tile extent {tile} does not divide spec extent {spec}")]
    NonDividingTile { tile: u32, spec: u32 },
    #[error("tile shape equals the spec shape")]
    NoOpTile,
    #[error("parallel tiling of a serial-only spec")]
    ParallelOnSerialOnly,
    #[error("tiling dimension {dim} requires an accumulating output")]
    TiledReductionNeedsAccum { dim: u8 },
    #[error("dimension {dim} does not appear in the output; it cannot be tiled in parallel")]
    ParallelOverReduction { dim: u8 },
    #[error("move would not change the operand's tensor spec")]
    SameTensorSpec,
    #[error(transparent)]
    Memory(#[from] LimitExceeded),
    #[error("{kernel} is not applicable: {reason}")]
    Inapplicable { kernel: Kernel, reason: &'static str },
    #[error("bufferize applies only to composed specs")]
    NotCompose,
    #[error("split index {index} out of range for {components} components")]
    BadSplitIndex { index: u8, components: usize },
    #[error("{0} has no accumulating counterpart to rewrite to")]
    NotAccumPair(String),
    #[error(transparent)]
    TensorSpec(#[from] TensorSpecError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

pub fn apply(spec: &Spec, rewrite: &Rewrite, target: &Target) -> Result<ImplNode, RewriteError> {
    match rewrite {
        Rewrite::Tile { shape, parallel } => apply_tile(spec, shape, *parallel, target),
        Rewrite::MoveParam {
            operand,
            level,
            layout,
            vector_size,
        } => apply_move_param(spec, *operand, *level, layout.clone(), *vector_size, target),
        Rewrite::Select { kernel } => apply_select(spec, *kernel),
        Rewrite::Bufferize {
            index,
            level,
            layout,
            vector_size,
        } => apply_bufferize(spec, *index, *level, layout.clone(), *vector_size, target),
        Rewrite::ToAccum => apply_to_accum(spec),
    }
}

/// Tiles the spec into a loop over zipped operand tiles. Dimensions missing
/// from the output may only be tiled when the output accumulates, and never
/// in parallel, since iterations would then race on the same output elements.
pub fn apply_tile(
    spec: &Spec,
    tile_shape: &[u32],
    parallel: bool,
    target: &Target,
) -> Result<ImplNode, RewriteError> {
    if tile_shape.len() != spec.shape.len() {
        return Err(RewriteError::TileArity {
            expected: spec.shape.len(),
            got: tile_shape.len(),
        });
    }
    if parallel && spec.serial_only {
        return Err(RewriteError::ParallelOnSerialOnly);
    }
    let mut any_change = false;
    let info = spec.operand_info();
    for (d, (&t, &s)) in tile_shape.iter().zip(&spec.shape).enumerate() {
        if t == 0 || t > s || s % t != 0 {
            return Err(RewriteError::NonDividingTile { tile: t, spec: s });
        }
        if t != s {
            any_change = true;
            if !info.dim_in_output(d as u8) {
                if !spec.kind.output_is_read() {
                    return Err(RewriteError::TiledReductionNeedsAccum { dim: d as u8 });
                }
                if parallel {
                    return Err(RewriteError::ParallelOverReduction { dim: d as u8 });
                }
            }
        }
    }
    if !any_change {
        return Err(RewriteError::NoOpTile);
    }

    let mut tiles = Vec::new();
    let mut body_operands = Vec::with_capacity(spec.operands.len());
    for (i, (ts, dim_map)) in spec.operands.iter().zip(&info.dim_maps).enumerate() {
        let tile: Vec<u32> = dim_map.iter().map(|&d| tile_shape[d as usize]).collect();
        if tile == ts.shape {
            body_operands.push(ts.clone());
        } else {
            let tiled = ts.tile(&tile, target)?;
            tiles.push(LoopTile {
                operand: i as u8,
                spec: tiled.clone(),
                dim_map: dim_map.clone(),
            });
            body_operands.push(tiled);
        }
    }

    // Partial results must survive iterations, so any slack granted by an
    // enclosing pipeline does not reach the loop body.
    let body_limits = spec.limits.with_slack(None);
    let body = Spec::new(
        spec.kind.clone(),
        tile_shape.to_vec(),
        body_operands,
        spec.serial_only || parallel,
        body_limits,
    )?;
    Ok(ImplNode::Loop {
        parallel,
        outer_shape: spec.shape.clone(),
        inner_shape: tile_shape.to_vec(),
        tiles,
        body: Box::new(ImplNode::SpecHole { spec: body }),
    })
}

/// Introduces a fresh buffer for one operand at a new level or layout. Loads
/// and stores are real sub-specs only when the movement does more than model
/// cache residency: a software-managed destination or a layout change. A
/// store additionally requires the moved operand to be an output.
pub fn apply_move_param(
    spec: &Spec,
    operand: u8,
    level: MemoryLevel,
    layout: Layout,
    vector_size: Option<u32>,
    target: &Target,
) -> Result<ImplNode, RewriteError> {
    let source = &spec.operands[operand as usize];
    for p in &layout.packs {
        let extent = source.shape[p.dim as usize];
        if p.size > extent || extent % p.size != 0 {
            return Err(RewriteError::Layout(LayoutError::NonDividingStrip {
                size: p.size,
                extent,
            }));
        }
    }
    let dest = TensorSpec::fresh(
        source.dtype,
        source.shape.clone(),
        level,
        layout,
        vector_size,
        target,
    )?;
    if dest == *source {
        return Err(RewriteError::SameTensorSpec);
    }

    let mut alloc = MemVec::zero();
    alloc[level] = dest.allocated_bytes(target);
    let child_limits = spec.limits.tighten(&alloc)?;

    let layout_change = !dest
        .layout
        .extensionally_equal(&source.layout, &source.shape);
    let has_load = level.is_software_managed() || layout_change;
    let has_store = has_load && operand as usize == spec.output_index();

    let mut children = Vec::new();
    if has_load {
        children.push(ImplNode::SpecHole {
            spec: move_spec(
                source.clone(),
                dest.clone(),
                spec.serial_only,
                child_limits,
            )?,
        });
    }
    children.push(ImplNode::SpecHole {
        spec: spec
            .with_operand_replaced(operand as usize, dest.clone())?
            .with_limits(child_limits),
    });
    if has_store {
        children.push(ImplNode::SpecHole {
            spec: move_spec(
                dest.clone(),
                source.clone(),
                spec.serial_only,
                child_limits,
            )?,
        });
    }

    Ok(ImplNode::AllocBind {
        buffer: dest,
        moved_operand: operand,
        source: source.clone(),
        has_load,
        has_store,
        children,
    })
}

pub fn apply_select(spec: &Spec, kernel: Kernel) -> Result<ImplNode, RewriteError> {
    kernel
        .applicable(spec)
        .map_err(|reason| RewriteError::Inapplicable { kernel, reason })?;
    Ok(ImplNode::KernelApp {
        kernel,
        spec: spec.clone(),
    })
}

/// Rewrites a non-accumulating spec into a block that first zero-initializes
/// the output and then runs the accumulating variant.
pub fn apply_to_accum(spec: &Spec) -> Result<ImplNode, RewriteError> {
    let SpecKind::Prim(PrimKind::Matmul) = spec.kind else {
        return Err(RewriteError::NotAccumPair(spec.kind.to_string()));
    };
    let zero = zero_spec(spec.output().clone(), spec.serial_only, spec.limits)?;
    let accum = Spec::new(
        SpecKind::Prim(PrimKind::MatmulAccum),
        spec.shape.clone(),
        spec.operands.clone(),
        spec.serial_only,
        spec.limits,
    )?;
    Ok(ImplNode::Block {
        child_operands: vec![
            vec![spec.output_index() as u8],
            (0..spec.operands.len() as u8).collect(),
        ],
        children: vec![
            ImplNode::SpecHole { spec: zero },
            ImplNode::SpecHole { spec: accum },
        ],
    })
}

/// Splits a composition at edge `index` into producer and consumer stages
/// communicating through a fresh intermediate tensor. Stage limits are
/// tightened by the intermediate; the stage part that never overlaps an
/// enclosing intermediate's lifetime may reclaim inherited slack.
pub fn apply_bufferize(
    spec: &Spec,
    index: u8,
    level: MemoryLevel,
    layout: Layout,
    vector_size: Option<u32>,
    target: &Target,
) -> Result<ImplNode, RewriteError> {
    let SpecKind::Compose(kinds) = &spec.kind else {
        return Err(RewriteError::NotCompose);
    };
    if usize::from(index) + 1 >= kinds.len() {
        return Err(RewriteError::BadSplitIndex {
            index,
            components: kinds.len(),
        });
    }
    let info = spec.operand_info();
    let producer_head = usize::from(index) + 1;

    // The intermediate is the producer side's final output: the output of
    // component `index + 1`, which chains into component `index`.
    let head_kind = kinds[producer_head];
    let comp_map = &info.comp_maps[producer_head];
    let out_param = head_kind.operand_count() - 1;
    let inter_shape: Vec<u32> = crate::spec::operand_info(
        &SpecKind::Prim(head_kind),
        comp_map.len(),
    )?
    .dim_maps[out_param]
        .iter()
        .map(|&d| spec.shape[comp_map[d as usize] as usize])
        .collect();
    for p in &layout.packs {
        let extent = inter_shape[p.dim as usize];
        if p.size > extent || extent % p.size != 0 {
            return Err(RewriteError::Layout(LayoutError::NonDividingStrip {
                size: p.size,
                extent,
            }));
        }
    }
    let intermediate = TensorSpec::fresh(
        spec.output().dtype,
        inter_shape,
        level,
        layout,
        vector_size,
        target,
    )?;

    let mut alloc = MemVec::zero();
    alloc[level] = intermediate.allocated_bytes(target);
    let base_limits = spec.limits.tighten(&alloc)?;
    let reclaim = |side: SlackSide| -> Result<MemoryLimits, LimitExceeded> {
        match spec.limits.slack {
            Some(s) if s.side == side => spec.limits.tighten_with_slack(&s.bytes, &alloc),
            _ => Ok(base_limits),
        }
    };
    let producer_limits = reclaim(SlackSide::ProducerPrefix)?.with_slack(Some(PipelineSlack {
        side: SlackSide::ProducerPrefix,
        bytes: alloc,
    }));
    let consumer_limits = reclaim(SlackSide::ConsumerSuffix)?.with_slack(Some(PipelineSlack {
        side: SlackSide::ConsumerSuffix,
        bytes: alloc,
    }));

    // Producer stage: components after the split edge; its flat shape is the
    // matching suffix of the parent shape.
    let producer_kinds = &kinds[producer_head..];
    let producer_kind = if producer_kinds.len() == 1 {
        SpecKind::Prim(producer_kinds[0])
    } else {
        SpecKind::Compose(producer_kinds.to_vec())
    };
    let producer_shape = spec.shape[info.segment_offsets[producer_head]..].to_vec();

    let mut producer_slots = Vec::new();
    let mut producer_ops = Vec::new();
    for (j, src) in info.sources.iter().enumerate().take(spec.operands.len() - 1) {
        if usize::from(src.0) >= producer_head {
            producer_slots.push(OperandSlot::Param(j as u8));
            producer_ops.push(spec.operands[j].clone());
        }
    }
    producer_slots.push(OperandSlot::Local);
    producer_ops.push(intermediate.clone());
    let producer = Spec::new(
        producer_kind,
        producer_shape,
        producer_ops,
        spec.serial_only,
        producer_limits,
    )?;

    // Consumer stage: components up to and including the split edge, with the
    // intermediate as the innermost component's first input.
    let consumer_kinds = &kinds[..=usize::from(index)];
    let consumer_kind = if consumer_kinds.len() == 1 {
        SpecKind::Prim(consumer_kinds[0])
    } else {
        SpecKind::Compose(consumer_kinds.to_vec())
    };
    // Its flat shape: the kept consumers' free segments, then the full spec
    // shape of the component at the split edge (now innermost).
    let tail_map = &info.comp_maps[usize::from(index)];
    let mut consumer_shape: Vec<u32> =
        spec.shape[..info.segment_offsets[usize::from(index)]].to_vec();
    consumer_shape.extend(tail_map.iter().map(|&flat| spec.shape[flat as usize]));

    let mut consumer_slots = Vec::new();
    let mut consumer_ops = Vec::new();
    for (j, src) in info.sources.iter().enumerate().take(spec.operands.len() - 1) {
        if usize::from(src.0) < usize::from(index) {
            consumer_slots.push(OperandSlot::Param(j as u8));
            consumer_ops.push(spec.operands[j].clone());
        }
    }
    consumer_slots.push(OperandSlot::Local);
    consumer_ops.push(intermediate.clone());
    for (j, src) in info.sources.iter().enumerate().take(spec.operands.len() - 1) {
        if usize::from(src.0) == usize::from(index) {
            consumer_slots.push(OperandSlot::Param(j as u8));
            consumer_ops.push(spec.operands[j].clone());
        }
    }
    consumer_slots.push(OperandSlot::Param(spec.output_index() as u8));
    consumer_ops.push(spec.output().clone());
    let consumer = Spec::new(
        consumer_kind,
        consumer_shape,
        consumer_ops,
        spec.serial_only,
        consumer_limits,
    )?;

    Ok(ImplNode::Pipeline {
        intermediate,
        stage_operands: vec![producer_slots, consumer_slots],
        stages: vec![
            ImplNode::SpecHole { spec: producer },
            ImplNode::SpecHole { spec: consumer },
        ],
    })
}

#[derive(thiserror::Error, Debug)]
pub enum ScheduleError {
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("synthesis failed: {0}")]
    Synthesis(String),
}

/// Builder for scheduling rewrites by hand. Each operation targets the only
/// remaining hole, or, when several exist, the sole non-Move hole.
#[derive(Clone, Debug)]
pub struct Schedule<'t> {
    pub target: &'t Target,
    pub goal: Spec,
    pub root: ImplNode,
}

impl<'t> Schedule<'t> {
    pub fn new(target: &'t Target, goal: Spec) -> Schedule<'t> {
        let root = ImplNode::SpecHole { spec: goal.clone() };
        Schedule { target, goal, root }
    }

    fn apply_default(mut self, rewrite: Rewrite) -> Result<Schedule<'t>, ScheduleError> {
        let path = self.root.default_hole_path()?;
        let hole = self.root.hole_at_path_mut(&path)?;
        let ImplNode::SpecHole { spec } = &*hole else {
            unreachable!()
        };
        let replacement = apply(spec, &rewrite, self.target)?;
        *hole = replacement;
        Ok(self)
    }

    pub fn tile(self, shape: &[u32]) -> Result<Schedule<'t>, ScheduleError> {
        self.apply_default(Rewrite::Tile {
            shape: shape.to_vec(),
            parallel: false,
        })
    }

    pub fn tile_parallel(self, shape: &[u32]) -> Result<Schedule<'t>, ScheduleError> {
        self.apply_default(Rewrite::Tile {
            shape: shape.to_vec(),
            parallel: true,
        })
    }

    pub fn move_param(
        self,
        operand: u8,
        level: MemoryLevel,
        layout: Layout,
        vector_size: Option<u32>,
    ) -> Result<Schedule<'t>, ScheduleError> {
        self.apply_default(Rewrite::MoveParam {
            operand,
            level,
            layout,
            vector_size,
        })
    }

    pub fn select(self, kernel: Kernel) -> Result<Schedule<'t>, ScheduleError> {
        self.apply_default(Rewrite::Select { kernel })
    }

    pub fn to_accum(self) -> Result<Schedule<'t>, ScheduleError> {
        self.apply_default(Rewrite::ToAccum)
    }

    pub fn bufferize(
        self,
        index: u8,
        level: MemoryLevel,
        layout: Layout,
        vector_size: Option<u32>,
    ) -> Result<Schedule<'t>, ScheduleError> {
        self.apply_default(Rewrite::Bufferize {
            index,
            level,
            layout,
            vector_size,
        })
    }

    /// Applies `f` to the sub-schedule rooted at the hole addressed by
    /// `path`, then splices the result back.
    pub fn subschedule(
        mut self,
        path: &[usize],
        f: impl FnOnce(Schedule<'t>) -> Result<Schedule<'t>, ScheduleError>,
    ) -> Result<Schedule<'t>, ScheduleError> {
        let target = self.target;
        let hole = self.root.hole_at_path_mut(path)?;
        let ImplNode::SpecHole { spec } = &*hole else {
            return Err(ScheduleError::Ir(IrError::NotAHole(path.to_vec())));
        };
        let sub = Schedule::new(target, spec.clone());
        let scheduled = f(sub)?;
        *hole = scheduled.root;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memorylimits::MemoryLimits;
    use crate::tensorspec::Dtype;

    fn t() -> Target {
        Target::default()
    }

    fn gl(dtype: Dtype, shape: Vec<u32>, target: &Target) -> TensorSpec {
        let rank = shape.len() as u8;
        TensorSpec::fresh(dtype, shape, MemoryLevel::GL, Layout::row_major(rank), None, target)
            .unwrap()
    }

    fn fig1_goal(target: &Target) -> Spec {
        // The running example: a 1x4x4x16 accumulating matmul with lhs in RF,
        // rhs in VRF, and the output in L1.
        let lhs = TensorSpec::fresh(
            Dtype::F32,
            vec![1, 4, 4],
            MemoryLevel::RF,
            Layout::row_major(3),
            None,
            target,
        )
        .unwrap();
        let rhs = TensorSpec::fresh(
            Dtype::F32,
            vec![1, 4, 16],
            MemoryLevel::VRF,
            Layout::row_major(3),
            Some(8),
            target,
        )
        .unwrap();
        let out = TensorSpec::fresh(
            Dtype::F32,
            vec![1, 4, 16],
            MemoryLevel::L1,
            Layout::row_major(3),
            None,
            target,
        )
        .unwrap();
        Spec::new(
            SpecKind::Prim(PrimKind::MatmulAccum),
            vec![1, 4, 4, 16],
            vec![lhs, rhs, out],
            false,
            MemoryLimits::from_capacities(&target.capacities),
        )
        .unwrap()
    }

    #[test]
    fn tile_produces_expected_loop() {
        let target = t();
        let spec = fig1_goal(&target);
        let node = apply_tile(&spec, &[1, 1, 1, 16], false, &target).unwrap();
        let ImplNode::Loop { tiles, body, .. } = &node else {
            panic!("expected a loop")
        };
        assert_eq!(tiles.len(), 3);
        let ImplNode::SpecHole { spec: inner } = &**body else {
            panic!("expected a hole")
        };
        assert_eq!(inner.shape, vec![1, 1, 1, 16]);
        assert_eq!(inner.operands[0].shape, vec![1, 1, 1]);
        assert_eq!(inner.operands[1].shape, vec![1, 1, 16]);
        assert_eq!(inner.operands[2].shape, vec![1, 1, 16]);
        // Trip count is the extent ratio product.
        let trips: u64 = spec
            .shape
            .iter()
            .zip(&inner.shape)
            .map(|(&o, &i)| u64::from(o / i))
            .product();
        assert_eq!(trips, 16);
    }

    #[test]
    fn tile_rejects_noop_and_non_dividing() {
        let target = t();
        let spec = fig1_goal(&target);
        assert!(matches!(
            apply_tile(&spec, &[1, 4, 4, 16], false, &target),
            Err(RewriteError::NoOpTile)
        ));
        assert!(matches!(
            apply_tile(&spec, &[1, 3, 4, 16], false, &target),
            Err(RewriteError::NonDividingTile { .. })
        ));
    }

    #[test]
    fn sequenced_tiles_nest() {
        let target = t();
        let spec = fig1_goal(&target);
        let s = Schedule::new(&target, spec)
            .tile(&[1, 4, 1, 16])
            .unwrap()
            .tile(&[1, 1, 1, 16])
            .unwrap();
        let ImplNode::Loop { body, .. } = &s.root else {
            panic!()
        };
        assert!(matches!(&**body, ImplNode::Loop { .. }));
    }

    #[test]
    fn reduction_tiling_requires_accumulation() {
        let target = t();
        let goal = Spec::new(
            SpecKind::Prim(PrimKind::Matmul),
            vec![1, 4, 4, 16],
            vec![
                gl(Dtype::F32, vec![1, 4, 4], &target),
                gl(Dtype::F32, vec![1, 4, 16], &target),
                gl(Dtype::F32, vec![1, 4, 16], &target),
            ],
            false,
            MemoryLimits::from_capacities(&target.capacities),
        )
        .unwrap();
        assert!(matches!(
            apply_tile(&goal, &[1, 4, 1, 16], false, &target),
            Err(RewriteError::TiledReductionNeedsAccum { dim: 2 })
        ));
        // The accumulating form permits it, but not in parallel.
        let accum = fig1_goal(&target);
        assert!(apply_tile(&accum, &[1, 4, 1, 16], false, &target).is_ok());
        assert!(matches!(
            apply_tile(&accum, &[1, 4, 1, 16], true, &target),
            Err(RewriteError::ParallelOverReduction { dim: 2 })
        ));
    }

    #[test]
    fn move_param_output_gets_load_and_store() {
        let target = t();
        let spec = fig1_goal(&target);
        let tiled = apply_tile(&spec, &[1, 1, 1, 16], false, &target).unwrap();
        let ImplNode::Loop { body, .. } = tiled else {
            panic!()
        };
        let ImplNode::SpecHole { spec: inner } = *body else {
            panic!()
        };
        let node = apply_move_param(
            &inner,
            2,
            MemoryLevel::VRF,
            Layout::row_major(3),
            Some(8),
            &target,
        )
        .unwrap();
        let ImplNode::AllocBind {
            has_load,
            has_store,
            children,
            buffer,
            ..
        } = &node
        else {
            panic!()
        };
        assert!(*has_load && *has_store);
        assert_eq!(children.len(), 3);
        assert_eq!(buffer.level, MemoryLevel::VRF);
        let ImplNode::SpecHole { spec: load } = &children[0] else {
            panic!()
        };
        assert_eq!(load.kind, SpecKind::Prim(PrimKind::Move));
        assert_eq!(load.operands[0].level, MemoryLevel::L1);
        assert_eq!(load.operands[1].level, MemoryLevel::VRF);
        let ImplNode::SpecHole { spec: retargeted } = &children[1] else {
            panic!()
        };
        assert_eq!(retargeted.operands[2].level, MemoryLevel::VRF);
        // Limits were tightened below the VRF capacity.
        assert!(retargeted.limits.available[MemoryLevel::VRF] < 1024);
    }

    #[test]
    fn move_param_input_gets_no_store() {
        let target = t();
        let spec = fig1_goal(&target);
        let node = apply_move_param(
            &spec,
            0,
            MemoryLevel::RF,
            Layout::col_major(3),
            None,
            &target,
        )
        .unwrap();
        let ImplNode::AllocBind {
            has_load,
            has_store,
            ..
        } = &node
        else {
            panic!()
        };
        assert!(*has_load);
        assert!(!*has_store);
    }

    #[test]
    fn hardware_level_move_is_cache_modeling_only() {
        let target = t();
        let goal = Spec::new(
            SpecKind::Prim(PrimKind::Move),
            vec![4, 16],
            vec![
                gl(Dtype::F32, vec![4, 16], &target),
                gl(Dtype::F32, vec![4, 16], &target),
            ],
            false,
            MemoryLimits::from_capacities(&target.capacities),
        )
        .unwrap();
        let node = apply_move_param(
            &goal,
            0,
            MemoryLevel::L1,
            Layout::row_major(2),
            None,
            &target,
        )
        .unwrap();
        let ImplNode::AllocBind {
            has_load,
            has_store,
            children,
            ..
        } = &node
        else {
            panic!()
        };
        assert!(!*has_load && !*has_store);
        assert_eq!(children.len(), 1);
    }

    #[test]
    fn move_param_rejects_identical_spec() {
        let target = t();
        let goal = Spec::new(
            SpecKind::Prim(PrimKind::Move),
            vec![4, 16],
            vec![
                gl(Dtype::F32, vec![4, 16], &target),
                gl(Dtype::F32, vec![4, 16], &target),
            ],
            false,
            MemoryLimits::from_capacities(&target.capacities),
        )
        .unwrap();
        assert!(matches!(
            apply_move_param(&goal, 0, MemoryLevel::GL, Layout::row_major(2), None, &target),
            Err(RewriteError::SameTensorSpec)
        ));
    }

    #[test]
    fn to_accum_examples() {
        let target = t();
        let goal = Spec::new(
            SpecKind::Prim(PrimKind::Matmul),
            vec![1, 4, 4, 16],
            vec![
                gl(Dtype::F32, vec![1, 4, 4], &target),
                gl(Dtype::F32, vec![1, 4, 16], &target),
                gl(Dtype::F32, vec![1, 4, 16], &target),
            ],
            false,
            MemoryLimits::from_capacities(&target.capacities),
        )
        .unwrap();
        let node = apply_to_accum(&goal).unwrap();
        let ImplNode::Block { children, .. } = &node else {
            panic!()
        };
        let ImplNode::SpecHole { spec: zero } = &children[0] else {
            panic!()
        };
        assert_eq!(zero.kind, SpecKind::Prim(PrimKind::Zero));
        assert_eq!(zero.shape, vec![1, 4, 16]);
        let ImplNode::SpecHole { spec: accum } = &children[1] else {
            panic!()
        };
        assert_eq!(accum.kind, SpecKind::Prim(PrimKind::MatmulAccum));

        // Already-accumulating and unpaired kinds are rejected.
        assert!(apply_to_accum(accum).is_err());
        let mv = Spec::new(
            SpecKind::Prim(PrimKind::Move),
            vec![4, 4],
            vec![
                gl(Dtype::F32, vec![4, 4], &target),
                gl(Dtype::F32, vec![4, 4], &target),
            ],
            false,
            MemoryLimits::from_capacities(&target.capacities),
        )
        .unwrap();
        assert!(apply_to_accum(&mv).is_err());
    }

    fn compose_goal(target: &Target) -> Spec {
        Spec::new(
            SpecKind::Compose(vec![PrimKind::Matmul, PrimKind::Matmul]),
            vec![32, 1, 32, 1024, 32],
            vec![
                gl(Dtype::F32, vec![1, 32, 32], target),
                gl(Dtype::F32, vec![1, 32, 1024], target),
                gl(Dtype::F32, vec![1, 1024, 32], target),
                gl(Dtype::F32, vec![1, 32, 32], target),
            ],
            false,
            MemoryLimits::from_capacities(&target.capacities),
        )
        .unwrap()
    }

    #[test]
    fn bufferize_splits_composition() {
        let target = t();
        let goal = compose_goal(&target);
        let node =
            apply_bufferize(&goal, 0, MemoryLevel::L1, Layout::row_major(3), None, &target)
                .unwrap();
        let ImplNode::Pipeline {
            intermediate,
            stages,
            stage_operands,
        } = &node
        else {
            panic!()
        };
        assert_eq!(intermediate.shape, vec![1, 32, 32]);
        assert_eq!(intermediate.level, MemoryLevel::L1);
        let ImplNode::SpecHole { spec: producer } = &stages[0] else {
            panic!()
        };
        assert_eq!(producer.kind, SpecKind::Prim(PrimKind::Matmul));
        assert_eq!(producer.shape, vec![1, 32, 1024, 32]);
        let ImplNode::SpecHole { spec: consumer } = &stages[1] else {
            panic!()
        };
        assert_eq!(consumer.kind, SpecKind::Prim(PrimKind::Matmul));
        assert_eq!(consumer.shape, vec![1, 32, 32, 32]);
        // Producer: (b, c) inputs then the intermediate; consumer reads the
        // intermediate first.
        assert_eq!(
            stage_operands[0],
            vec![
                OperandSlot::Param(1),
                OperandSlot::Param(2),
                OperandSlot::Local
            ]
        );
        assert_eq!(
            stage_operands[1],
            vec![
                OperandSlot::Local,
                OperandSlot::Param(0),
                OperandSlot::Param(3)
            ]
        );
    }

    #[test]
    fn bufferize_rejects_primitives() {
        let target = t();
        let goal = fig1_goal(&target);
        assert!(matches!(
            apply_bufferize(&goal, 0, MemoryLevel::L1, Layout::row_major(3), None, &target),
            Err(RewriteError::NotCompose)
        ));
    }

    #[test]
    fn nested_bufferize_reclaims_slack() {
        let target = t();
        // Three chained matmuls; the first split leaves the producer stage a
        // composition that can be split again.
        let goal = Spec::new(
            SpecKind::Compose(vec![PrimKind::Matmul, PrimKind::Matmul, PrimKind::Matmul]),
            vec![16, 16, 1, 16, 16, 16],
            vec![
                gl(Dtype::F32, vec![1, 16, 16], &target),
                gl(Dtype::F32, vec![1, 16, 16], &target),
                gl(Dtype::F32, vec![1, 16, 16], &target),
                gl(Dtype::F32, vec![1, 16, 16], &target),
                gl(Dtype::F32, vec![1, 16, 16], &target),
            ],
            false,
            MemoryLimits::new(MemVec([64, 1024, 4096, 1 << 30])),
        )
        .unwrap();
        let node =
            apply_bufferize(&goal, 0, MemoryLevel::L1, Layout::row_major(3), None, &target)
                .unwrap();
        let ImplNode::Pipeline { stages, .. } = &node else {
            panic!()
        };
        let ImplNode::SpecHole { spec: producer } = &stages[0] else {
            panic!()
        };
        // 16x16 f32 intermediate = 1024 bytes; 4096 - 1024 snaps to 2048.
        assert_eq!(producer.limits.available[MemoryLevel::L1], 2048);
        assert!(producer.limits.slack.is_some());

        // Splitting the producer again: its own producer reclaims the outer
        // intermediate's bytes. 2048 + 1024 - 1024 snaps to 2048, where
        // without slack it would be 1024.
        let inner =
            apply_bufferize(producer, 0, MemoryLevel::L1, Layout::row_major(3), None, &target)
                .unwrap();
        let ImplNode::Pipeline { stages, .. } = &inner else {
            panic!()
        };
        let ImplNode::SpecHole { spec: pp } = &stages[0] else {
            panic!()
        };
        assert_eq!(pp.limits.available[MemoryLevel::L1], 2048);
        let ImplNode::SpecHole { spec: pc } = &stages[1] else {
            panic!()
        };
        assert_eq!(pc.limits.available[MemoryLevel::L1], 1024);
    }

    #[test]
    fn default_child_selection() {
        let target = t();
        let spec = fig1_goal(&target);
        // After tiling and moving the output, three holes remain; the select
        // with no path must target the sole non-Move hole.
        let s = Schedule::new(&target, spec)
            .tile(&[1, 1, 1, 16])
            .unwrap()
            .move_param(2, MemoryLevel::VRF, Layout::row_major(3), Some(8))
            .unwrap()
            .select(Kernel::BroadcastVecMultAdd)
            .unwrap();
        let holes = s.root.holes();
        assert_eq!(holes.len(), 2);
        assert!(holes
            .iter()
            .all(|(_, h)| h.kind == SpecKind::Prim(PrimKind::Move)));
        // With two non-Move holes the default is ambiguous.
        let goal2 = compose_goal(&target);
        let split = Schedule::new(&target, goal2)
            .bufferize(0, MemoryLevel::L1, Layout::row_major(3), None)
            .unwrap();
        assert!(matches!(
            split.select(Kernel::MultAdd),
            Err(ScheduleError::Ir(IrError::Ambiguous(2)))
        ));
    }
}

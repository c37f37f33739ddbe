//! The affine cost model: a proxy for cycles per iteration of an
//! implementation run in a loop with no carried dependencies.
//!
//! Every node's cost is an affine function of its children's costs and never
//! less than any of them, which is what gives the search its optimal
//! substructure. Serial loops multiply the body by the trip count; parallel
//! loops divide the trips by the target's parallelism factor and add a
//! constant synchronization cost. Blocks and pipelines add their children;
//! an alloc-binding adds the cost of moving its operand between the source
//! and destination specs; microkernels carry per-kernel constants.
//!
//! Moving a tensor costs its cache-line count times the weight of its memory
//! level, doubled for tensors that are not fully contiguous (or, under the
//! verbatim bracket, doubled for contiguous ones).

use crate::ir::ImplNode;
use crate::memorylimits::MemVec;
use crate::target::{CostBracket, Target};
use crate::tensorspec::TensorSpec;

/// Saturated costs at this value are treated as unsatisfiable.
pub const UNSAT_MAIN: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash)]
pub struct Cost {
    pub main: u32,
    pub depth: u8,
    pub peak: MemVec,
}

impl Cost {
    /// The total order deciding between implementations: main cost, then
    /// total peak bytes, then tree depth.
    pub fn ordering_key(&self) -> (u32, u64, u8) {
        (self.main, self.peak.sum(), self.depth)
    }
}

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum CostError {
    #[error("expected {expected} child costs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("cannot cost an implementation with remaining spec holes")]
    Incomplete,
}

/// Cost of moving a tensor once: lines touched, weighted by its level.
pub fn move_cost(ts: &TensorSpec, target: &Target) -> u32 {
    let lines = ts.cache_lines(target);
    let weight = u64::from(target.weight(ts.level));
    let bracket = match target.cost_bracket {
        CostBracket::PenalizeNonContiguous => {
            if ts.is_fully_contiguous() {
                1
            } else {
                2
            }
        }
        CostBracket::Verbatim => {
            if ts.is_fully_contiguous() {
                2
            } else {
                1
            }
        }
    };
    lines
        .saturating_mul(weight)
        .saturating_mul(bracket)
        .try_into()
        .unwrap_or(UNSAT_MAIN)
}

pub fn loop_trip_count(outer: &[u32], inner: &[u32]) -> u64 {
    outer
        .iter()
        .zip(inner)
        .map(|(&o, &i)| u64::from(o / i))
        .product()
}

/// One node's cost given its children's costs.
pub fn node_cost(node: &ImplNode, child_costs: &[u32], target: &Target) -> Result<u32, CostError> {
    let expected = match node {
        ImplNode::KernelApp { .. } | ImplNode::SpecHole { .. } => 0,
        other => other.children().len(),
    };
    if child_costs.len() != expected {
        return Err(CostError::Arity {
            expected,
            got: child_costs.len(),
        });
    }
    match node {
        ImplNode::SpecHole { .. } => Err(CostError::Incomplete),
        ImplNode::KernelApp { kernel, spec } => Ok(kernel.cost(spec, target)),
        ImplNode::Loop {
            parallel,
            outer_shape,
            inner_shape,
            ..
        } => {
            let trips = loop_trip_count(outer_shape, inner_shape);
            let body = u64::from(child_costs[0]);
            let main = if *parallel {
                trips
                    .div_ceil(u64::from(target.threads))
                    .saturating_mul(body)
                    .saturating_add(u64::from(target.sync_cost))
            } else {
                trips.saturating_mul(body)
            };
            Ok(main.try_into().unwrap_or(UNSAT_MAIN))
        }
        ImplNode::Block { .. } => Ok(child_costs
            .iter()
            .fold(0u32, |acc, &c| acc.saturating_add(c))),
        ImplNode::Pipeline { intermediate, .. } => {
            // The intermediate is written once by the producer and read once
            // by the consumer.
            let through = 2 * u64::from(move_cost(intermediate, target));
            let children = child_costs
                .iter()
                .fold(0u64, |acc, &c| acc.saturating_add(u64::from(c)));
            Ok(children
                .saturating_add(through)
                .try_into()
                .unwrap_or(UNSAT_MAIN))
        }
        ImplNode::AllocBind {
            buffer, source, ..
        } => {
            let moves = u64::from(move_cost(source, target))
                .saturating_add(u64::from(move_cost(buffer, target)));
            let children = child_costs
                .iter()
                .fold(0u64, |acc, &c| acc.saturating_add(u64::from(c)));
            Ok(children
                .saturating_add(moves)
                .try_into()
                .unwrap_or(UNSAT_MAIN))
        }
    }
}

fn main_cost(node: &ImplNode, target: &Target) -> Result<u32, CostError> {
    let child_costs = node
        .children()
        .iter()
        .map(|c| main_cost(c, target))
        .collect::<Result<Vec<_>, _>>()?;
    node_cost(node, &child_costs, target)
}

/// Full cost of a complete implementation: recursive main cost, tree depth,
/// and peak memory per level.
pub fn impl_cost(node: &ImplNode, target: &Target) -> Result<Cost, CostError> {
    let main = main_cost(node, target)?;
    let peak = node.peak_memory(target).map_err(|_| CostError::Incomplete)?;
    Ok(Cost {
        main,
        depth: node.depth(),
        peak,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Kernel;
    use crate::layout::Layout;
    use crate::memorylimits::MemoryLimits;
    use crate::rewrites::Schedule;
    use crate::spec::{PrimKind, Spec, SpecKind};
    use crate::target::MemoryLevel;
    use crate::tensorspec::Dtype;

    fn t() -> Target {
        Target::default()
    }

    fn ts(
        dtype: Dtype,
        shape: Vec<u32>,
        level: MemoryLevel,
        vector_size: Option<u32>,
        target: &Target,
    ) -> TensorSpec {
        let rank = shape.len() as u8;
        TensorSpec::fresh(dtype, shape, level, Layout::row_major(rank), vector_size, target)
            .unwrap()
    }

    #[test]
    fn move_cost_examples() {
        let target = t();
        // One fully contiguous L1 line.
        let contig = ts(Dtype::F32, vec![1, 1, 16], MemoryLevel::L1, None, &target);
        assert_eq!(move_cost(&contig, &target), 4);
        // Four lines, not fully contiguous: the bracket doubles the cost.
        let mut sparse = ts(Dtype::F32, vec![4, 16], MemoryLevel::L1, None, &target);
        sparse.contiguousness = 1;
        assert_eq!(sparse.cache_lines(&target), 4);
        assert_eq!(move_cost(&sparse, &target), 4 * 4 * 2);
        // A single value in RF with weight 1.
        let rf = ts(Dtype::F32, vec![1], MemoryLevel::RF, None, &target);
        assert_eq!(move_cost(&rf, &target), 1);
    }

    #[test]
    fn verbatim_bracket_flips_direction() {
        let mut target = t();
        let contig = ts(Dtype::F32, vec![1, 1, 16], MemoryLevel::L1, None, &target);
        assert_eq!(move_cost(&contig, &target), 4);
        target.cost_bracket = crate::target::CostBracket::Verbatim;
        assert_eq!(move_cost(&contig, &target), 8);
    }

    fn fig1_schedule(target: &Target) -> (Spec, ImplNode) {
        let lhs = ts(Dtype::F32, vec![1, 4, 4], MemoryLevel::RF, None, target);
        let rhs = ts(Dtype::F32, vec![1, 4, 16], MemoryLevel::VRF, Some(8), target);
        let out = ts(Dtype::F32, vec![1, 4, 16], MemoryLevel::L1, None, target);
        let goal = Spec::new(
            SpecKind::Prim(PrimKind::MatmulAccum),
            vec![1, 4, 4, 16],
            vec![lhs, rhs, out],
            false,
            MemoryLimits::from_capacities(&target.capacities),
        )
        .unwrap();
        let s = Schedule::new(target, goal.clone())
            .tile(&[1, 1, 1, 16])
            .unwrap()
            .move_param(2, MemoryLevel::VRF, Layout::row_major(3), Some(8))
            .unwrap()
            .subschedule(&[0], |m| m.select(Kernel::VectorMove))
            .unwrap()
            .subschedule(&[1], |m| m.select(Kernel::BroadcastVecMultAdd))
            .unwrap()
            .subschedule(&[2], |m| m.select(Kernel::VectorMove))
            .unwrap();
        (goal, s.root)
    }

    #[test]
    fn hand_composed_example_cost() {
        // 16 iterations of: move the output tile in and out of vector
        // registers (m = 4 + 1), two vector moves (2 registers each), and one
        // broadcast-FMA over 2 registers.
        let target = t();
        let (_, root) = fig1_schedule(&target);
        assert!(root.is_complete());
        let cost = impl_cost(&root, &target).unwrap();
        let tout = ts(Dtype::F32, vec![1, 1, 16], MemoryLevel::L1, None, &target);
        let vout = ts(Dtype::F32, vec![1, 1, 16], MemoryLevel::VRF, Some(8), &target);
        let per_iter = move_cost(&tout, &target) + move_cost(&vout, &target) + 2 + 2 + 2;
        assert_eq!(cost.main, 16 * per_iter);
        assert_eq!(cost.main, 176);
        assert_eq!(cost.peak[MemoryLevel::VRF], 64);
    }

    #[test]
    fn node_cost_loop_examples() {
        let target = t();
        let (_, root) = fig1_schedule(&target);
        let ImplNode::Loop { .. } = &root else { panic!() };
        // Serial loop: trips * body.
        assert_eq!(node_cost(&root, &[10], &target).unwrap(), 160);
        // Parallel variant: ceil(16/8) * 10 + sync.
        if let ImplNode::Loop {
            parallel,
            outer_shape,
            inner_shape,
            tiles,
            body,
        } = root
        {
            assert!(!parallel);
            let par = ImplNode::Loop {
                parallel: true,
                outer_shape,
                inner_shape,
                tiles,
                body,
            };
            assert_eq!(
                node_cost(&par, &[10], &target).unwrap(),
                2 * 10 + target.sync_cost
            );
        }
    }

    #[test]
    fn block_sums_children() {
        let target = t();
        let node = ImplNode::Block {
            child_operands: vec![vec![0], vec![0]],
            children: vec![
                ImplNode::Block {
                    child_operands: vec![],
                    children: vec![],
                },
                ImplNode::Block {
                    child_operands: vec![],
                    children: vec![],
                },
            ],
        };
        assert_eq!(node_cost(&node, &[3, 5], &target).unwrap(), 8);
        assert!(matches!(
            node_cost(&node, &[3], &target),
            Err(CostError::Arity { .. })
        ));
    }

    #[test]
    fn single_kernel_cost() {
        let target = t();
        let rf = ts(Dtype::F32, vec![1, 1, 1], MemoryLevel::RF, None, &target);
        let spec = Spec::new(
            SpecKind::Prim(PrimKind::MatmulAccum),
            vec![1, 1, 1, 1],
            vec![rf.clone(), rf.clone(), rf],
            false,
            MemoryLimits::from_capacities(&target.capacities),
        )
        .unwrap();
        let leaf = ImplNode::KernelApp {
            kernel: Kernel::MultAdd,
            spec,
        };
        let cost = impl_cost(&leaf, &target).unwrap();
        assert_eq!(cost.main, 1);
        assert_eq!(cost.depth, 1);
        assert!(cost.peak.is_zero());
    }
}

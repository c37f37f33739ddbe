//! Partial and complete implementation trees. An implementation is complete
//! when no spec holes remain and every leaf is a microkernel application.

use crate::kernel::Kernel;
use crate::memorylimits::MemVec;
use crate::spec::Spec;
use crate::target::Target;
use crate::tensorspec::TensorSpec;
use std::fmt::Write as _;

/// Where a child node's operand comes from, relative to its parent.
#[derive(Clone, Copy, Debug, Eq, PartialEq)]
pub enum OperandSlot {
    /// The parent's operand at this index.
    Param(u8),
    /// The buffer or intermediate tensor the parent node introduces.
    Local,
}

/// One tiled operand of a loop.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopTile {
    pub operand: u8,
    /// The tile's tensor spec (shape is the tile shape).
    pub spec: TensorSpec,
    /// Operand dimension -> flat spec dimension.
    pub dim_map: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImplNode {
    /// A multidimensional loop over zipped tiles of the tiled operands.
    Loop {
        parallel: bool,
        outer_shape: Vec<u32>,
        inner_shape: Vec<u32>,
        tiles: Vec<LoopTile>,
        body: Box<ImplNode>,
    },
    /// A let-binding of a fresh buffer for one operand, with optional load
    /// and store movement children around the retargeted body.
    AllocBind {
        buffer: TensorSpec,
        moved_operand: u8,
        /// The moved operand's spec as seen by this node (for move costs).
        source: TensorSpec,
        has_load: bool,
        has_store: bool,
        /// `[load?] ++ [body] ++ [store?]`.
        children: Vec<ImplNode>,
    },
    /// Two sequential stages communicating through an intermediate tensor
    /// whose lifetime interlocks with the stages.
    Pipeline {
        intermediate: TensorSpec,
        stage_operands: Vec<Vec<OperandSlot>>,
        stages: Vec<ImplNode>,
    },
    /// Plain sequential children, each reading a subset of the parent's
    /// operands.
    Block {
        child_operands: Vec<Vec<u8>>,
        children: Vec<ImplNode>,
    },
    KernelApp {
        kernel: Kernel,
        spec: Spec,
    },
    SpecHole {
        spec: Spec,
    },
}

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum IrError {
    #[error("implementation is incomplete: a spec hole remains at {0:?}")]
    Incomplete(Vec<usize>),
    #[error("path {0:?} does not address a spec hole")]
    NotAHole(Vec<usize>),
    #[error("no spec hole to rewrite")]
    NoHole,
    #[error("rewrite target is ambiguous: {0} non-Move holes")]
    Ambiguous(usize),
}

impl ImplNode {
    pub fn children(&self) -> &[ImplNode] {
        match self {
            ImplNode::Loop { body, .. } => std::slice::from_ref(body),
            ImplNode::AllocBind { children, .. } => children,
            ImplNode::Pipeline { stages, .. } => stages,
            ImplNode::Block { children, .. } => children,
            ImplNode::KernelApp { .. } | ImplNode::SpecHole { .. } => &[],
        }
    }

    pub(crate) fn children_mut(&mut self) -> &mut [ImplNode] {
        match self {
            ImplNode::Loop { body, .. } => std::slice::from_mut(body),
            ImplNode::AllocBind { children, .. } => children,
            ImplNode::Pipeline { stages, .. } => stages,
            ImplNode::Block { children, .. } => children,
            ImplNode::KernelApp { .. } | ImplNode::SpecHole { .. } => &mut [],
        }
    }

    pub fn is_complete(&self) -> bool {
        match self {
            ImplNode::SpecHole { .. } => false,
            _ => self.children().iter().all(|c| c.is_complete()),
        }
    }

    /// All remaining holes with their paths. A path lists child indices at
    /// nodes with more than one child; single-child nodes are traversed
    /// implicitly.
    pub fn holes(&self) -> Vec<(Vec<usize>, &Spec)> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.collect_holes(&mut path, &mut out);
        out
    }

    fn collect_holes<'a>(&'a self, path: &mut Vec<usize>, out: &mut Vec<(Vec<usize>, &'a Spec)>) {
        match self {
            ImplNode::SpecHole { spec } => out.push((path.clone(), spec)),
            _ => {
                let children = self.children();
                if children.len() == 1 {
                    children[0].collect_holes(path, out);
                } else {
                    for (i, c) in children.iter().enumerate() {
                        path.push(i);
                        c.collect_holes(path, out);
                        path.pop();
                    }
                }
            }
        }
    }

    /// Follows a path to a hole, descending implicitly through single-child
    /// nodes and consuming one index per multi-child node.
    pub fn hole_at_path_mut(&mut self, path: &[usize]) -> Result<&mut ImplNode, IrError> {
        match self {
            ImplNode::SpecHole { .. } => {
                if path.is_empty() {
                    Ok(self)
                } else {
                    Err(IrError::NotAHole(path.to_vec()))
                }
            }
            _ => {
                let children = self.children_mut();
                match children.len() {
                    0 => Err(IrError::NotAHole(path.to_vec())),
                    1 => children[0].hole_at_path_mut(path),
                    n => {
                        let Some((&idx, rest)) = path.split_first() else {
                            return Err(IrError::NotAHole(path.to_vec()));
                        };
                        if idx >= n {
                            return Err(IrError::NotAHole(path.to_vec()));
                        }
                        children[idx].hole_at_path_mut(rest)
                    }
                }
            }
        }
    }

    /// The default rewrite target: the unique hole, or among several the sole
    /// one that is not a Move.
    pub fn default_hole_path(&self) -> Result<Vec<usize>, IrError> {
        let holes = self.holes();
        match holes.len() {
            0 => Err(IrError::NoHole),
            1 => Ok(holes[0].0.clone()),
            _ => {
                let non_move: Vec<_> = holes
                    .iter()
                    .filter(|(_, s)| {
                        !matches!(
                            s.kind,
                            crate::spec::SpecKind::Prim(crate::spec::PrimKind::Move)
                        )
                    })
                    .collect();
                if non_move.len() == 1 {
                    Ok(non_move[0].0.clone())
                } else {
                    Err(IrError::Ambiguous(non_move.len()))
                }
            }
        }
    }

    /// Peak bytes alive per level, for a complete implementation.
    ///
    /// Loops pass through their body; blocks take the maximum over children;
    /// an alloc-binding adds its buffer to everything beneath it. A pipeline
    /// intermediate counts against both stages, except that a stage which is
    /// itself (possibly under alloc-bindings) a pipeline excludes it from the
    /// nested sub-stage that never touches it. A loop pins such pending bytes
    /// for its whole body, since partial results must survive iterations.
    pub fn peak_memory(&self, target: &Target) -> Result<MemVec, IrError> {
        self.peak_rec(target, MemVec::zero(), MemVec::zero(), MemVec::zero())
    }

    fn peak_rec(
        &self,
        target: &Target,
        base: MemVec,
        pend_out: MemVec,
        pend_in: MemVec,
    ) -> Result<MemVec, IrError> {
        match self {
            ImplNode::SpecHole { .. } => Err(IrError::Incomplete(vec![])),
            ImplNode::KernelApp { .. } => {
                Ok(base.saturating_add(&pend_out).saturating_add(&pend_in))
            }
            ImplNode::Loop { body, .. } => {
                let folded = base.saturating_add(&pend_out).saturating_add(&pend_in);
                body.peak_rec(target, folded, MemVec::zero(), MemVec::zero())
            }
            ImplNode::Block { children, .. } => {
                let folded = base.saturating_add(&pend_out).saturating_add(&pend_in);
                let mut peak = MemVec::zero();
                for c in children {
                    peak =
                        peak.max_per_level(&c.peak_rec(target, folded, MemVec::zero(), MemVec::zero())?);
                }
                Ok(peak)
            }
            ImplNode::AllocBind {
                buffer, children, ..
            } => {
                let mut with_buf = base;
                with_buf[buffer.level] = with_buf[buffer.level]
                    .saturating_add(buffer.allocated_bytes(target));
                let mut peak = MemVec::zero();
                for c in children {
                    peak = peak.max_per_level(&c.peak_rec(target, with_buf, pend_out, pend_in)?);
                }
                Ok(peak)
            }
            ImplNode::Pipeline {
                intermediate,
                stages,
                ..
            } => {
                let mut ib = MemVec::zero();
                ib[intermediate.level] = intermediate.allocated_bytes(target);
                debug_assert_eq!(stages.len(), 2);
                let producer = stages[0].peak_rec(
                    target,
                    base,
                    pend_out.saturating_add(&ib),
                    pend_in,
                )?;
                let consumer = stages[1].peak_rec(
                    target,
                    base,
                    pend_out,
                    pend_in.saturating_add(&ib),
                )?;
                Ok(producer.max_per_level(&consumer))
            }
        }
    }

    /// Tree height: kernels and holes count 1.
    pub fn depth(&self) -> u8 {
        1 + self
            .children()
            .iter()
            .map(|c| c.depth())
            .max()
            .unwrap_or(0)
    }

    /// Renders the implementation in an indented listing form. `goal` names
    /// the root parameters.
    pub fn pretty(&self, goal: &Spec) -> String {
        let mut out = String::new();
        let names: Vec<String> = (0..goal.operands.len()).map(|i| format!("p{i}")).collect();
        let mut counters = (0usize, 0usize);
        self.pretty_rec(&mut out, 0, &names, &mut counters);
        out
    }

    fn pretty_rec(
        &self,
        out: &mut String,
        indent: usize,
        names: &[String],
        counters: &mut (usize, usize),
    ) {
        let pad = "  ".repeat(indent);
        match self {
            ImplNode::Loop {
                parallel,
                tiles,
                body,
                ..
            } => {
                let mut child_names = names.to_vec();
                write!(out, "{pad}tile{} (", if *parallel { " parallel" } else { "" }).unwrap();
                for (i, t) in tiles.iter().enumerate() {
                    let name = format!("t{}", counters.0);
                    counters.0 += 1;
                    if i > 0 {
                        write!(out, ", ").unwrap();
                    }
                    write!(
                        out,
                        "{name}: ({}, {}) <- {}",
                        shape_str(&t.spec.shape),
                        t.spec.level,
                        names[t.operand as usize]
                    )
                    .unwrap();
                    child_names[t.operand as usize] = name;
                }
                out.push_str("):\n");
                body.pretty_rec(out, indent + 1, &child_names, counters);
            }
            ImplNode::AllocBind {
                buffer,
                moved_operand,
                has_load,
                has_store,
                children,
                ..
            } => {
                let name = format!("b{}", counters.1);
                counters.1 += 1;
                let vsfx = match buffer.vector_size {
                    Some(v) => format!(", v{v}"),
                    None => String::new(),
                };
                writeln!(
                    out,
                    "{pad}alloc {name}: ({}, {}{vsfx}) <- {}:",
                    shape_str(&buffer.shape),
                    buffer.level,
                    names[*moved_operand as usize]
                )
                .unwrap();
                let src = names[*moved_operand as usize].clone();
                let mut idx = 0;
                if *has_load {
                    let ln = vec![src.clone(), name.clone()];
                    children[idx].pretty_rec(out, indent + 1, &ln, counters);
                    idx += 1;
                }
                let mut inner_names = names.to_vec();
                inner_names[*moved_operand as usize] = name.clone();
                children[idx].pretty_rec(out, indent + 1, &inner_names, counters);
                idx += 1;
                if *has_store {
                    let sn = vec![name, src];
                    children[idx].pretty_rec(out, indent + 1, &sn, counters);
                }
            }
            ImplNode::Pipeline {
                intermediate,
                stage_operands,
                stages,
            } => {
                let name = format!("b{}", counters.1);
                counters.1 += 1;
                writeln!(
                    out,
                    "{pad}pipeline ({name}: ({}, {})):",
                    shape_str(&intermediate.shape),
                    intermediate.level
                )
                .unwrap();
                for (stage, slots) in stages.iter().zip(stage_operands) {
                    let stage_names: Vec<String> = slots
                        .iter()
                        .map(|s| match s {
                            OperandSlot::Param(i) => names[*i as usize].clone(),
                            OperandSlot::Local => name.clone(),
                        })
                        .collect();
                    stage.pretty_rec(out, indent + 1, &stage_names, counters);
                }
            }
            ImplNode::Block {
                child_operands,
                children,
            } => {
                for (child, ops) in children.iter().zip(child_operands) {
                    let child_names: Vec<String> =
                        ops.iter().map(|&i| names[i as usize].clone()).collect();
                    child.pretty_rec(out, indent, &child_names, counters);
                }
            }
            ImplNode::KernelApp { kernel, .. } => {
                writeln!(out, "{pad}{kernel}({})", names.join(", ")).unwrap();
            }
            ImplNode::SpecHole { spec } => {
                let levels: Vec<String> =
                    spec.operands.iter().map(|o| o.level.to_string()).collect();
                writeln!(
                    out,
                    "{pad}{}({}, {})({})",
                    spec.kind,
                    shape_str(&spec.shape),
                    levels.join(", "),
                    names.join(", ")
                )
                .unwrap();
            }
        }
    }
}

fn shape_str(shape: &[u32]) -> String {
    shape
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Layout;
    use crate::memorylimits::MemoryLimits;
    use crate::spec::{PrimKind, SpecKind};
    use crate::target::MemoryLevel;
    use crate::tensorspec::Dtype;

    fn kernel_leaf(t: &Target) -> ImplNode {
        let rf = TensorSpec::fresh(
            Dtype::F32,
            vec![1, 1, 1],
            MemoryLevel::RF,
            Layout::row_major(3),
            None,
            t,
        )
        .unwrap();
        let spec = Spec::new(
            SpecKind::Prim(PrimKind::MatmulAccum),
            vec![1, 1, 1, 1],
            vec![rf.clone(), rf.clone(), rf],
            false,
            MemoryLimits::from_capacities(&t.capacities),
        )
        .unwrap();
        ImplNode::KernelApp {
            kernel: Kernel::MultAdd,
            spec,
        }
    }

    #[test]
    fn bare_kernel_has_zero_peak() {
        let t = Target::default();
        let leaf = kernel_leaf(&t);
        assert!(leaf.peak_memory(&t).unwrap().is_zero());
        assert_eq!(leaf.depth(), 1);
    }

    #[test]
    fn alloc_bind_counts_buffer() {
        let t = Target::default();
        let buf = TensorSpec::fresh(
            Dtype::F32,
            vec![1, 1, 16],
            MemoryLevel::VRF,
            Layout::row_major(3),
            Some(8),
            &t,
        )
        .unwrap();
        let node = ImplNode::AllocBind {
            source: buf.clone(),
            buffer: buf,
            moved_operand: 0,
            has_load: false,
            has_store: false,
            children: vec![kernel_leaf(&t)],
        };
        let peak = node.peak_memory(&t).unwrap();
        assert_eq!(peak[MemoryLevel::VRF], 64);
        assert_eq!(peak[MemoryLevel::RF], 0);
    }

    #[test]
    fn pipeline_peak_interlocks() {
        // Two stages each binding a 64-byte L1 buffer, with a 64-byte L1
        // intermediate: max(64 + 64, 64 + 64) = 128.
        let t = Target::default();
        let l1_buf = TensorSpec::fresh(
            Dtype::F32,
            vec![1, 16],
            MemoryLevel::L1,
            Layout::row_major(2),
            None,
            &t,
        )
        .unwrap();
        let stage = |t: &Target| ImplNode::AllocBind {
            source: l1_buf.clone(),
            buffer: l1_buf.clone(),
            moved_operand: 0,
            has_load: false,
            has_store: false,
            children: vec![kernel_leaf(t)],
        };
        let node = ImplNode::Pipeline {
            intermediate: l1_buf.clone(),
            stage_operands: vec![vec![OperandSlot::Local], vec![OperandSlot::Local]],
            stages: vec![stage(&t), stage(&t)],
        };
        let peak = node.peak_memory(&t).unwrap();
        assert_eq!(peak[MemoryLevel::L1], 128);
    }

    #[test]
    fn incomplete_impl_is_rejected() {
        let t = Target::default();
        let rf = TensorSpec::fresh(
            Dtype::F32,
            vec![1, 1, 1],
            MemoryLevel::RF,
            Layout::row_major(3),
            None,
            &t,
        )
        .unwrap();
        let spec = Spec::new(
            SpecKind::Prim(PrimKind::MatmulAccum),
            vec![1, 1, 1, 1],
            vec![rf.clone(), rf.clone(), rf],
            false,
            MemoryLimits::from_capacities(&t.capacities),
        )
        .unwrap();
        let hole = ImplNode::SpecHole { spec };
        assert!(!hole.is_complete());
        assert!(hole.peak_memory(&t).is_err());
    }
}

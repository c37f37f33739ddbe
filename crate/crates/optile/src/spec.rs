//! Program specifications: the logical statement of what to compute, plus the
//! resource envelope an implementation must satisfy. A spec is the unit the
//! search decomposes, memoizes, and reconstructs.

use crate::memorylimits::MemoryLimits;

use crate::tensorspec::{TensorSpec, TensorSpecError};
use std::fmt;

/// Rank cap for operands; keeps key encodings and codegen bounded.
pub const MAX_RANK: usize = 4;
/// Cap on composed pipeline length.
pub const MAX_COMPOSE: usize = 4;

#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash)]
pub enum PrimKind {
    Matmul,
    MatmulAccum,
    Move,
    Zero,
}

impl PrimKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimKind::Matmul => "Matmul",
            PrimKind::MatmulAccum => "MatmulAccum",
            PrimKind::Move => "Move",
            PrimKind::Zero => "Zero",
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        match self {
            PrimKind::Matmul => 0,
            PrimKind::MatmulAccum => 1,
            PrimKind::Move => 2,
            PrimKind::Zero => 3,
        }
    }

    pub fn from_index(idx: usize) -> Option<PrimKind> {
        [
            PrimKind::Matmul,
            PrimKind::MatmulAccum,
            PrimKind::Move,
            PrimKind::Zero,
        ]
        .get(idx)
        .copied()
    }

    pub fn operand_count(self) -> usize {
        match self {
            PrimKind::Matmul | PrimKind::MatmulAccum => 3,
            PrimKind::Move => 2,
            PrimKind::Zero => 1,
        }
    }

    pub fn input_count(self) -> usize {
        self.operand_count() - 1
    }

    /// Whether the output operand is read as well as written.
    pub fn output_is_read(self) -> bool {
        matches!(self, PrimKind::MatmulAccum)
    }

    /// Dimensions this component contributes to a composed shape when it is
    /// not innermost: everything not pinned by the chained first input.
    fn free_dims_as_consumer(self) -> usize {
        match self {
            PrimKind::Matmul | PrimKind::MatmulAccum => 1,
            PrimKind::Move => 0,
            PrimKind::Zero => 0,
        }
    }
}

impl fmt::Display for PrimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Eq, PartialEq, Hash)]
pub enum SpecKind {
    Prim(PrimKind),
    /// Component primitives bound outermost first; each component's output is
    /// the first input of the one before it, and the rightmost parameter is
    /// the final output.
    Compose(Vec<PrimKind>),
}

impl SpecKind {
    pub fn compose_len(&self) -> usize {
        match self {
            SpecKind::Prim(_) => 1,
            SpecKind::Compose(ks) => ks.len(),
        }
    }

    pub fn head(&self) -> PrimKind {
        match self {
            SpecKind::Prim(k) => *k,
            SpecKind::Compose(ks) => ks[0],
        }
    }

    pub fn output_is_read(&self) -> bool {
        self.head().output_is_read()
    }
}

impl fmt::Display for SpecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecKind::Prim(k) => write!(f, "{k}"),
            SpecKind::Compose(ks) => {
                write!(f, "Compose[")?;
                for (i, k) in ks.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{k}")?;
                }
                write!(f, "]")
            }
        }
    }
}

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum SpecError {
    #[error("{kind} expects a shape of {expected} dimensions, got {got}")]
    ShapeArity {
        kind: String,
        expected: String,
        got: usize,
    },
    #[error("extent {0} is not a power of two")]
    NonPowerOfTwoExtent(u32),
    #[error("{kind} expects {expected} operands, got {got}")]
    OperandCount {
        kind: String,
        expected: usize,
        got: usize,
    },
    #[error("operand {index} must have shape {expected:?}, got {got:?}")]
    OperandShape {
        index: usize,
        expected: Vec<u32>,
        got: Vec<u32>,
    },
    #[error("invalid composition: {0}")]
    BadCompose(String),
    #[error("operand {index}: {source}")]
    Operand {
        index: usize,
        source: TensorSpecError,
    },
}

/// Where each operand's dimensions land in the flat spec shape, and which
/// component parameter the operand feeds. Derived entirely from the kind and
/// the shape arity.
#[derive(Clone, Debug)]
pub struct OperandInfo {
    /// Per operand, operand dim -> flat spec dim.
    pub dim_maps: Vec<Vec<u8>>,
    /// Per component, component spec dim -> flat spec dim. For primitives a
    /// single identity entry.
    pub comp_maps: Vec<Vec<u8>>,
    /// Per operand: (component index, parameter index within that component).
    pub sources: Vec<(u8, u8)>,
    /// Per component, where its flat-shape segment starts: free dims for
    /// consumers, the full spec shape for the innermost component.
    pub segment_offsets: Vec<usize>,
}

impl OperandInfo {
    pub fn operand_count(&self) -> usize {
        self.dim_maps.len()
    }

    pub fn output_map(&self) -> &[u8] {
        self.dim_maps.last().unwrap()
    }

    /// True when flat dim `d` appears in the final output's projection.
    pub fn dim_in_output(&self, d: u8) -> bool {
        self.output_map().contains(&d)
    }
}

/// Matmul parameter projections onto its `b x m x k x n` spec shape.
fn matmul_param_map(param: usize) -> &'static [u8] {
    match param {
        0 => &[0, 1, 2],
        1 => &[0, 2, 3],
        2 => &[0, 1, 3],
        _ => unreachable!(),
    }
}

fn prim_param_map(kind: PrimKind, param: usize, rank: usize) -> Vec<u8> {
    match kind {
        PrimKind::Matmul | PrimKind::MatmulAccum => matmul_param_map(param).to_vec(),
        PrimKind::Move | PrimKind::Zero => (0..rank as u8).collect(),
    }
}

pub fn operand_info(kind: &SpecKind, shape_len: usize) -> Result<OperandInfo, SpecError> {
    match kind {
        SpecKind::Prim(k) => {
            let rank = validate_prim_arity(*k, shape_len)?;
            let dim_maps = (0..k.operand_count())
                .map(|p| prim_param_map(*k, p, rank))
                .collect::<Vec<_>>();
            let sources = (0..k.operand_count()).map(|p| (0u8, p as u8)).collect();
            Ok(OperandInfo {
                dim_maps,
                comp_maps: vec![(0..shape_len as u8).collect()],
                sources,
                segment_offsets: vec![0],
            })
        }
        SpecKind::Compose(kinds) => compose_operand_info(kinds, shape_len),
    }
}

fn validate_prim_arity(kind: PrimKind, shape_len: usize) -> Result<usize, SpecError> {
    match kind {
        PrimKind::Matmul | PrimKind::MatmulAccum => {
            if shape_len != 4 {
                return Err(SpecError::ShapeArity {
                    kind: kind.to_string(),
                    expected: "4 (b x m x k x n)".into(),
                    got: shape_len,
                });
            }
            Ok(3)
        }
        PrimKind::Move | PrimKind::Zero => {
            if shape_len == 0 || shape_len > MAX_RANK {
                return Err(SpecError::ShapeArity {
                    kind: kind.to_string(),
                    expected: format!("1..={MAX_RANK}"),
                    got: shape_len,
                });
            }
            Ok(shape_len)
        }
    }
}

fn compose_operand_info(kinds: &[PrimKind], shape_len: usize) -> Result<OperandInfo, SpecError> {
    if kinds.len() < 2 {
        return Err(SpecError::BadCompose(
            "a composition needs at least two components".into(),
        ));
    }
    if kinds.len() > MAX_COMPOSE {
        return Err(SpecError::BadCompose(format!(
            "at most {MAX_COMPOSE} components are supported"
        )));
    }
    for (i, k) in kinds.iter().enumerate() {
        match k {
            PrimKind::Zero => {
                return Err(SpecError::BadCompose(
                    "Zero cannot appear in a composition".into(),
                ))
            }
            PrimKind::MatmulAccum if i != 0 => {
                return Err(SpecError::BadCompose(
                    "an accumulating component may only head a composition".into(),
                ))
            }
            _ => {}
        }
    }

    // Flat shape: each consumer's free dims in component order, then the
    // innermost component's full spec shape.
    let free_total: usize = kinds[..kinds.len() - 1]
        .iter()
        .map(|k| k.free_dims_as_consumer())
        .sum();
    if shape_len <= free_total {
        return Err(SpecError::ShapeArity {
            kind: SpecKind::Compose(kinds.to_vec()).to_string(),
            expected: format!("more than {free_total}"),
            got: shape_len,
        });
    }
    let inner = *kinds.last().unwrap();
    let inner_arity = shape_len - free_total;
    validate_prim_arity(inner, inner_arity)?;

    // Free-dim segment offsets per consumer.
    let mut offsets = Vec::with_capacity(kinds.len());
    let mut at = 0usize;
    for k in &kinds[..kinds.len() - 1] {
        offsets.push(at);
        at += k.free_dims_as_consumer();
    }
    offsets.push(at); // innermost segment

    // Per-component spec-dim maps, innermost first.
    let mut comp_maps: Vec<Vec<u8>> = vec![Vec::new(); kinds.len()];
    comp_maps[kinds.len() - 1] = (free_total..shape_len).map(|d| d as u8).collect();
    for i in (0..kinds.len() - 1).rev() {
        let next = &kinds[i + 1];
        let next_map = &comp_maps[i + 1];
        let next_rank = prim_output_rank(*next, next_map.len());
        let prev_out: Vec<u8> = prim_param_map(
            *next,
            next.operand_count() - 1,
            next_map.len(),
        )
        .iter()
        .map(|&d| next_map[d as usize])
        .collect();
        let map = match kinds[i] {
            PrimKind::Matmul | PrimKind::MatmulAccum => {
                if next_rank != 3 {
                    return Err(SpecError::BadCompose(format!(
                        "component {i} consumes a rank-{next_rank} tensor but matmul needs rank 3"
                    )));
                }
                let mut m = prev_out.clone();
                m.push(offsets[i] as u8);
                m
            }
            PrimKind::Move => prev_out.clone(),
            PrimKind::Zero => unreachable!(),
        };
        comp_maps[i] = map;
    }

    // Operands: consumer extras left to right, then all innermost inputs,
    // then the final output.
    let mut dim_maps = Vec::new();
    let mut sources = Vec::new();
    for (i, k) in kinds.iter().enumerate().take(kinds.len() - 1) {
        for p in 1..k.input_count() {
            dim_maps.push(project(&prim_param_map(*k, p, comp_maps[i].len()), &comp_maps[i]));
            sources.push((i as u8, p as u8));
        }
    }
    let last = kinds.len() - 1;
    for p in 0..inner.input_count() {
        dim_maps.push(project(
            &prim_param_map(inner, p, comp_maps[last].len()),
            &comp_maps[last],
        ));
        sources.push((last as u8, p as u8));
    }
    let out_param = kinds[0].operand_count() - 1;
    dim_maps.push(project(
        &prim_param_map(kinds[0], out_param, comp_maps[0].len()),
        &comp_maps[0],
    ));
    sources.push((0, out_param as u8));

    Ok(OperandInfo {
        dim_maps,
        comp_maps,
        sources,
        segment_offsets: offsets,
    })
}

fn prim_output_rank(kind: PrimKind, arity: usize) -> usize {
    match kind {
        PrimKind::Matmul | PrimKind::MatmulAccum => 3,
        PrimKind::Move | PrimKind::Zero => arity,
    }
}

fn project(param_map: &[u8], comp_map: &[u8]) -> Vec<u8> {
    param_map.iter().map(|&d| comp_map[d as usize]).collect()
}

/// A logical program specification: kind, flat shape, operand tensor specs,
/// serial-only flag, and per-level memory bounds. This is the state the
/// dynamic program searches over.
#[derive(Clone, Debug, Eq, PartialEq, Hash)]
pub struct Spec {
    pub kind: SpecKind,
    pub shape: Vec<u32>,
    pub operands: Vec<TensorSpec>,
    pub serial_only: bool,
    pub limits: MemoryLimits,
}

impl Spec {
    pub fn new(
        kind: SpecKind,
        shape: Vec<u32>,
        operands: Vec<TensorSpec>,
        serial_only: bool,
        limits: MemoryLimits,
    ) -> Result<Spec, SpecError> {
        for &e in &shape {
            if e == 0 || !e.is_power_of_two() {
                return Err(SpecError::NonPowerOfTwoExtent(e));
            }
        }
        let info = operand_info(&kind, shape.len())?;
        if operands.len() != info.operand_count() {
            return Err(SpecError::OperandCount {
                kind: kind.to_string(),
                expected: info.operand_count(),
                got: operands.len(),
            });
        }
        for (i, (ts, map)) in operands.iter().zip(&info.dim_maps).enumerate() {
            let expected: Vec<u32> = map.iter().map(|&d| shape[d as usize]).collect();
            if ts.shape != expected {
                return Err(SpecError::OperandShape {
                    index: i,
                    expected,
                    got: ts.shape.clone(),
                });
            }
        }
        // Slack only matters for specs that can still be split into
        // pipelines.
        let limits = match kind {
            SpecKind::Prim(_) => limits.without_slack(),
            SpecKind::Compose(_) => limits,
        };
        Ok(Spec {
            kind,
            shape,
            operands,
            serial_only,
            limits,
        })
    }

    pub fn operand_info(&self) -> OperandInfo {
        operand_info(&self.kind, self.shape.len()).expect("validated at construction")
    }

    /// Product of the flat shape extents.
    pub fn volume(&self) -> u64 {
        self.shape.iter().map(|&e| u64::from(e)).product()
    }

    /// The output operand is always rightmost.
    pub fn output_index(&self) -> usize {
        self.operands.len() - 1
    }

    pub fn output(&self) -> &TensorSpec {
        self.operands.last().unwrap()
    }

    pub fn with_limits(&self, limits: MemoryLimits) -> Spec {
        let mut s = self.clone();
        s.limits = match s.kind {
            SpecKind::Prim(_) => limits.without_slack(),
            SpecKind::Compose(_) => limits,
        };
        s
    }

    pub fn with_operand_replaced(&self, index: usize, ts: TensorSpec) -> Result<Spec, SpecError> {
        debug_assert_eq!(ts.shape, self.operands[index].shape);
        let mut operands = self.operands.clone();
        operands[index] = ts;
        Spec::new(
            self.kind.clone(),
            self.shape.clone(),
            operands,
            self.serial_only,
            self.limits,
        )
    }

    /// The strictly decreasing measure every rewrite must shrink: composed
    /// length, then the per-level limit budget, then shape volume, then the
    /// distance from the accumulating form.
    pub fn termination_measure(&self) -> (usize, u32, u64, u8) {
        let limit_codes: u32 = self
            .limits
            .available
            .0
            .iter()
            .map(|&b| if b == 0 { 0 } else { b.ilog2() + 1 })
            .sum();
        let accum_distance = match self.kind {
            SpecKind::Prim(PrimKind::Matmul) => 1,
            _ => 0,
        };
        (
            self.kind.compose_len(),
            limit_codes,
            self.volume(),
            accum_distance,
        )
    }
}

impl fmt::Display for Spec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.kind)?;
        for (i, e) in self.shape.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{e}")?;
        }
        for ts in &self.operands {
            write!(f, ", {ts}")?;
        }
        if self.serial_only {
            write!(f, ", serial")?;
        }
        write!(f, ") limits={}", self.limits)
    }
}

/// Convenience constructor used by rewrites for the loads and stores they
/// introduce.
pub fn move_spec(
    src: TensorSpec,
    dst: TensorSpec,
    serial_only: bool,
    limits: MemoryLimits,
) -> Result<Spec, SpecError> {
    let shape = src.shape.clone();
    Spec::new(
        SpecKind::Prim(PrimKind::Move),
        shape,
        vec![src, dst],
        serial_only,
        limits,
    )
}

pub fn zero_spec(
    dst: TensorSpec,
    serial_only: bool,
    limits: MemoryLimits,
) -> Result<Spec, SpecError> {
    let shape = dst.shape.clone();
    Spec::new(
        SpecKind::Prim(PrimKind::Zero),
        shape,
        vec![dst],
        serial_only,
        limits,
    )
}

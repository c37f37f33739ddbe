//! The operand abstraction shared by tensors and tiles: dtype, memory level,
//! layout, alignment, contiguousness, and (for vector registers) the number
//! of values per register.

use crate::layout::{self, Layout, LayoutError};
use crate::target::{MemoryLevel, Target};
use std::fmt;

#[derive(Clone, Copy, Debug, Eq, PartialEq, Ord, PartialOrd, Hash)]
pub enum Dtype {
    U8,
    Bf16,
    F32,
}

impl Dtype {
    #[inline]
    pub fn bytes(self) -> u64 {
        match self {
            Dtype::U8 => 1,
            Dtype::Bf16 => 2,
            Dtype::F32 => 4,
        }
    }

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Dtype::U8 => 0,
            Dtype::Bf16 => 1,
            Dtype::F32 => 2,
        }
    }

    pub fn from_index(idx: usize) -> Option<Dtype> {
        [Dtype::U8, Dtype::Bf16, Dtype::F32].get(idx).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::Bf16 => "bf16",
            Dtype::F32 => "f32",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(thiserror::Error, Debug, Clone, Eq, PartialEq)]
pub enum TensorSpecError {
    #[error("extent {0} is not a power of two")]
    NonPowerOfTwoExtent(u32),
    #[error("{0}")]
    Layout(#[from] LayoutError),
    #[error("vector size is only valid for VRF tensors")]
    VectorSizeOutsideVrf,
    #[error("VRF tensors require a vector size")]
    MissingVectorSize,
    #[error("vector size {vector_size} x {dtype} does not fill a {register_bytes}-byte register")]
    VectorSizeMismatch {
        vector_size: u32,
        dtype: Dtype,
        register_bytes: u64,
    },
    #[error("contiguousness {contig} exceeds physical rank {rank}")]
    ContiguousnessOutOfRange { contig: u8, rank: u8 },
}

#[derive(Clone, Debug, Eq, PartialEq, Hash)]
pub struct TensorSpec {
    pub dtype: Dtype,
    pub shape: Vec<u32>,
    pub level: MemoryLevel,
    pub layout: Layout,
    pub aligned: bool,
    pub contiguousness: u8,
    pub vector_size: Option<u32>,
}

impl TensorSpec {
    /// A spec for a fresh tensor backed by its own buffer: aligned and fully
    /// contiguous.
    pub fn fresh(
        dtype: Dtype,
        shape: Vec<u32>,
        level: MemoryLevel,
        layout: Layout,
        vector_size: Option<u32>,
        target: &Target,
    ) -> Result<TensorSpec, TensorSpecError> {
        let contig = layout.physical_rank();
        TensorSpec::new(dtype, shape, level, layout, true, contig, vector_size, target)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dtype: Dtype,
        shape: Vec<u32>,
        level: MemoryLevel,
        layout: Layout,
        aligned: bool,
        contiguousness: u8,
        vector_size: Option<u32>,
        target: &Target,
    ) -> Result<TensorSpec, TensorSpecError> {
        for &e in &shape {
            if e == 0 || !e.is_power_of_two() {
                return Err(TensorSpecError::NonPowerOfTwoExtent(e));
            }
        }
        layout.check(shape.len() as u8)?;
        if contiguousness > layout.physical_rank() {
            return Err(TensorSpecError::ContiguousnessOutOfRange {
                contig: contiguousness,
                rank: layout.physical_rank(),
            });
        }
        match (level.is_vector_rf(), vector_size) {
            (false, Some(_)) => return Err(TensorSpecError::VectorSizeOutsideVrf),
            (true, None) => return Err(TensorSpecError::MissingVectorSize),
            (true, Some(v)) => {
                if u64::from(v) * dtype.bytes() != target.vector_register_bytes {
                    return Err(TensorSpecError::VectorSizeMismatch {
                        vector_size: v,
                        dtype,
                        register_bytes: target.vector_register_bytes,
                    });
                }
            }
            (false, None) => {}
        }
        Ok(TensorSpec {
            dtype,
            shape,
            level,
            contiguousness: contiguousness.min(layout.physical_rank()),
            layout,
            aligned,
            vector_size,
        })
    }

    pub fn rank(&self) -> u8 {
        self.shape.len() as u8
    }

    pub fn volume(&self) -> u64 {
        self.shape.iter().map(|&e| u64::from(e)).product()
    }

    /// Bytes of payload: volume times the dtype width.
    pub fn bytes(&self) -> u64 {
        self.volume() * self.dtype.bytes()
    }

    /// Bytes a fresh buffer with this spec reserves. Vector register
    /// allocations are register-granular: a one-value VRF tensor still pins a
    /// whole register.
    pub fn allocated_bytes(&self, target: &Target) -> u64 {
        match self.vector_size {
            Some(v) => self.volume().div_ceil(u64::from(v)) * target.vector_register_bytes,
            None => self.bytes(),
        }
    }

    pub fn is_fully_contiguous(&self) -> bool {
        self.contiguousness >= self.layout.physical_rank()
    }

    /// The number of whole vector registers backing a VRF tensor.
    pub fn vector_count(&self) -> Option<u64> {
        self.vector_size
            .map(|v| self.volume().div_ceil(u64::from(v)))
    }

    pub fn cache_lines(&self, target: &Target) -> u64 {
        layout::cache_lines(
            &self.shape,
            &self.layout,
            self.contiguousness,
            self.dtype.bytes(),
            target.line_size,
        )
    }

    /// The spec of a tile of this tensor: same dtype, level, and layout, with
    /// alignment and contiguousness re-derived by the transfer analysis.
    pub fn tile(&self, tile_shape: &[u32], target: &Target) -> Result<TensorSpec, LayoutError> {
        let analysis = layout::tile_transfer(
            &self.shape,
            &self.layout,
            self.aligned,
            self.contiguousness,
            tile_shape,
            self.dtype.bytes(),
            target.line_size,
        )?;
        Ok(TensorSpec {
            dtype: self.dtype,
            shape: tile_shape.to_vec(),
            level: self.level,
            layout: self.layout.clone(),
            aligned: analysis.aligned,
            contiguousness: analysis.contiguousness,
            vector_size: self.vector_size,
        })
    }
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}", self.dtype, self.level, self.layout)?;
        if !self.aligned {
            write!(f, ", ua")?;
        }
        if !self.is_fully_contiguous() {
            write!(f, ", c{}", self.contiguousness)?;
        }
        if let Some(v) = self.vector_size {
            write!(f, ", v{v}")?;
        }
        write!(f, ")")
    }
}

//! The modeled machine: a four-level memory hierarchy plus the constants
//! consumed by the cost model.
//!
//! Levels are ordered fastest to slowest: scalar register file (`RF`), vector
//! register file (`VRF`), L1 cache (`L1`), and global memory (`GL`). `RF` and
//! `VRF` are software-managed: placing data there requires emitting actual
//! loads and stores. `L1` and `GL` are hardware-managed: an allocation there
//! only models cache residency and emits no copy code (unless the layout or
//! dtype changes).

use serde::Deserialize;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub const LEVEL_COUNT: usize = 4;

#[allow(clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, Eq, PartialEq, Ord, PartialOrd, Hash)]
pub enum MemoryLevel {
    RF,
    VRF,
    L1,
    GL,
}

pub const LEVELS: [MemoryLevel; LEVEL_COUNT] = [
    MemoryLevel::RF,
    MemoryLevel::VRF,
    MemoryLevel::L1,
    MemoryLevel::GL,
];

impl MemoryLevel {
    #[inline]
    pub fn index(self) -> usize {
        match self {
            MemoryLevel::RF => 0,
            MemoryLevel::VRF => 1,
            MemoryLevel::L1 => 2,
            MemoryLevel::GL => 3,
        }
    }

    pub fn from_index(idx: usize) -> Option<MemoryLevel> {
        LEVELS.get(idx).copied()
    }

    /// True when data at this level only exists because the generated code
    /// put it there (registers), as opposed to a hardware cache.
    #[inline]
    pub fn is_software_managed(self) -> bool {
        matches!(self, MemoryLevel::RF | MemoryLevel::VRF)
    }

    #[inline]
    pub fn is_vector_rf(self) -> bool {
        self == MemoryLevel::VRF
    }

    pub fn name(self) -> &'static str {
        match self {
            MemoryLevel::RF => "RF",
            MemoryLevel::VRF => "VRF",
            MemoryLevel::L1 => "L1",
            MemoryLevel::GL => "GL",
        }
    }

    /// Levels a tensor at this level may be moved to: the level itself (a
    /// relayout or cache pin) or the next faster tier. Longer hops compose
    /// from single steps.
    pub fn move_destinations(self) -> &'static [MemoryLevel] {
        match self {
            MemoryLevel::RF => &[MemoryLevel::RF],
            MemoryLevel::VRF => &[MemoryLevel::VRF],
            MemoryLevel::L1 => &[MemoryLevel::RF, MemoryLevel::VRF, MemoryLevel::L1],
            MemoryLevel::GL => &[MemoryLevel::L1, MemoryLevel::GL],
        }
    }
}

impl fmt::Display for MemoryLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MemoryLevel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "RF" => Ok(MemoryLevel::RF),
            "VRF" => Ok(MemoryLevel::VRF),
            "L1" => Ok(MemoryLevel::L1),
            "GL" => Ok(MemoryLevel::GL),
            _ => Err(()),
        }
    }
}

/// How the contiguity factor in the move-cost formula is applied.
///
/// `PenalizeNonContiguous` doubles the cost of moving tensors that are not
/// fully contiguous. `Verbatim` doubles the cost of fully contiguous tensors
/// instead, which matches the factor `[t is contiguous] + 1` written the other
/// way; it is kept selectable for comparison runs.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Default)]
pub enum CostBracket {
    #[default]
    PenalizeNonContiguous,
    Verbatim,
}

impl FromStr for CostBracket {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "default" => Ok(CostBracket::PenalizeNonContiguous),
            "verbatim" => Ok(CostBracket::Verbatim),
            _ => Err(()),
        }
    }
}

/// Per-kernel unit costs, in model cycles. A kernel application that writes
/// several vector registers costs `unit * registers_written`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KernelCosts {
    pub mult_add: u32,
    pub broadcast_vec_mult_add: u32,
    pub scalar_move: u32,
    pub vector_move: u32,
    pub cast_move_bf16_f32: u32,
    pub scalar_zero: u32,
    pub vector_zero: u32,
}

impl Default for KernelCosts {
    fn default() -> Self {
        KernelCosts {
            mult_add: 1,
            broadcast_vec_mult_add: 1,
            scalar_move: 1,
            vector_move: 1,
            cast_move_bf16_f32: 1,
            scalar_zero: 1,
            vector_zero: 1,
        }
    }
}

/// The full machine description. All cost constants are in abstract "model
/// cycles"; they ship as defaults and can be overridden from a config file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Target {
    /// Capacity in bytes per level, fastest first. Each is 0 or a power of two.
    pub capacities: [u64; LEVEL_COUNT],
    /// Cache line size in bytes.
    pub line_size: u64,
    /// Width of one vector register in bytes.
    pub vector_register_bytes: u64,
    /// Parallelism factor applied to parallel loops.
    pub threads: u32,
    /// Constant synchronization cost added to each parallel loop.
    pub sync_cost: u32,
    /// Per-level move-cost weight (speed of the level), fastest first.
    pub level_weights: [u32; LEVEL_COUNT],
    pub kernel_costs: KernelCosts,
    pub cost_bracket: CostBracket,
}

impl Default for Target {
    fn default() -> Self {
        Target {
            capacities: [64, 1024, 32_768, 1_073_741_824],
            line_size: 64,
            vector_register_bytes: 32,
            threads: 8,
            sync_cost: 1000,
            level_weights: [1, 1, 4, 100],
            kernel_costs: KernelCosts::default(),
            cost_bracket: CostBracket::default(),
        }
    }
}

#[derive(thiserror::Error, Debug)]
pub enum TargetConfigError {
    #[error("failed to read target config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse target config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid target config: {0}")]
    Invalid(String),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    line_size: Option<u64>,
    vector_register_bytes: Option<u64>,
    threads: Option<u32>,
    sync_cost: Option<u32>,
    capacities: Option<RawLevels>,
    weights: Option<RawLevels>,
    kernel_costs: Option<RawKernelCosts>,
    cost_bracket: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawLevels {
    #[serde(rename = "RF")]
    rf: Option<u64>,
    #[serde(rename = "VRF")]
    vrf: Option<u64>,
    #[serde(rename = "L1")]
    l1: Option<u64>,
    #[serde(rename = "GL")]
    gl: Option<u64>,
}

impl RawLevels {
    fn get(&self, level: MemoryLevel) -> Option<u64> {
        match level {
            MemoryLevel::RF => self.rf,
            MemoryLevel::VRF => self.vrf,
            MemoryLevel::L1 => self.l1,
            MemoryLevel::GL => self.gl,
        }
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawKernelCosts {
    mult_add: Option<u32>,
    broadcast_vec_mult_add: Option<u32>,
    scalar_move: Option<u32>,
    vector_move: Option<u32>,
    cast_move_bf16_f32: Option<u32>,
    scalar_zero: Option<u32>,
    vector_zero: Option<u32>,
}

impl Target {
    /// Loads a target description from a TOML file, filling unspecified
    /// fields from the defaults.
    pub fn from_config_file(path: &Path) -> Result<Target, TargetConfigError> {
        let text = std::fs::read_to_string(path)?;
        Target::from_config_str(&text)
    }

    pub fn from_config_str(text: &str) -> Result<Target, TargetConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        let mut target = Target::default();
        if let Some(v) = raw.line_size {
            target.line_size = v;
        }
        if let Some(v) = raw.vector_register_bytes {
            target.vector_register_bytes = v;
        }
        if let Some(v) = raw.threads {
            target.threads = v;
        }
        if let Some(v) = raw.sync_cost {
            target.sync_cost = v;
        }
        if let Some(caps) = &raw.capacities {
            for level in LEVELS {
                if let Some(v) = caps.get(level) {
                    target.capacities[level.index()] = v;
                }
            }
        }
        if let Some(ws) = &raw.weights {
            for level in LEVELS {
                if let Some(v) = ws.get(level) {
                    target.level_weights[level.index()] =
                        u32::try_from(v).map_err(|_| {
                            TargetConfigError::Invalid(format!("weight for {level} too large"))
                        })?;
                }
            }
        }
        if let Some(kc) = &raw.kernel_costs {
            let d = &mut target.kernel_costs;
            if let Some(v) = kc.mult_add {
                d.mult_add = v;
            }
            if let Some(v) = kc.broadcast_vec_mult_add {
                d.broadcast_vec_mult_add = v;
            }
            if let Some(v) = kc.scalar_move {
                d.scalar_move = v;
            }
            if let Some(v) = kc.vector_move {
                d.vector_move = v;
            }
            if let Some(v) = kc.cast_move_bf16_f32 {
                d.cast_move_bf16_f32 = v;
            }
            if let Some(v) = kc.scalar_zero {
                d.scalar_zero = v;
            }
            if let Some(v) = kc.vector_zero {
                d.vector_zero = v;
            }
        }
        if let Some(b) = &raw.cost_bracket {
            target.cost_bracket = b
                .parse()
                .map_err(|()| TargetConfigError::Invalid(format!("unknown cost_bracket {b:?}")))?;
        }
        target.validate()?;
        Ok(target)
    }

    fn validate(&self) -> Result<(), TargetConfigError> {
        if self.threads == 0 {
            return Err(TargetConfigError::Invalid("threads must be >= 1".into()));
        }
        if !self.line_size.is_power_of_two() {
            return Err(TargetConfigError::Invalid(
                "line_size must be a power of two".into(),
            ));
        }
        if !self.vector_register_bytes.is_power_of_two() {
            return Err(TargetConfigError::Invalid(
                "vector_register_bytes must be a power of two".into(),
            ));
        }
        for (i, &cap) in self.capacities.iter().enumerate() {
            if cap != 0 && !cap.is_power_of_two() {
                return Err(TargetConfigError::Invalid(format!(
                    "capacity for {} must be 0 or a power of two",
                    LEVELS[i]
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn weight(&self, level: MemoryLevel) -> u32 {
        self.level_weights[level.index()]
    }

    #[inline]
    pub fn capacity(&self, level: MemoryLevel) -> u64 {
        self.capacities[level.index()]
    }
}

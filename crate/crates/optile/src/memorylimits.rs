//! Per-level peak-memory bounds carried by every spec, and the snapping rule
//! applied when a rewrite allocates a buffer.

use crate::target::{MemoryLevel, LEVEL_COUNT, LEVELS};
use std::fmt;
use std::ops::{Index, IndexMut};

/// Bytes per memory level, fastest level first.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash, Default)]
pub struct MemVec(pub [u64; LEVEL_COUNT]);

impl MemVec {
    pub fn zero() -> MemVec {
        MemVec([0; LEVEL_COUNT])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| b == 0)
    }

    pub fn sum(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn saturating_add(&self, other: &MemVec) -> MemVec {
        let mut out = *self;
        for i in 0..LEVEL_COUNT {
            out.0[i] = out.0[i].saturating_add(other.0[i]);
        }
        out
    }

    pub fn max_per_level(&self, other: &MemVec) -> MemVec {
        let mut out = *self;
        for i in 0..LEVEL_COUNT {
            out.0[i] = out.0[i].max(other.0[i]);
        }
        out
    }

    /// True when every level of `self` is at most the same level of `other`.
    pub fn fits_within(&self, other: &MemVec) -> bool {
        (0..LEVEL_COUNT).all(|i| self.0[i] <= other.0[i])
    }
}

impl Index<MemoryLevel> for MemVec {
    type Output = u64;
    fn index(&self, level: MemoryLevel) -> &u64 {
        &self.0[level.index()]
    }
}

impl IndexMut<MemoryLevel> for MemVec {
    fn index_mut(&mut self, level: MemoryLevel) -> &mut u64 {
        &mut self.0[level.index()]
    }
}

impl fmt::Display for MemVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{b}")?;
        }
        write!(f, "]")
    }
}

/// Which part of a pipeline stage does not overlap the enclosing
/// intermediate's lifetime, and so may reclaim its bytes.
///
/// A stage that produces an intermediate only touches it while writing its
/// final output, so the early part (the producer of a nested split) is free
/// of it. A stage that consumes an intermediate reads it first, so the late
/// part (the consumer of a nested split) is free of it.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash)]
pub enum SlackSide {
    ProducerPrefix,
    ConsumerSuffix,
}

/// Bytes reclaimable by a nested pipeline split, attached to the stage spec
/// whose lifetime does not fully overlap the enclosing intermediate buffer.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash)]
pub struct PipelineSlack {
    pub side: SlackSide,
    pub bytes: MemVec,
}

/// Available bytes per level. Each standard limit is 0 or a power of two;
/// the optional slack records memory a nested pipeline stage may reclaim.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash)]
pub struct MemoryLimits {
    pub available: MemVec,
    pub slack: Option<PipelineSlack>,
}

#[derive(thiserror::Error, Debug, Clone, Eq, PartialEq)]
#[error("allocation of {requested} bytes exceeds the {level} limit of {available}")]
pub struct LimitExceeded {
    pub level: MemoryLevel,
    pub requested: u64,
    pub available: u64,
}

/// Largest power of two at most `x`, or 0.
pub fn snap_down(x: u64) -> u64 {
    if x == 0 {
        0
    } else {
        1 << (63 - x.leading_zeros())
    }
}

impl MemoryLimits {
    pub fn new(available: MemVec) -> MemoryLimits {
        debug_assert!(available
            .0
            .iter()
            .all(|&b| b == 0 || b.is_power_of_two()));
        MemoryLimits {
            available,
            slack: None,
        }
    }

    /// The target's full capacities, the default when a spec names no limits.
    pub fn from_capacities(capacities: &[u64; LEVEL_COUNT]) -> MemoryLimits {
        MemoryLimits::new(MemVec(*capacities))
    }

    /// Subtracts an allocation per level and snaps each remaining limit down
    /// to a power of two (or zero). Fails if any allocation exceeds its limit.
    pub fn tighten(&self, allocated: &MemVec) -> Result<MemoryLimits, LimitExceeded> {
        let mut out = self.available;
        for level in LEVELS {
            let a = allocated[level];
            if a == 0 {
                continue;
            }
            let avail = out[level];
            if a > avail {
                return Err(LimitExceeded {
                    level,
                    requested: a,
                    available: avail,
                });
            }
            out[level] = snap_down(avail - a);
        }
        Ok(MemoryLimits {
            available: out,
            slack: self.slack,
        })
    }

    /// Like [MemoryLimits::tighten], but first adds reclaimed slack bytes to
    /// the available budget. Used for the pipeline stage that does not overlap
    /// the enclosing intermediate's lifetime. The result is snapped per level.
    pub fn tighten_with_slack(
        &self,
        reclaimed: &MemVec,
        allocated: &MemVec,
    ) -> Result<MemoryLimits, LimitExceeded> {
        let mut out = MemVec::zero();
        for level in LEVELS {
            let avail = self.available[level].saturating_add(reclaimed[level]);
            let a = allocated[level];
            if a > avail {
                return Err(LimitExceeded {
                    level,
                    requested: a,
                    available: avail,
                });
            }
            out[level] = snap_down(avail - a);
        }
        Ok(MemoryLimits {
            available: out,
            slack: self.slack,
        })
    }

    pub fn with_slack(mut self, slack: Option<PipelineSlack>) -> MemoryLimits {
        self.slack = slack;
        self
    }

    /// Drops slack. Only composed specs can be split into pipelines, so slack
    /// is meaningless on primitives and is erased when they are formed.
    pub fn without_slack(mut self) -> MemoryLimits {
        self.slack = None;
        self
    }
}

impl fmt::Display for MemoryLimits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.available)
    }
}

//! Routing a native-resolution image to a branch.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::resample::resize_bilinear;

/// Statistic of `(W, H)` used as the resolution indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Indicator {
    Min,
    Max,
    Avg,
}

/// Rounding of the indicator onto the branch set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    Floor,
    Near,
    Ceil,
}

impl Indicator {
    pub const ALL: [Indicator; 3] = [Indicator::Min, Indicator::Max, Indicator::Avg];

    pub fn name(self) -> &'static str {
        match self {
            Indicator::Min => "min",
            Indicator::Max => "max",
            Indicator::Avg => "avg",
        }
    }
}

impl Allocation {
    pub const ALL: [Allocation; 3] = [Allocation::Floor, Allocation::Near, Allocation::Ceil];

    pub fn name(self) -> &'static str {
        match self {
            Allocation::Floor => "floor",
            Allocation::Near => "near",
            Allocation::Ceil => "ceil",
        }
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Allocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Indicator::ALL.into_iter().find(|i| i.name() == s).ok_or_else(|| invalid!("unknown indicator {s:?} (min, max, avg)"))
    }
}

impl FromStr for Allocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Allocation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| invalid!("unknown allocation {s:?} (floor, near, ceil)"))
    }
}

/// Indicator, allocation and the ascending set of branch resolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    pub indicator: Indicator,
    pub allocation: Allocation,
    pub branch_set: Vec<usize>,
}

impl SelectionPolicy {
    pub fn new(indicator: Indicator, allocation: Allocation, branch_set: Vec<usize>) -> Result<Self> {
        let p = Self { indicator, allocation, branch_set };
        p.validate()?;
        Ok(p)
    }

    /// `max + ceil` over `branch_set`.
    pub fn default_for(branch_set: Vec<usize>) -> Result<Self> {
        Self::new(Indicator::Max, Allocation::Ceil, branch_set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_set.is_empty() {
            return Err(invalid!("branch set is empty"));
        }
        if self.branch_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!("branch set {:?} is not strictly ascending", self.branch_set));
        }
        Ok(())
    }

    /// Branch for an `h x w` native image.
    pub fn select(&self, h: usize, w: usize) -> Result<usize> {
        allocate(resolution_indicator(h, w, self.indicator)?, self)
    }
}

pub fn resolution_indicator(h: usize, w: usize, mode: Indicator) -> Result<f64> {
    if h == 0 || w == 0 {
        return Err(invalid!("image sides must be at least 1, got {h}x{w}"));
    }
    let (h, w) = (h as f64, w as f64);
    Ok(match mode {
        Indicator::Min => h.min(w),
        Indicator::Max => h.max(w),
        Indicator::Avg => (h + w) / 2.0,
    })
}

/// Maps an indicator onto the branch set. Out-of-range indicators fall back
/// to the nearest end; `near` ties go to the larger branch.
pub fn allocate(indicator: f64, policy: &SelectionPolicy) -> Result<usize> {
    policy.validate()?;
    let set = &policy.branch_set;
    let (lo, hi) = (set[0], set[set.len() - 1]);
    Ok(match policy.allocation {
        Allocation::Floor => set.iter().rev().copied().find(|&b| b as f64 <= indicator).unwrap_or(lo),
        Allocation::Ceil => set.iter().copied().find(|&b| b as f64 >= indicator).unwrap_or(hi),
        Allocation::Near => {
            let mut best = lo;
            for &b in set {
                if (b as f64 - indicator).abs() <= (best as f64 - indicator).abs() {
                    best = b;
                }
            }
            best
        }
    })
}

/// Resizes the native image to the branch's square input.
pub fn prepare_input(img: &Image, branch_r: usize) -> Result<Image> {
    if img.height() == branch_r && img.width() == branch_r {
        return Ok(img.clone());
    }
    resize_bilinear(img, branch_r, branch_r)
}

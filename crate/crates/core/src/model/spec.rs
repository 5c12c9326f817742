use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::conv_out_size;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub blocks: usize,
    /// Stride of the first block; 2 halves the spatial size.
    pub stride: usize,
}

/// Architecture of a residual trunk and the resolutions that get branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub canonical_size: usize,
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub embedding_dim: usize,
    /// Strictly ascending; each must be a trunk feature-map size.
    pub branch_resolutions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    Stem,
    Residual,
}

/// One trunk unit: the stem or a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitSpec {
    pub kind: UnitKind,
    /// 0 is the stem; residual stages count from 1.
    pub stage: usize,
    pub block: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_size: usize,
    pub out_size: usize,
    /// 1x1 shortcut convolution; fixed by the trunk unit so same-resolution
    /// copies keep it.
    pub projection: bool,
}

impl UnitSpec {
    pub fn has_projection(&self) -> bool {
        self.projection
    }

    /// `(out, in, kernel, stride)` for every convolution, in parameter order.
    pub fn convs(&self) -> Vec<(usize, usize, usize, usize)> {
        match self.kind {
            UnitKind::Stem => vec![(self.out_channels, self.in_channels, self.kernel, self.stride)],
            UnitKind::Residual => {
                let mut v = vec![
                    (self.out_channels, self.in_channels, 3, self.stride),
                    (self.out_channels, self.out_channels, 3, 1),
                ];
                if self.has_projection() {
                    v.push((self.out_channels, self.in_channels, 1, self.stride));
                }
                v
            }
        }
    }

    /// The same unit with every stride set to 1, as used inside a branch.
    pub fn same_resolution(&self, size: usize) -> UnitSpec {
        UnitSpec { stride: 1, in_size: size, out_size: size, ..*self }
    }
}

/// Where a branch output is implanted into the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapPoint {
    pub resolution: usize,
    /// Index into [`ModelSpec::units`].
    pub unit: usize,
    pub stage: usize,
    pub block: usize,
    pub channels: usize,
}

impl ModelSpec {
    /// Desk-scale trunk: 32x32 input, a stride-1 stem and three
    /// down-sampling stages, branches at 32/16/8/4.
    pub fn desk() -> Self {
        Self {
            canonical_size: 32,
            in_channels: 3,
            stem: StemSpec { channels: 16, kernel: 3, stride: 1 },
            stages: vec![
                StageSpec { out_channels: 32, blocks: 2, stride: 2 },
                StageSpec { out_channels: 64, blocks: 2, stride: 2 },
                StageSpec { out_channels: 128, blocks: 2, stride: 2 },
            ],
            embedding_dim: 64,
            branch_resolutions: vec![4, 8, 16, 32],
        }
    }

    /// The same layout at half width; used for the training experiments.
    pub fn desk_compact() -> Self {
        let mut s = Self::desk();
        s.stem.channels /= 2;
        s.stages.iter_mut().for_each(|st| st.out_channels /= 2);
        s
    }

    /// 112x112 input with four down-sampling stages, branches at
    /// 112/56/28/14/7 (a reduced-depth stand-in for a ResNet-50 layout).
    pub fn paper_scale() -> Self {
        Self {
            canonical_size: 112,
            in_channels: 3,
            stem: StemSpec { channels: 64, kernel: 3, stride: 1 },
            stages: vec![
                StageSpec { out_channels: 64, blocks: 3, stride: 2 },
                StageSpec { out_channels: 128, blocks: 4, stride: 2 },
                StageSpec { out_channels: 256, blocks: 6, stride: 2 },
                StageSpec { out_channels: 512, blocks: 3, stride: 2 },
            ],
            embedding_dim: 512,
            branch_resolutions: vec![7, 14, 28, 56, 112],
        }
    }

    pub const PRESETS: [&'static str; 3] = ["desk", "desk_compact", "paper_scale"];

    /// A preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "desk_compact" => Ok(Self::desk_compact()),
            "paper_scale" => Ok(Self::paper_scale()),
            other => Err(invalid!("unknown model preset {other:?} (desk, desk_compact, paper_scale)")),
        }
    }

    /// Flattened trunk units with their spatial sizes.
    pub fn units(&self) -> Result<Vec<UnitSpec>> {
        if self.stem.stride == 0 || self.stem.kernel.is_multiple_of(2) {
            return Err(invalid!("stem needs an odd kernel and positive stride"));
        }
        let s0 = conv_out_size(self.canonical_size, self.stem.kernel, self.stem.stride, self.stem.kernel / 2)
            .ok_or_else(|| invalid!("stem output is empty"))?;
        let mut units = vec![UnitSpec {
            kind: UnitKind::Stem,
            stage: 0,
            block: 0,
            in_channels: self.in_channels,
            out_channels: self.stem.channels,
            kernel: self.stem.kernel,
            stride: self.stem.stride,
            in_size: self.canonical_size,
            out_size: s0,
            projection: false,
        }];
        let (mut size, mut ch) = (s0, self.stem.channels);
        for (si, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || !(1..=2).contains(&st.stride) {
                return Err(invalid!("stage {} needs at least one block and stride 1 or 2", si + 1));
            }
            for b in 0..st.blocks {
                let stride = if b == 0 { st.stride } else { 1 };
                let out = conv_out_size(size, 3, stride, 1).ok_or_else(|| invalid!("stage {} collapses to zero size", si + 1))?;
                units.push(UnitSpec {
                    kind: UnitKind::Residual,
                    stage: si + 1,
                    block: b,
                    in_channels: ch,
                    out_channels: st.out_channels,
                    kernel: 3,
                    stride,
                    in_size: size,
                    out_size: out,
                    projection: stride != 1 || ch != st.out_channels,
                });
                size = out;
                ch = st.out_channels;
            }
        }
        Ok(units)
    }

    /// Spatial size and channel count of the final feature map.
    pub fn final_shape(&self) -> Result<(usize, usize)> {
        let u = *self.units()?.last().expect("stem always present");
        Ok((u.out_size, u.out_channels))
    }

    /// The first unit producing each branch resolution.
    pub fn tap_points(&self) -> Result<BTreeMap<usize, TapPoint>> {
        let units = self.units()?;
        let mut taps = BTreeMap::new();
        for &r in &self.branch_resolutions {
            let (i, u) = units
                .iter()
                .enumerate()
                .find(|(_, u)| u.out_size == r)
                .ok_or(Error::UnsupportedResolution(r))?;
            taps.insert(r, TapPoint { resolution: r, unit: i, stage: u.stage, block: u.block, channels: u.out_channels });
        }
        Ok(taps)
    }

    pub fn tap(&self, r: usize) -> Result<TapPoint> {
        self.tap_points()?.remove(&r).ok_or(Error::UnsupportedResolution(r))
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embedding_dim == 0 || self.stem.channels == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        if self.branch_resolutions.is_empty() {
            return Err(invalid!("at least one branch resolution is required"));
        }
        if self.branch_resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!("branch resolutions must be strictly ascending"));
        }
        if *self.branch_resolutions.last().unwrap() != self.canonical_size {
            return Err(invalid!("the largest branch must be the canonical size {}", self.canonical_size));
        }
        // consecutive halvings S, S/2, S/4, ...
        for w in self.branch_resolutions.windows(2) {
            if w[0] * 2 != w[1] {
                return Err(invalid!("branch resolutions must be consecutive halvings, got {:?}", self.branch_resolutions));
            }
        }
        self.tap_points()?;
        Ok(())
    }

    pub fn supports(&self, r: usize) -> bool {
        self.branch_resolutions.contains(&r)
    }
}

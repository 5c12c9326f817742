//! Parameter-storage and FLOP accounting.
//!
//! A FLOP is counted as 2 per multiply-add. Batch norm costs 2 per output
//! element (folded scale and shift), ReLU and residual addition 1 each, and
//! the final normalization 3 per embedding component.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::branch::BTNetModel;
use crate::model::layers::UnitBns;
use crate::model::spec::{ModelSpec, UnitKind, UnitSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// Everything a fully fine-tuned copy of the backbone stores.
    FullFinetune,
    /// The branch plus every BN layer on the resolution's path.
    BranchPlusBn,
}

/// Storage of one resolution's path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub resolution: usize,
    pub branch_weights: usize,
    pub branch_bn: usize,
    /// The resolution's BN bank inside the trunk.
    pub trunk_bn: usize,
    /// Conv and linear weights of the trunk after the tap, shared by all
    /// resolutions.
    pub shared_weights: usize,
    pub full_finetune: usize,
}

impl ParamBreakdown {
    pub fn branch_plus_bn(&self) -> usize {
        self.branch_weights + self.branch_bn + self.trunk_bn
    }

    pub fn fraction(&self) -> f64 {
        self.branch_plus_bn() as f64 / self.full_finetune as f64
    }
}

/// `cout * cin * k * k`, plus `cout` with a bias.
pub fn conv_params(cout: usize, cin: usize, k: usize, bias: bool) -> usize {
    cout * cin * k * k + if bias { cout } else { 0 }
}

fn bn_values(bank: &[UnitBns]) -> usize {
    bank.iter().flatten().map(|b| b.stored_values()).sum()
}

pub fn param_breakdown(model: &BTNetModel, r: usize) -> Result<ParamBreakdown> {
    let trunk = &model.trunk;
    let branch = model.branch(r)?;
    let conv_total = |convs: &[Vec<crate::model::layers::Conv>]| -> usize {
        convs.iter().flatten().map(|c| c.param_count()).sum()
    };
    let (start, bank) = trunk.bank(r)?;
    let fc = trunk.fc.param_count();
    Ok(ParamBreakdown {
        resolution: r,
        branch_weights: conv_total(&branch.convs),
        branch_bn: bn_values(&branch.bns),
        trunk_bn: bn_values(bank),
        shared_weights: conv_total(&trunk.convs[start..]) + fc,
        full_finetune: conv_total(&trunk.convs) + bn_values(&trunk.bns) + fc,
    })
}

/// Stored values per branch resolution under `mode`.
pub fn count_params(model: &BTNetModel, mode: ParamMode) -> Result<BTreeMap<usize, usize>> {
    model
        .branches
        .keys()
        .map(|&r| {
            let b = param_breakdown(model, r)?;
            Ok((r, match mode {
                ParamMode::FullFinetune => b.full_finetune,
                ParamMode::BranchPlusBn => b.branch_plus_bn(),
            }))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    Add,
    Linear,
    Normalize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
}

pub fn conv_flops(cout: usize, cin: usize, k: usize, hout: usize, wout: usize) -> u64 {
    2 * (k * k * cin * cout * hout * wout) as u64
}

pub fn linear_flops(fin: usize, fout: usize) -> u64 {
    2 * (fin * fout) as u64
}

fn unit_layers(prefix: &str, i: usize, u: &UnitSpec, out: &mut Vec<LayerFlops>) {
    let area = u.out_size * u.out_size;
    let elems = (u.out_channels * area) as u64;
    let mut push = |name: String, kind, flops| out.push(LayerFlops { name, kind, flops });
    for (j, (co, ci, k, _)) in u.convs().into_iter().enumerate() {
        push(format!("{prefix}.u{i}.conv{j}"), LayerKind::Conv, conv_flops(co, ci, k, u.out_size, u.out_size));
        push(format!("{prefix}.u{i}.bn{j}"), LayerKind::BatchNorm, 2 * elems);
        if j == 0 {
            push(format!("{prefix}.u{i}.relu0"), LayerKind::Relu, elems);
        }
    }
    if u.kind == UnitKind::Residual {
        push(format!("{prefix}.u{i}.add"), LayerKind::Add, elems);
        push(format!("{prefix}.u{i}.relu1"), LayerKind::Relu, elems);
    }
}

/// Per-layer FLOPs of the `B_r` then `T_r` path for one `r x r` input.
pub fn flop_layers(spec: &ModelSpec, r: usize) -> Result<Vec<LayerFlops>> {
    if !spec.supports(r) {
        return Err(crate::error::Error::UnsupportedResolution(r));
    }
    let tap = spec.tap(r)?;
    let units = spec.units()?;
    let mut out = Vec::new();
    for (i, u) in units[..=tap.unit].iter().enumerate() {
        unit_layers(&format!("branch{r}"), i, &u.same_resolution(r), &mut out);
    }
    for (i, u) in units.iter().enumerate().skip(tap.unit + 1) {
        unit_layers("trunk", i, u, &mut out);
    }
    let (fs, fc) = spec.final_shape()?;
    out.push(LayerFlops { name: "trunk.fc".into(), kind: LayerKind::Linear, flops: linear_flops(fc * fs * fs, spec.embedding_dim) });
    out.push(LayerFlops { name: "trunk.normalize".into(), kind: LayerKind::Normalize, flops: 3 * spec.embedding_dim as u64 });
    Ok(out)
}

pub fn count_flops(model: &BTNetModel, r: usize) -> Result<u64> {
    model.branch(r)?;
    Ok(flop_layers(model.spec(), r)?.iter().map(|l| l.flops).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_arithmetic() {
        assert_eq!(conv_params(8, 3, 3, true), 224);
        assert_eq!(conv_flops(1, 1, 1, 4, 4), 32);
    }
}

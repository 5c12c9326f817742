//! Parameter containers and the shared unit forward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::graph::{BnMode, Graph, Var};
use crate::model::spec::UnitSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv {
    pub fn he<R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Tensor::he_normal(&[cout, cin, k, k], cin * k * k, rng),
            bias: bias.then(|| Tensor::zeros(&[cout])),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// Input resolution this copy belongs to.
    pub resolution: usize,
}

impl BnParams {
    pub fn new(channels: usize, resolution: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            resolution,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Stored values: gamma, beta, running mean and running variance.
    pub fn stored_values(&self) -> usize {
        4 * self.channels()
    }

    pub fn retagged(&self, resolution: usize) -> Self {
        Self { resolution, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn he<R: Rng + ?Sized>(fout: usize, fin: usize, rng: &mut R) -> Self {
        Self { weight: Tensor::he_normal(&[fout, fin], fin, rng), bias: Tensor::zeros(&[fout]) }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// Convolutions of one unit, in [`UnitSpec::convs`] order.
pub type UnitConvs = Vec<Conv>;
/// Batch norms of one unit, one per convolution.
pub type UnitBns = Vec<BnParams>;

pub(crate) fn init_unit_convs<R: Rng + ?Sized>(u: &UnitSpec, rng: &mut R) -> UnitConvs {
    u.convs().into_iter().map(|(co, ci, k, _)| Conv::he(co, ci, k, false, rng)).collect()
}

pub(crate) fn init_unit_bns(u: &UnitSpec, resolution: usize) -> UnitBns {
    u.convs().into_iter().map(|(co, ..)| BnParams::new(co, resolution)).collect()
}

/// Decides which parameters get gradients and remembers their graph nodes.
pub struct Binder<'a> {
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self { trainable: Box::new(trainable), bound: HashMap::new() }
    }

    /// Nothing is trainable.
    pub fn frozen() -> Self {
        Self::new(|_| false)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        (self.trainable)(name)
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str, t: &Tensor) -> Result<Var> {
        let trainable = self.is_trainable(name);
        let v = g.param(t, trainable)?;
        if trainable {
            self.bound.insert(name.to_string(), v);
        }
        Ok(v)
    }

    /// Trainable parameters seen so far, with their leaves.
    pub fn bound(&self) -> &HashMap<String, Var> {
        &self.bound
    }
}

/// Which BN statistics a forward pass uses.
pub(crate) enum BnSet<'a> {
    Train(&'a mut [UnitBns]),
    Infer(&'a [UnitBns]),
}

impl<'a> BnSet<'a> {
    fn entry(&mut self, unit: usize, j: usize) -> BnEntry<'_> {
        match self {
            BnSet::Train(b) => BnEntry::Train(&mut b[unit][j]),
            BnSet::Infer(b) => BnEntry::Infer(&b[unit][j]),
        }
    }

    fn len(&self) -> usize {
        match self {
            BnSet::Train(b) => b.len(),
            BnSet::Infer(b) => b.len(),
        }
    }
}

fn bn_forward(g: &mut Graph, x: Var, bn: BnEntry<'_>, name: &str, binder: &mut Binder) -> Result<Var> {
    match bn {
        BnEntry::Train(p) => {
            let gamma = binder.bind(g, &format!("{name}.gamma"), &p.gamma)?;
            let beta = binder.bind(g, &format!("{name}.beta"), &p.beta)?;
            g.batchnorm(x, gamma, beta, BnMode::Train { running_mean: &mut p.running_mean, running_var: &mut p.running_var })
        }
        BnEntry::Infer(p) => {
            let gamma = binder.bind(g, &format!("{name}.gamma"), &p.gamma)?;
            let beta = binder.bind(g, &format!("{name}.beta"), &p.beta)?;
            g.batchnorm(x, gamma, beta, BnMode::Infer { running_mean: &p.running_mean, running_var: &p.running_var })
        }
    }
}

enum BnEntry<'a> {
    Train(&'a mut BnParams),
    Infer(&'a BnParams),
}

fn conv_forward(g: &mut Graph, x: Var, conv: &Conv, stride: usize, name: &str, binder: &mut Binder) -> Result<Var> {
    let w = binder.bind(g, &format!("{name}.weight"), &conv.weight)?;
    let b = match &conv.bias {
        Some(b) => Some(binder.bind(g, &format!("{name}.bias"), b)?),
        None => None,
    };
    let k = conv.kernel();
    g.conv2d(x, w, b, stride, k / 2)
}

/// Runs consecutive units. `units`, `convs` and `bns` are aligned; names
/// are `{conv_prefix}.u{i}.conv{j}` and `{bn_prefix}.u{i}.bn{j}` with `i`
/// starting at `first_index`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_units(
    g: &mut Graph,
    mut x: Var,
    units: &[UnitSpec],
    convs: &[UnitConvs],
    mut bns: BnSet<'_>,
    first_index: usize,
    conv_prefix: &str,
    bn_prefix: &str,
    binder: &mut Binder,
) -> Result<Var> {
    debug_assert_eq!(units.len(), convs.len());
    debug_assert_eq!(units.len(), bns.len());
    for (k, (u, uc)) in units.iter().zip(convs).enumerate() {
        let i = first_index + k;
        let strides: Vec<usize> = u.convs().iter().map(|c| c.3).collect();
        let cname = |j: usize| format!("{conv_prefix}.u{i}.conv{j}");
        let bname = |j: usize| format!("{bn_prefix}.u{i}.bn{j}");
        x = match u.kind {
            crate::model::spec::UnitKind::Stem => {
                let h = conv_forward(g, x, &uc[0], strides[0], &cname(0), binder)?;
                let h = bn_forward(g, h, bns.entry(k, 0), &bname(0), binder)?;
                g.relu(h)?
            }
            crate::model::spec::UnitKind::Residual => {
                let h = conv_forward(g, x, &uc[0], strides[0], &cname(0), binder)?;
                let h = bn_forward(g, h, bns.entry(k, 0), &bname(0), binder)?;
                let h = g.relu(h)?;
                let h = conv_forward(g, h, &uc[1], strides[1], &cname(1), binder)?;
                let h = bn_forward(g, h, bns.entry(k, 1), &bname(1), binder)?;
                let shortcut = if u.has_projection() {
                    let s = conv_forward(g, x, &uc[2], strides[2], &cname(2), binder)?;
                    bn_forward(g, s, bns.entry(k, 2), &bname(2), binder)?
                } else {
                    x
                };
                let sum = g.add(h, shortcut)?;
                g.relu(sum)?
            }
        };
    }
    Ok(x)
}

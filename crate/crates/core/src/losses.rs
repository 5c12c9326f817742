//! Angular-margin heads, the influence loss against a frozen head, branch
//! distillation and their weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::Binder;
use crate::real::Real;
use crate::tensor::Tensor;

/// Cosines are kept this far inside `[-1, 1]`.
pub const COS_CLAMP: f64 = 1e-7;
pub const DEFAULT_LAMBDA_BRANCH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginKind {
    NormFace,
    CosFace,
    ArcFace,
    Curricular,
}

impl std::str::FromStr for MarginKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normface" => Ok(Self::NormFace),
            "cosface" => Ok(Self::CosFace),
            "arcface" => Ok(Self::ArcFace),
            "curricular" => Ok(Self::Curricular),
            other => Err(invalid!("unknown margin kind {other:?}")),
        }
    }
}

impl std::fmt::Display for MarginKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NormFace => "normface",
            Self::CosFace => "cosface",
            Self::ArcFace => "arcface",
            Self::Curricular => "curricular",
        })
    }
}

/// Where the momentum goes in the curricular `t` update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaPlacement {
    /// `t <- alpha * r + (1 - alpha) * t`
    #[default]
    BatchWeighted,
    /// `t <- (1 - alpha) * r + alpha * t`
    StateWeighted,
}

/// Margin configuration without the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    pub kind: MarginKind,
    pub s: f64,
    pub m: f64,
    /// Curricular modulation state.
    pub t: f64,
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(invalid!("margin scale must be positive, got {}", self.s));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.m) {
            return Err(invalid!("margin must lie in [0, pi/2), got {}", self.m));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(invalid!("curricular t must lie in [0, 1], got {}", self.t));
        }
        Ok(())
    }
}

/// Normalized classifier over identities plus its margin configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginHead {
    /// `identities x embedding_dim`; rows are normalized at use.
    pub weight: Tensor,
    pub kind: MarginKind,
    pub s: f64,
    pub m: f64,
    pub t: f64,
    pub alpha: f64,
    pub placement: EmaPlacement,
    pub frozen: bool,
}

impl MarginHead {
    /// Curricular head with `s = 64`, `m = 0.5`, `alpha = 0.99`, `t = 0`.
    pub fn new<R: Rng + ?Sized>(identities: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[identities, dim], 0.01, rng),
            kind: MarginKind::Curricular,
            s: 64.0,
            m: 0.5,
            t: 0.0,
            alpha: 0.99,
            placement: EmaPlacement::BatchWeighted,
            frozen: false,
        }
    }

    pub fn with_kind(mut self, kind: MarginKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn identities(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn params(&self) -> MarginParams {
        MarginParams { kind: self.kind, s: self.s, m: self.m, t: self.t }
    }

    /// A frozen copy, as used for backward-compatible training.
    pub fn frozen(&self) -> Self {
        Self { frozen: true, ..self.clone() }
    }

    /// Folds a batch's mean target cosine into `t`. Frozen heads and
    /// non-curricular heads are left alone.
    pub fn update_t(&mut self, batch_mean_target_cos: f64) {
        if self.frozen || self.kind != MarginKind::Curricular {
            return;
        }
        let r = batch_mean_target_cos;
        let t = match self.placement {
            EmaPlacement::BatchWeighted => self.alpha * r + (1.0 - self.alpha) * self.t,
            EmaPlacement::StateWeighted => (1.0 - self.alpha) * r + self.alpha * self.t,
        };
        self.t = t.clamp(0.0, 1.0);
    }
}

/// Cosines between unit embeddings (`V x D`) and the row-normalized
/// weights (`K x D`), clamped away from `+-1`.
pub fn cos_logits<T: Real>(g: &mut Graph<T>, emb: Var, weight: Var) -> Result<Var> {
    let (es, ws) = (g.shape(emb), g.shape(weight));
    if es.len() != 2 || ws.len() != 2 || es[1] != ws[1] {
        return Err(shape_err!("embeddings {:?} against head weights {:?}", es, ws));
    }
    let wn = g.l2_normalize(weight)?;
    let cos = g.linear(emb, wn, None)?;
    let c = T::of(COS_CLAMP);
    g.clamp(cos, -T::one() + c, T::one() - c)
}

/// Target cosine after the additive angular margin, `cos(acos(c) + m)`.
fn angular_target(c: f64, m: f64) -> f64 {
    c * m.cos() - (1.0 - c * c).max(0.0).sqrt() * m.sin()
}

/// Applies the margin of `p.kind` to a cosine matrix.
pub fn margin_logits<T: Real>(g: &mut Graph<T>, cos: Var, labels: &[usize], p: &MarginParams) -> Result<Var> {
    let shape = g.shape(cos).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err!("cosines {:?} for {} labels", shape, labels.len()));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(invalid!("label {bad} out of range for {k} identities"));
    }
    p.validate()?;
    let (s, m, t) = (p.s, p.m, p.t);
    let cv: Vec<f64> = g.value(cos).iter().map(|v| v.f64()).collect();
    let mut y = vec![T::zero(); cv.len()];
    let mut d = vec![T::zero(); cv.len()];
    for (i, &label) in labels.iter().enumerate() {
        let row = &cv[i * k..(i + 1) * k];
        let cy = row[label];
        let target = angular_target(cy, m);
        for (j, &c) in row.iter().enumerate() {
            let (val, der) = if j == label {
                match p.kind {
                    MarginKind::NormFace => (s * c, s),
                    MarginKind::CosFace => (s * (c - m), s),
                    MarginKind::ArcFace | MarginKind::Curricular => {
                        let sin = (1.0 - c * c).max(f64::MIN_POSITIVE).sqrt();
                        (s * target, s * (m.cos() + m.sin() * c / sin))
                    }
                }
            } else if p.kind == MarginKind::Curricular && target < c {
                (s * c * (t + c), s * (t + 2.0 * c))
            } else {
                (s * c, s)
            };
            y[i * k + j] = T::of(val);
            d[i * k + j] = T::of(der);
        }
    }
    g.elementwise(cos, y, d, "margin_logits")
}

/// Output of a head loss: the loss node and the batch-mean target cosine.
#[derive(Debug, Clone, Copy)]
pub struct HeadLoss {
    pub loss: Var,
    pub mean_target_cos: f64,
    /// Samples whose highest cosine is their own identity.
    pub correct: usize,
}

fn head_loss<T: Real>(g: &mut Graph<T>, emb: Var, weight: Var, labels: &[usize], p: &MarginParams) -> Result<HeadLoss> {
    let cos = cos_logits(g, emb, weight)?;
    let k = g.shape(cos)[1];
    let cv = g.value(cos);
    let mean_target_cos = if labels.is_empty() {
        0.0
    } else {
        labels.iter().enumerate().map(|(i, &l)| cv[i * k + l.min(k - 1)].f64()).sum::<f64>() / labels.len() as f64
    };
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = &cv[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count();
    let logits = margin_logits(g, cos, labels, p)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    Ok(HeadLoss { loss, mean_target_cos, correct })
}

/// Classification loss with a trainable head; the weight is bound under
/// `head.weight`.
pub fn classification_loss(g: &mut Graph, emb: Var, labels: &[usize], head: &MarginHead, binder: &mut Binder) -> Result<HeadLoss> {
    let w = binder.bind(g, "head.weight", &head.weight)?;
    head_loss(g, emb, w, labels, &head.params())
}

/// Cross-entropy over margin logits scored against a frozen head; only the
/// embeddings receive gradient.
pub fn influence_loss<T: Real>(g: &mut Graph<T>, emb: Var, labels: &[usize], head: &MarginHead) -> Result<HeadLoss> {
    if !head.frozen {
        return Err(invalid!("influence loss needs a frozen head"));
    }
    let w = g.constant(head.weight.cast::<T>())?;
    head_loss(g, emb, w, labels, &head.params())
}

/// Squared L2 distance between a branch output and the detached trunk
/// feature, summed over each sample's feature map and averaged over the
/// batch.
pub fn branch_distill_loss<T: Real>(g: &mut Graph<T>, z_r: Var, z_s: Var) -> Result<Var> {
    let shape = g.shape(z_r).to_vec();
    if shape != g.shape(z_s) || shape.is_empty() || shape[0] == 0 {
        return Err(shape_err!("branch feature {:?} against trunk feature {:?}", shape, g.shape(z_s)));
    }
    let per_sample = shape[1..].iter().product::<usize>();
    let target = g.detach(z_s)?;
    let mean = g.mse(z_r, target)?;
    g.scale(mean, T::of(per_sample as f64))
}

/// `influence + lambda * distill`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, influence: Var, distill: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(distill, T::of(lambda))?;
    g.add(influence, weighted)
}

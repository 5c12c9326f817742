use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::losses::{branch_distill_loss, classification_loss, influence_loss, total_loss, MarginHead};
use crate::model::{build_branch, build_trunk, BTNetModel, Binder, BranchNet, Checkpoint, ModelSpec, TrunkModel};
use crate::resample::{degrade, resize_bilinear};
use crate::rng::{substream, Rng};
use crate::train::config::{lr_at, Regime, ResolutionSampler, TrainConfig};
use crate::train::sgd::Sgd;

pub const LOG_HEADER: &str = "step,lr,loss_influence,loss_distill,loss_total";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_influence: f64,
    pub loss_distill: f64,
    pub loss_total: f64,
    /// Fraction of the batch whose nearest head row is its own identity.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.step, r.lr, r.loss_influence, r.loss_distill, r.loss_total);
        }
        out
    }

    fn epoch_mean(&self, epoch: usize, f: impl Fn(&LogRow) -> f64) -> Option<f64> {
        let rows: Vec<f64> = self.rows.iter().filter(|r| r.epoch == epoch).map(f).collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }

    /// Mean batch accuracy over the final epoch.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epoch_mean(self.rows.last()?.epoch, |r| r.accuracy)
    }

    /// Mean distillation loss over the final epoch.
    pub fn final_distill(&self) -> Option<f64> {
        self.epoch_mean(self.rows.last()?.epoch, |r| r.loss_distill)
    }
}

struct StepStats {
    influence: f64,
    distill: f64,
    total: f64,
    correct: usize,
}

/// Shuffled mini-batches for every epoch; a trailing partial batch is
/// dropped unless it is the only one.
fn run_loop(cfg: &TrainConfig, n: usize, mut step_fn: impl FnMut(usize, &[usize], f64) -> Result<StepStats>) -> Result<TrainLog> {
    cfg.validate()?;
    if n < 2 {
        return Err(invalid!("training needs at least 2 samples"));
    }
    let bs = cfg.batch_size.min(n);
    let per_epoch = n / bs;
    let schedule = cfg.schedule(per_epoch);
    let mut order_rng = substream(cfg.seed, "data.order");
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for b in 0..per_epoch {
            let step = epoch * per_epoch + b;
            let lr = lr_at(step, &schedule);
            let batch = &order[b * bs..(b + 1) * bs];
            let stats = step_fn(step, batch, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged { step, detail: format!("non-finite value in {what}") },
                other => other,
            })?;
            if !stats.total.is_finite() {
                return Err(Error::Diverged { step, detail: format!("loss {}", stats.total) });
            }
            log.rows.push(LogRow {
                step,
                epoch,
                lr,
                loss_influence: stats.influence,
                loss_distill: stats.distill,
                loss_total: stats.total,
                accuracy: stats.correct as f64 / batch.len() as f64,
            });
        }
    }
    Ok(log)
}

/// How trunk training images are degraded.
enum Degrade {
    Scheme(ResolutionSampler),
    Fixed(usize),
}

fn augment(img: &Image, flip: bool, r: usize, rng: &mut Rng) -> Result<Image> {
    let img = if flip && rng.random_bool(0.5) { img.flip_horizontal() } else { img.clone() };
    if r < img.height() {
        degrade(&img, r)
    } else {
        Ok(img)
    }
}

/// A trunk plus the log of the run that produced it.
#[derive(Debug, Clone)]
pub struct TrunkOutcome {
    pub trunk: TrunkModel,
    pub log: TrainLog,
}

fn check_data(cfg: &TrainConfig, spec: &ModelSpec, data: &Dataset) -> Result<()> {
    data.validate()?;
    if data.size() != spec.canonical_size || cfg.canonical != spec.canonical_size {
        return Err(invalid!(
            "data at {}, config at {}, model at {}: all must match",
            data.size(),
            cfg.canonical,
            spec.canonical_size
        ));
    }
    Ok(())
}

fn fit_trunk(cfg: &TrainConfig, spec: &ModelSpec, data: &Dataset, degrade_with: Degrade) -> Result<TrunkOutcome> {
    check_data(cfg, spec, data)?;
    let mut trunk = build_trunk(spec, cfg.seed)?;
    let mut head_rng = substream(cfg.seed, "init.head");
    trunk.head = Some(MarginHead::new(data.n_ids, spec.embedding_dim, &mut head_rng).with_kind(cfg.head_kind));
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut aug_rng = substream(cfg.seed, "augment");
    let log = run_loop(cfg, data.len(), |_, batch, lr| {
        let mut images = Vec::with_capacity(batch.len());
        for &i in batch {
            let r = match &degrade_with {
                Degrade::Scheme(s) => s.sample(&mut aug_rng),
                Degrade::Fixed(r) => *r,
            };
            images.push(augment(&data.images[i], cfg.flip, r, &mut aug_rng)?);
        }
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let mut g = Graph::new();
        let x = g.constant(Image::batch(&images)?)?;
        let mut binder = Binder::new(|_| true);
        let emb = trunk.forward_train(&mut g, x, &mut binder)?;
        let head = trunk.head.as_ref().expect("head attached above");
        let hl = classification_loss(&mut g, emb, &labels, head, &mut binder)?;
        g.backward(hl.loss)?;
        let loss = g.scalar(hl.loss) as f64;
        let grads = Sgd::collect(&g, binder.bound());
        sgd.step(&grads, lr, |f| trunk.visit_mut(f));
        trunk.head.as_mut().expect("head attached above").update_t(hl.mean_target_cos);
        Ok(StepStats { influence: loss, distill: 0.0, total: loss, correct: hl.correct })
    })?;
    trunk.sync_banks()?;
    Ok(TrunkOutcome { trunk, log })
}

/// Trains a trunk and its head under the configured resolution scheme.
pub fn train_trunk(cfg: &TrainConfig, spec: &ModelSpec, data: &Dataset) -> Result<TrunkOutcome> {
    fit_trunk(cfg, spec, data, Degrade::Scheme(cfg.sampler()?))
}

/// Trains a trunk on images degraded to `r` and restored to canonical size.
pub fn train_mm(cfg: &TrainConfig, spec: &ModelSpec, data: &Dataset, r: usize) -> Result<TrunkOutcome> {
    if r == 0 || r > spec.canonical_size {
        return Err(invalid!("resolution {r} outside 1..={}", spec.canonical_size));
    }
    fit_trunk(cfg, spec, data, Degrade::Fixed(r))
}

/// A single-branch model, its log, and the arrays the run changed.
#[derive(Debug, Clone)]
pub struct BranchOutcome {
    pub model: BTNetModel,
    pub log: TrainLog,
    /// Branch arrays, the resolution's BN bank, and anything else that
    /// differs from the starting point.
    pub delta: Checkpoint,
    /// The head used for scoring (frozen under backward-compatible training).
    pub head: MarginHead,
}

/// Trains the branch for `r` (and, depending on the regime, the trunk and
/// head) on `LR = resize(HR, r)` inputs.
pub fn train_branch(trunk: &TrunkModel, r: usize, regime: Regime, cfg: &TrainConfig, data: &Dataset) -> Result<BranchOutcome> {
    regime.validate()?;
    let spec = trunk.spec.clone();
    check_data(cfg, &spec, data)?;
    if !spec.supports(r) {
        return Err(Error::UnsupportedResolution(r));
    }
    let (mut base, branch) = if regime.from_scratch {
        let mut t = build_trunk(&spec, cfg.seed)?;
        let mut head_rng = substream(cfg.seed, "init.head");
        t.head = Some(MarginHead::new(data.n_ids, spec.embedding_dim, &mut head_rng).with_kind(cfg.head_kind));
        let b = build_branch(&spec, r, cfg.seed)?;
        (t, b)
    } else {
        let head = trunk.head.as_ref().ok_or_else(|| invalid!("regime needs a trunk checkpoint with a classifier head"))?;
        if head.identities() != data.n_ids {
            return Err(invalid!("trunk head has {} identities, data has {}", head.identities(), data.n_ids));
        }
        (trunk.clone(), BranchNet::from_trunk(trunk, r)?)
    };
    if let Some(h) = &mut base.head {
        h.frozen = regime.freeze_classifier;
    }
    let mut model = BTNetModel::assemble(base, [branch])?;
    let start = model.to_checkpoint();
    let branch_prefix = format!("branch{r}.");
    let bank_prefix = format!("trunk.bn{r}.");
    let trainable = |name: &str| {
        if regime.freeze_trunk {
            name.starts_with(&branch_prefix) || name.starts_with(&bank_prefix)
        } else {
            !(regime.freeze_classifier && name == "head.weight")
        }
    };
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut aug_rng = substream(cfg.seed, "augment");
    let log = run_loop(cfg, data.len(), |_, batch, lr| {
        let mut hr = Vec::with_capacity(batch.len());
        for &i in batch {
            hr.push(augment(&data.images[i], cfg.flip, spec.canonical_size, &mut aug_rng)?);
        }
        let lr_images = hr.iter().map(|img| resize_bilinear(img, r, r)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
        let mut g = Graph::new();
        let x = g.constant(Image::batch(&lr_images)?)?;
        let mut binder = Binder::new(trainable);
        let out = model.forward_train(&mut g, x, r, &mut binder)?;
        let head = model.trunk.head.as_ref().expect("head attached above");
        let hl = if regime.freeze_classifier {
            influence_loss(&mut g, out.embedding, &labels, head)?
        } else {
            classification_loss(&mut g, out.embedding, &labels, head, &mut binder)?
        };
        let target = g.constant(trunk.tap_feature(&Image::batch(&hr)?, r)?)?;
        let distill = branch_distill_loss(&mut g, out.feature, target)?;
        let loss = if regime.distill { total_loss(&mut g, hl.loss, distill, cfg.lambda_branch)? } else { hl.loss };
        g.backward(loss)?;
        let grads = Sgd::collect(&g, binder.bound());
        sgd.step(&grads, lr, |f| model.visit_mut(f));
        if let Some(h) = &mut model.trunk.head {
            h.update_t(hl.mean_target_cos);
        }
        Ok(StepStats {
            influence: g.scalar(hl.loss) as f64,
            distill: g.scalar(distill) as f64,
            total: g.scalar(loss) as f64,
            correct: hl.correct,
        })
    })?;
    let end = model.to_checkpoint();
    let before: HashMap<&str, &[f32]> = start.arrays.iter().map(|a| (a.name.as_str(), a.data.as_slice())).collect();
    let mut delta = Checkpoint::new("delta");
    delta.spec = Some(spec.clone());
    delta.info.insert("resolution".into(), r.to_string());
    delta.info.insert("regime".into(), regime.name().unwrap_or("custom").into());
    for a in &end.arrays {
        let changed = before.get(a.name.as_str()).is_none_or(|b| b.iter().zip(&a.data).any(|(x, y)| x.to_bits() != y.to_bits()));
        if changed || a.name.starts_with(&branch_prefix) || a.name.starts_with(&bank_prefix) {
            delta.arrays.push(a.clone());
        }
    }
    delta.head = end.head.clone();
    let head = model.trunk.head.clone().expect("head attached above");
    Ok(BranchOutcome { model, log, delta, head })
}

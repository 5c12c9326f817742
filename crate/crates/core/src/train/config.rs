use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::losses::{MarginKind, DEFAULT_LAMBDA_BRANCH};

/// Probabilities over the candidate set, largest resolution first.
pub const WEIGHTED_SET: [f64; 5] = [0.3, 0.25, 0.2, 0.15, 0.1];
/// Smallest resolution drawn by [`ResolutionScheme::UniformInterval`].
pub const INTERVAL_MIN: usize = 4;

/// How training images are degraded before reaching the trunk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ResolutionScheme {
    /// Canonical-size images only.
    #[default]
    None,
    /// Uniform over the candidate set.
    EqualSet,
    /// The candidate set with unequal probabilities.
    WeightedSet,
    /// Any integer size in `[4, S]`.
    UniformInterval,
}

impl fmt::Display for ResolutionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::EqualSet => "equal_set",
            Self::WeightedSet => "weighted_set",
            Self::UniformInterval => "uniform_interval",
        })
    }
}

impl FromStr for ResolutionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "equal_set" => Ok(Self::EqualSet),
            "weighted_set" => Ok(Self::WeightedSet),
            "uniform_interval" => Ok(Self::UniformInterval),
            other => Err(invalid!("unknown resolution scheme {other:?}")),
        }
    }
}

/// `S / 2^i` for `i = 0..5`, keeping exact sizes of at least 4.
pub fn candidate_set(canonical: usize) -> Vec<usize> {
    (0..5).filter(|i| canonical.is_multiple_of(1 << i)).map(|i| canonical >> i).filter(|&r| r >= INTERVAL_MIN).collect()
}

/// Draws training resolutions for a scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionSampler {
    pub scheme: ResolutionScheme,
    pub canonical: usize,
    /// Largest first.
    pub set: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ResolutionSampler {
    /// `weights` defaults to the leading entries of [`WEIGHTED_SET`],
    /// renormalized when the candidate set is shorter.
    pub fn new(scheme: ResolutionScheme, canonical: usize, weights: Option<&[f64]>) -> Result<Self> {
        let set = candidate_set(canonical);
        if set.is_empty() {
            return Err(invalid!("canonical size {canonical} has no candidate resolutions"));
        }
        let weights = match weights {
            Some(w) => w.to_vec(),
            None => {
                let w = &WEIGHTED_SET[..set.len().min(WEIGHTED_SET.len())];
                let total: f64 = w.iter().sum();
                w.iter().map(|v| v / total).collect()
            }
        };
        if weights.len() != set.len() {
            return Err(invalid!("{} weights for candidate set {:?}", weights.len(), set));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid!("set weights must be non-negative and sum to 1, got {weights:?}"));
        }
        Ok(Self { scheme, canonical, set, weights })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.scheme {
            ResolutionScheme::None => self.canonical,
            ResolutionScheme::EqualSet => self.set[rng.random_range(0..self.set.len())],
            ResolutionScheme::WeightedSet => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (&r, &w) in self.set.iter().zip(&self.weights) {
                    acc += w;
                    if u < acc {
                        return r;
                    }
                }
                *self.set.last().unwrap()
            }
            ResolutionScheme::UniformInterval => rng.random_range(INTERVAL_MIN.min(self.canonical)..=self.canonical),
        }
    }
}

pub fn sample_resolution<R: Rng + ?Sized>(sampler: &ResolutionSampler, rng: &mut R) -> usize {
    sampler.sample(rng)
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub flip: bool,
    pub resolution_scheme: ResolutionScheme,
    /// Overrides the default set weights for `weighted_set`.
    pub set_weights: Option<Vec<f64>>,
    pub canonical: usize,
    /// Weight of the distillation term.
    pub lambda_branch: f64,
    /// Margin of a freshly created head.
    pub head_kind: MarginKind,
}

impl TrainConfig {
    /// Desk trunk schedule: 15 epochs, batch 64, lr 0.1 with one warm-up epoch.
    pub fn desk_trunk(seed: u64) -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            base_lr: 0.1,
            warmup_epochs: 1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            flip: true,
            resolution_scheme: ResolutionScheme::None,
            set_weights: None,
            canonical: 32,
            lambda_branch: DEFAULT_LAMBDA_BRANCH,
            head_kind: MarginKind::Curricular,
        }
    }

    /// Desk branch schedule: 6 epochs, lr 0.005, no warm-up.
    pub fn desk_branch(seed: u64) -> Self {
        Self { epochs: 6, base_lr: 0.005, warmup_epochs: 0, ..Self::desk_trunk(seed) }
    }

    /// Full-scale trunk schedule: 25 epochs, batch 128, lr 0.2, 2 warm-up epochs.
    pub fn paper_trunk(seed: u64) -> Self {
        Self { epochs: 25, batch_size: 128, base_lr: 0.2, warmup_epochs: 2, canonical: 112, ..Self::desk_trunk(seed) }
    }

    /// Full-scale branch schedule: 10 epochs, lr 0.02.
    pub fn paper_branch(seed: u64) -> Self {
        Self { epochs: 10, base_lr: 0.02, warmup_epochs: 0, ..Self::paper_trunk(seed) }
    }

    pub fn with_scheme(mut self, scheme: ResolutionScheme) -> Self {
        self.resolution_scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid!("batch size must be at least 2 for batch norm"));
        }
        if self.epochs == 0 || self.warmup_epochs > self.epochs {
            return Err(invalid!("need at least one epoch and no more warm-up than training"));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid!("learning rate, momentum or weight decay out of range"));
        }
        self.sampler()?;
        Ok(())
    }

    pub fn sampler(&self) -> Result<ResolutionSampler> {
        ResolutionSampler::new(self.resolution_scheme, self.canonical, self.set_weights.as_deref())
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            total_steps: self.epochs * steps_per_epoch,
        }
    }
}

/// Linear warm-up then quadratic decay to zero at the final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(1).saturating_sub(s.warmup_steps);
    if span == 0 {
        return 0.0;
    }
    let p = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.base_lr * (1.0 - p) * (1.0 - p)
}

/// Branch training recipe as flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Regime {
    pub from_scratch: bool,
    pub init_from_trunk: bool,
    /// Score against the frozen trunk head (backward-compatible training).
    pub freeze_classifier: bool,
    /// Only the branch and the resolution's BN bank are updated.
    pub freeze_trunk: bool,
    pub distill: bool,
}

impl Regime {
    pub const SCRATCH: Regime = Regime { from_scratch: true, init_from_trunk: false, freeze_classifier: false, freeze_trunk: false, distill: false };
    pub const PRETRAINING: Regime = Regime { from_scratch: false, init_from_trunk: true, ..Self::SCRATCH };
    pub const BCT: Regime = Regime { freeze_classifier: true, ..Self::PRETRAINING };
    pub const FIX_TRUNK: Regime = Regime { freeze_trunk: true, ..Self::BCT };
    pub const DISTILL: Regime = Regime { distill: true, ..Self::FIX_TRUNK };

    /// The five regimes from weakest to strongest.
    pub fn ladder() -> [(&'static str, Regime); 5] {
        [
            ("scratch", Self::SCRATCH),
            ("pretraining", Self::PRETRAINING),
            ("pretraining+bct", Self::BCT),
            ("pretraining+bct+fix_trunk", Self::FIX_TRUNK),
            ("pretraining+bct+fix_trunk+distill", Self::DISTILL),
        ]
    }

    pub fn by_name(name: &str) -> Result<Regime> {
        Self::ladder()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| invalid!("unknown regime {name:?}"))
    }

    pub fn name(&self) -> Option<&'static str> {
        Self::ladder().into_iter().find(|(_, r)| r == self).map(|(n, _)| n)
    }

    pub fn validate(&self) -> Result<()> {
        if self.from_scratch == self.init_from_trunk {
            return Err(invalid!("a regime starts either from scratch or from the trunk"));
        }
        if self.from_scratch && (self.freeze_classifier || self.freeze_trunk) {
            return Err(invalid!("a from-scratch model has no trunk head or trunk to freeze"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_sets() {
        assert_eq!(candidate_set(32), vec![32, 16, 8, 4]);
        assert_eq!(candidate_set(112), vec![112, 56, 28, 14, 7]);
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule { base_lr: 0.1, warmup_steps: 10, total_steps: 111 };
        assert_eq!(lr_at(0, &s), 0.0);
        assert!((lr_at(5, &s) - 0.05).abs() < 1e-15);
        assert_eq!(lr_at(10, &s), 0.1);
        assert!((lr_at(60, &s) - 0.025).abs() < 1e-15);
        assert_eq!(lr_at(110, &s), 0.0);
        let s = Schedule { base_lr: 0.02, warmup_steps: 0, total_steps: 5 };
        assert_eq!(lr_at(0, &s), 0.02);
    }

    #[test]
    fn ladder_is_valid_and_named() {
        for (name, r) in Regime::ladder() {
            r.validate().unwrap();
            assert_eq!(r.name(), Some(name));
            assert_eq!(Regime::by_name(name).unwrap(), r);
        }
        assert!(Regime::default().validate().is_err());
    }

    #[test]
    fn weights_must_match_the_set() {
        assert!(ResolutionSampler::new(ResolutionScheme::WeightedSet, 32, Some(&WEIGHTED_SET)).is_err());
        let s = ResolutionSampler::new(ResolutionScheme::WeightedSet, 32, None).unwrap();
        assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s.weights[0] - 0.3 / 0.9).abs() < 1e-12);
    }
}

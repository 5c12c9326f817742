//! `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::losses::MarginKind;
use crate::model::ModelSpec;
use crate::select::{Allocation, Indicator, SelectionPolicy};
use crate::train::{Regime, TrainConfig};

pub const RESOLVED_CONFIG_NAME: &str = "config.resolved";

/// Everything a command needs: training, regime, selection, model preset,
/// data paths and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub train: TrainConfig,
    pub regime: Regime,
    pub selection: SelectionPolicy,
    /// Branch resolution for `train-mm` and `train-branch`.
    pub resolution: usize,
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Evaluation settings as `(r1, r2)`.
    pub settings: Vec<(usize, usize)>,
    pub rank: usize,
    pub far: Vec<f64>,
    pub fpir: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "desk".into(),
            train: TrainConfig::desk_trunk(0),
            regime: Regime::DISTILL,
            selection: SelectionPolicy::default_for(vec![4, 8, 16, 32]).expect("ascending set"),
            resolution: 8,
            train_manifest: None,
            eval_manifest: None,
            pairs: None,
            checkpoint: None,
            output_dir: PathBuf::from("out"),
            settings: vec![(32, 32), (32, 8), (8, 8)],
            rank: 20,
            far: vec![1e-4, 1e-3, 1e-2],
            fpir: vec![0.01, 0.1],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid!("bad value {value:?} for {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid!("bad boolean {value:?} for {key}")),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|v| !v.is_empty()).map(|v| parse(key, v)).collect()
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "model" => {
                ModelSpec::preset(value)?;
                self.model = value.into();
            }
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "base_lr" => t.base_lr = parse(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "momentum" => t.momentum = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "flip" => t.flip = parse_bool(key, value)?,
            "resolution_scheme" => t.resolution_scheme = value.parse()?,
            "set_weights" => t.set_weights = if value.is_empty() { None } else { Some(parse_list(key, value)?) },
            "canonical" => t.canonical = parse(key, value)?,
            "lambda_branch" => t.lambda_branch = parse(key, value)?,
            "head_kind" => t.head_kind = value.parse::<MarginKind>()?,
            "regime" => self.regime = Regime::by_name(value)?,
            "from_scratch" => self.regime.from_scratch = parse_bool(key, value)?,
            "init_from_trunk" => self.regime.init_from_trunk = parse_bool(key, value)?,
            "freeze_classifier" => self.regime.freeze_classifier = parse_bool(key, value)?,
            "freeze_trunk" => self.regime.freeze_trunk = parse_bool(key, value)?,
            "distill" => self.regime.distill = parse_bool(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "indicator" => self.selection.indicator = value.parse::<Indicator>()?,
            "allocation" => self.selection.allocation = value.parse::<Allocation>()?,
            "branch_set" => self.selection.branch_set = parse_list(key, value)?,
            "train_manifest" => self.train_manifest = path(value),
            "eval_manifest" => self.eval_manifest = path(value),
            "pairs" => self.pairs = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "settings" => {
                self.settings = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(crate::experiments::parse_setting)
                    .collect::<Result<_>>()?
            }
            "rank" => self.rank = parse(key, value)?,
            "far" => self.far = parse_list(key, value)?,
            "fpir" => self.fpir = parse_list(key, value)?,
            other => return Err(invalid!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Applies `key=value` (CLI override form).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| invalid!("override {assignment:?} is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    /// Parses a config file over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.regime.validate()?;
        self.selection.validate()?;
        let spec = self.spec()?;
        if spec.canonical_size != self.train.canonical {
            return Err(invalid!("model {} is {}px but canonical = {}", self.model, spec.canonical_size, self.train.canonical));
        }
        if self.rank == 0 {
            return Err(invalid!("rank must be at least 1"));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::preset(&self.model)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let r = &self.regime;
        let s = &self.selection;
        let settings: Vec<String> = self.settings.iter().map(|(a, b)| format!("{a}&{b}")).collect();
        let rows: Vec<(&str, String)> = vec![
            ("seed", t.seed.to_string()),
            ("model", self.model.clone()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("base_lr", t.base_lr.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("flip", t.flip.to_string()),
            ("resolution_scheme", t.resolution_scheme.to_string()),
            ("set_weights", t.set_weights.as_deref().map(join).unwrap_or_default()),
            ("canonical", t.canonical.to_string()),
            ("lambda_branch", t.lambda_branch.to_string()),
            ("head_kind", t.head_kind.to_string()),
            ("from_scratch", r.from_scratch.to_string()),
            ("init_from_trunk", r.init_from_trunk.to_string()),
            ("freeze_classifier", r.freeze_classifier.to_string()),
            ("freeze_trunk", r.freeze_trunk.to_string()),
            ("distill", r.distill.to_string()),
            ("resolution", self.resolution.to_string()),
            ("indicator", s.indicator.to_string()),
            ("allocation", s.allocation.to_string()),
            ("branch_set", join(&s.branch_set)),
            ("train_manifest", show(&self.train_manifest)),
            ("eval_manifest", show(&self.eval_manifest)),
            ("pairs", show(&self.pairs)),
            ("checkpoint", show(&self.checkpoint)),
            ("output_dir", self.output_dir.display().to_string()),
            ("settings", settings.join(",")),
            ("rank", self.rank.to_string()),
            ("far", join(&self.far)),
            ("fpir", join(&self.fpir)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        fs::create_dir_all(dir.as_ref())?;
        let p = dir.as_ref().join(RESOLVED_CONFIG_NAME);
        fs::write(&p, self.to_text())?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::ResolutionScheme;

    #[test]
    fn parse_comments_and_overrides() {
        let text = "# trunk run\nepochs = 3  # short\nresolution_scheme = equal_set\nregime = pretraining+bct\nsettings = 32&8, 8&8\n";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.resolution_scheme, ResolutionScheme::EqualSet);
        assert_eq!(cfg.regime, Regime::BCT);
        assert_eq!(cfg.settings, vec![(32, 8), (8, 8)]);
        cfg.apply_override("seed=9").unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("learning_rate = 0.1").is_err());
        assert!(RunConfig::parse("epochs").is_err());
        assert!(RunConfig::default().apply_override("bogus=1").is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("set_weights", "0.4,0.3,0.2,0.1").unwrap();
        cfg.set("checkpoint", "a/b.btnt").unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }
}

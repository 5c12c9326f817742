//! Desk-scale baselines and the branch-training ladder on synthetic
//! identities.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{synth_dataset, Dataset, SynthConfig};
use crate::error::{invalid, Result};
use crate::eval::{cross_res_gain, same_res_gain};
use crate::experiments::protocol::PairProtocol;
use crate::model::{BTNetModel, Checkpoint, ModelSpec, TrunkModel};
use crate::train::{train_branch, train_mm, train_trunk, Regime, ResolutionScheme, TrainConfig};

/// Synthetic identities whose cues sit at low frequencies with a flat
/// spectrum, so an 8-pixel view still carries most of the identity.
pub fn desk_synth(n_ids: usize, per_id: usize, size: usize, seed: u64) -> SynthConfig {
    SynthConfig { max_freq: 5, falloff: 0.0, offset_jitter: 0.05, noise: 0.05, ..SynthConfig::new(n_ids, per_id, size, seed) }
}

/// Data, models and schedules of the desk experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskPlan {
    pub spec: ModelSpec,
    pub train_data: SynthConfig,
    /// Held-out identities for evaluation.
    pub eval_data: SynthConfig,
    pub n_pairs: usize,
    pub trunk: TrainConfig,
    pub branch: TrainConfig,
    /// The low resolution of the cross-resolution setting.
    pub low: usize,
}

impl DeskPlan {
    /// 64 identities x 40 images at 32 px, branches evaluated at 8.
    pub fn standard(seed: u64) -> Self {
        Self {
            spec: ModelSpec::desk_compact(),
            train_data: desk_synth(64, 40, 32, seed),
            eval_data: desk_synth(100, 8, 32, seed.wrapping_add(1000)),
            n_pairs: 6000,
            trunk: TrainConfig { epochs: 20, ..TrainConfig::desk_trunk(seed) },
            branch: TrainConfig::desk_branch(seed.wrapping_add(100)),
            low: 8,
        }
    }

    /// A tiny plan that runs in seconds; only exercises the plumbing.
    pub fn smoke(seed: u64) -> Self {
        let mut p = Self::standard(seed);
        p.train_data = desk_synth(4, 8, 32, seed);
        p.eval_data = desk_synth(6, 4, 32, seed.wrapping_add(1000));
        p.n_pairs = 60;
        p.trunk.epochs = 1;
        p.trunk.batch_size = 16;
        p.trunk.warmup_epochs = 0;
        p.branch.epochs = 1;
        p.branch.batch_size = 16;
        p
    }

    /// Identifies the plan inside cached checkpoints.
    pub fn fingerprint(&self) -> String {
        format!("{:?}", self)
    }

    pub fn trunk_config(&self, scheme: ResolutionScheme, seed_offset: u64) -> TrainConfig {
        let mut c = self.trunk.clone().with_scheme(scheme);
        c.seed = c.seed.wrapping_add(seed_offset);
        c
    }

    pub fn train_set(&self) -> Result<Dataset> {
        synth_dataset(&self.train_data)
    }

    pub fn protocol(&self) -> Result<PairProtocol> {
        PairProtocol::synthetic(&self.eval_data, self.n_pairs)
    }
}

/// Checkpoints keyed by name, reused only when produced by the same plan.
#[derive(Debug, Clone, Default)]
pub struct ArtifactStore {
    pub dir: Option<PathBuf>,
}

impl ArtifactStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn in_memory() -> Self {
        Self { dir: None }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{name}.btnt")))
    }

    /// Loads `name` if it was cached under `fingerprint`, else builds, caches
    /// and returns it.
    pub fn get_or_build(&self, name: &str, fingerprint: &str, build: impl FnOnce() -> Result<Checkpoint>) -> Result<Checkpoint> {
        let path = self.path(name);
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            if let Ok(ck) = Checkpoint::load(p) {
                if ck.info.get("plan").map(String::as_str) == Some(fingerprint) {
                    return Ok(ck);
                }
            }
        }
        let mut ck = build()?;
        ck.info.insert("plan".into(), fingerprint.into());
        if let Some(p) = path {
            if let Some(d) = p.parent() {
                fs::create_dir_all(d)?;
            }
            ck.save(&p)?;
        }
        Ok(ck)
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        if let Some(d) = &self.dir {
            fs::create_dir_all(d)?;
            fs::write(d.join(name), text)?;
        }
        Ok(())
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }
}

/// Trunks trained at high resolution, at mixed resolutions, and at the low
/// resolution only.
#[derive(Debug, Clone)]
pub struct Baselines {
    pub hr: TrunkModel,
    pub mr: TrunkModel,
    pub mm: TrunkModel,
}

pub fn baselines(plan: &DeskPlan, store: &ArtifactStore) -> Result<Baselines> {
    let fp = plan.fingerprint();
    let data = std::cell::OnceCell::new();
    let data = || -> Result<&Dataset> {
        if data.get().is_none() {
            let _ = data.set(plan.train_set()?);
        }
        Ok(data.get().expect("set above"))
    };
    let hr = store.get_or_build("phi_hr", &fp, || {
        Ok(train_trunk(&plan.trunk_config(ResolutionScheme::None, 0), &plan.spec, data()?)?.trunk.to_checkpoint())
    })?;
    let mr = store.get_or_build("phi_mr", &fp, || {
        Ok(train_trunk(&plan.trunk_config(ResolutionScheme::EqualSet, 1), &plan.spec, data()?)?.trunk.to_checkpoint())
    })?;
    let mm = store.get_or_build(&format!("phi_mm{}", plan.low), &fp, || {
        Ok(train_mm(&plan.trunk_config(ResolutionScheme::None, 2), &plan.spec, data()?, plan.low)?.trunk.to_checkpoint())
    })?;
    Ok(Baselines {
        hr: TrunkModel::from_checkpoint(&hr)?,
        mr: TrunkModel::from_checkpoint(&mr)?,
        mm: TrunkModel::from_checkpoint(&mm)?,
    })
}

/// One verification accuracy, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCell {
    pub model: String,
    pub setting: String,
    pub accuracy: f64,
}

pub const ACCURACY_HEADER: &str = "model,setting,accuracy";

pub fn accuracy_csv(cells: &[AccuracyCell]) -> String {
    let mut out = format!("{ACCURACY_HEADER}\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{:.2}", c.model, c.setting, c.accuracy);
    }
    out
}

pub fn lookup(cells: &[AccuracyCell], model: &str, setting: &str) -> Result<f64> {
    cells
        .iter()
        .find(|c| c.model == model && c.setting == setting)
        .map(|c| c.accuracy)
        .ok_or_else(|| invalid!("no accuracy for {model} at {setting}"))
}

/// Baseline accuracies at `S&S`, `S&low` and `low&low`. The low-resolution
/// trunk sees only low-resolution inputs, so its `S` side is the
/// high-resolution trunk.
pub fn baseline_table(plan: &DeskPlan, b: &Baselines, proto: &PairProtocol) -> Result<Vec<AccuracyCell>> {
    let (s, l) = (plan.spec.canonical_size, plan.low);
    let (full, cross, same) = (format!("{s}&{s}"), format!("{s}&{l}"), format!("{l}&{l}"));
    let cell = |model: &str, setting: &str, accuracy: f64| AccuracyCell { model: model.into(), setting: setting.into(), accuracy };
    let mut cells = Vec::new();
    for (name, m) in [("hr", &b.hr), ("mr", &b.mr)] {
        cells.push(cell(name, &full, proto.accuracy_same_model(m, s, s)?));
        cells.push(cell(name, &cross, proto.accuracy_same_model(m, s, l)?));
        cells.push(cell(name, &same, proto.accuracy_same_model(m, l, l)?));
    }
    cells.push(cell("mm", &full, proto.accuracy_same_model(&b.hr, s, s)?));
    cells.push(cell("mm", &cross, proto.accuracy(&b.hr, s, &b.mm, l)?));
    cells.push(cell("mm", &same, proto.accuracy_same_model(&b.mm, l, l)?));
    Ok(cells)
}

/// Cross gain at `S&low` (against the mixed-resolution trunk) and same gain
/// at `low&low` (against the low-resolution trunk) for `model`.
pub fn desk_gains(plan: &DeskPlan, cells: &[AccuracyCell], model: &str) -> Result<(Result<f64>, Result<f64>)> {
    let (s, l) = (plan.spec.canonical_size, plan.low);
    let (cross, same) = (format!("{s}&{l}"), format!("{l}&{l}"));
    let m_cross = lookup(cells, model, &cross)?;
    let m_same = lookup(cells, model, &same)?;
    Ok((
        cross_res_gain(m_cross, lookup(cells, "hr", &cross)?, lookup(cells, "mr", &cross)?),
        same_res_gain(m_same, lookup(cells, "hr", &same)?, lookup(cells, "mm", &same)?),
    ))
}

/// One regime of the ladder after training and scoring.
#[derive(Debug, Clone)]
pub struct LadderRung {
    pub name: &'static str,
    pub regime: Regime,
    pub model: BTNetModel,
    /// `S&low` accuracy: original trunk on the `S` side, this model's
    /// branch on the `low` side.
    pub cross_accuracy: f64,
    /// `low&low` accuracy through the branch.
    pub same_accuracy: f64,
    /// ROC-AUC of branch-path against trunk-path embeddings.
    pub cross_auc: f64,
    /// Whether the classifier bits match the trunk's.
    pub head_unchanged: bool,
    pub final_distill: f64,
}

/// Trains the branch for `plan.low` under every regime, starting from
/// `trunk` (the mixed-resolution baseline).
pub fn ladder(plan: &DeskPlan, trunk: &TrunkModel, proto: &PairProtocol, store: &ArtifactStore) -> Result<Vec<LadderRung>> {
    let fp = plan.fingerprint();
    let (s, l) = (plan.spec.canonical_size, plan.low);
    let data = std::cell::OnceCell::new();
    let head_bits = |m: &BTNetModel| m.trunk.head.as_ref().map(|h| h.weight.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let trunk_head = trunk.head.as_ref().map(|h| h.weight.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let mut rungs = Vec::new();
    for (name, regime) in Regime::ladder() {
        let mut log_csv = None;
        let ck = store.get_or_build(&format!("ladder_{}", name.replace('+', "_")), &fp, || {
            if data.get().is_none() {
                let _ = data.set(plan.train_set()?);
            }
            let out = train_branch(trunk, l, regime, &plan.branch, data.get().expect("set above"))?;
            log_csv = Some(out.log.to_csv());
            let mut ck = out.model.to_checkpoint();
            ck.info.insert("final_distill".into(), out.log.final_distill().unwrap_or(f64::NAN).to_string());
            Ok(ck)
        })?;
        if let Some(csv) = log_csv {
            store.write_text(&format!("ladder_{}.log.csv", name.replace('+', "_")), &csv)?;
        }
        let model = BTNetModel::from_checkpoint(&ck)?;
        let cross_accuracy = proto.accuracy(trunk, s, &model, l)?;
        let same_accuracy = proto.accuracy_same_model(&model, l, l)?;
        let cross_auc = proto.roc_auc(trunk, s, &model, l)?;
        let head_unchanged = head_bits(&model) == trunk_head;
        let final_distill = ck.info.get("final_distill").and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
        rungs.push(LadderRung { name, regime, model, cross_accuracy, same_accuracy, cross_auc, head_unchanged, final_distill });
    }
    Ok(rungs)
}

pub const LADDER_HEADER: &str = "regime,cross_accuracy,same_accuracy,cross_auc,head_unchanged,final_distill";

pub fn ladder_csv(rungs: &[LadderRung]) -> String {
    let mut out = format!("{LADDER_HEADER}\n");
    for r in rungs {
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.4},{},{:.5}",
            r.name, r.cross_accuracy, r.same_accuracy, r.cross_auc, r.head_unchanged, r.final_distill
        );
    }
    out
}

/// Checks of the ladder ordering, each with a one-line description.
pub fn ladder_checks(rungs: &[LadderRung]) -> Vec<(String, bool)> {
    let acc: Vec<f64> = rungs.iter().map(|r| r.cross_accuracy).collect();
    if acc.len() != 5 {
        return vec![("five regimes".into(), false)];
    }
    vec![
        (format!("scratch {:.2} < pretraining {:.2}", acc[0], acc[1]), acc[0] < acc[1]),
        (format!("pretraining {:.2} < bct {:.2}", acc[1], acc[2]), acc[1] < acc[2]),
        (format!("bct {:.2} <= fix_trunk {:.2}", acc[2], acc[3]), acc[2] <= acc[3]),
        (format!("fix_trunk {:.2} < distill {:.2}", acc[3], acc[4]), acc[3] < acc[4]),
        (format!("distill gain {:+.2} >= 2", acc[4] - acc[3]), acc[4] - acc[3] >= 2.0),
    ]
}


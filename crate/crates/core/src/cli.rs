//! The `btnet` command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{synth_dataset, texture_corpus, DatasetManifest, ManifestEntry, PairList, PairRecord, RunConfig, Split};
use crate::error::{invalid, Error, Result};
use crate::eval::{cosine, tar_at_far, verification_accuracy, MetricReport, ScoredPair};
use crate::experiments::desk::{self, ArtifactStore, DeskPlan};
use crate::experiments::{identify, table1, Embedder, PairProtocol, Routed};
use crate::graph::Graph;
use crate::image::Image;
use crate::model::{count_flops, param_breakdown, BTNetModel, Binder, Checkpoint, ModelSpec, TrunkModel};
use crate::resample::{error_curve, resize_bilinear};
use crate::select::{allocate, resolution_indicator, Allocation, Indicator, SelectionPolicy};
use crate::train::{train_branch, train_mm, train_trunk};

#[derive(Debug, Parser)]
#[command(name = "btnet", version, about = "Branch-to-trunk networks for multi-resolution embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides a config key, e.g. `--set epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    /// Every image in the `train` split.
    Train,
    /// Every image in the `pairs` split plus `pairs.tsv`.
    Verify,
    /// Gallery and probe splits with non-mated identities.
    Identify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Params,
    Flops,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// Recompute the published gain cells from their accuracy cells.
    Table1Gains,
    /// Desk-scale baselines: high-res, mixed-res and low-res-only trunks.
    Baselines,
    /// Desk-scale branch-training ladder.
    Table3Ladder,
    /// Interpolation-error bound over resolution on a texture corpus.
    Fig1Curve,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Pair verification accuracy and TAR@FAR per resolution setting.
    Verify(ConfigArgs),
    /// Open-set TPIR@FPIR and AUC per resolution setting.
    Identify(ConfigArgs),
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic identity dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        ids: usize,
        #[arg(long, default_value_t = 40)]
        per_id: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Layout::Train)]
        layout: Layout,
        /// Pairs written for the `verify` layout.
        #[arg(long, default_value_t = 6000)]
        pairs: usize,
    },
    /// Mean interpolation-error bound per resolution as CSV.
    AnalyzeError {
        /// Directory of PGM/PPM images; a generated texture corpus otherwise.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "7,14,28,56")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 112)]
        canonical: usize,
        #[arg(long, default_value_t = 24)]
        textures: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a trunk under the configured resolution scheme.
    TrainTrunk(ConfigArgs),
    /// Trains a trunk on images degraded to `resolution`.
    TrainMm(ConfigArgs),
    /// Trains the `resolution` branch of `checkpoint` under `regime`.
    TrainBranch(ConfigArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Prints the branch chosen for a `w x h` image.
    SelectBranch {
        #[arg(long)]
        w: usize,
        #[arg(long)]
        h: usize,
        #[arg(long, default_value = "max")]
        indicator: Indicator,
        #[arg(long, default_value = "ceil")]
        alloc: Allocation,
        #[arg(long, value_delimiter = ',', default_value = "7,14,28,112")]
        branches: Vec<usize>,
    },
    /// Parameter or FLOP counts per branch resolution as CSV.
    Report {
        #[arg(value_enum)]
        kind: ReportKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Preset used when no checkpoint is given.
        #[arg(long, default_value = "desk")]
        model: String,
    },
    /// Writes tap-point activations of one image as grayscale grids.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs an experiment end to end.
    Reproduce {
        #[arg(value_enum)]
        experiment: Experiment,
        #[arg(long, default_value = "reproduce")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Tiny data and schedules; exercises the pipeline only.
        #[arg(long)]
        smoke: bool,
    },
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut String) -> Result<()> {
    match cli.command {
        Command::Synth { out: dir, ids, per_id, size, seed, layout, pairs } => cmd_synth(&dir, ids, per_id, size, seed, layout, pairs, out),
        Command::AnalyzeError { corpus, resolutions, canonical, textures, seed, out: path } => {
            let images = match corpus {
                Some(dir) => read_corpus(&dir, canonical)?,
                None => texture_corpus(textures, canonical, seed)?,
            };
            let curve = error_curve(&images, &resolutions, canonical)?;
            fs::write(&path, curve.to_csv())?;
            out.push_str(&curve.to_csv());
            Ok(())
        }
        Command::TrainTrunk(a) => cmd_train_trunk(&a.resolve()?, false, out),
        Command::TrainMm(a) => cmd_train_trunk(&a.resolve()?, true, out),
        Command::TrainBranch(a) => cmd_train_branch(&a.resolve()?, out),
        Command::Eval(EvalCommand::Verify(a)) => cmd_verify(&a.resolve()?, out),
        Command::Eval(EvalCommand::Identify(a)) => cmd_identify(&a.resolve()?, out),
        Command::SelectBranch { w, h, indicator, alloc, branches } => {
            let policy = SelectionPolicy::new(indicator, alloc, branches)?;
            let ind = resolution_indicator(h, w, indicator)?;
            let _ = writeln!(out, "{}", allocate(ind, &policy)?);
            Ok(())
        }
        Command::Report { kind, checkpoint, model } => {
            let m = match checkpoint {
                Some(p) => load_btnet(&p)?,
                None => BTNetModel::from_trunk(crate::model::build_trunk(&ModelSpec::preset(&model)?, 0)?)?,
            };
            out.push_str(&report_csv(&m, kind)?);
            Ok(())
        }
        Command::DumpFeatures { checkpoint, image, out: dir } => cmd_dump(&checkpoint, &image, &dir, out),
        Command::Reproduce { experiment, out: dir, seed, smoke } => cmd_reproduce(experiment, &dir, seed, smoke, out),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(dir: &Path, ids: usize, per_id: usize, size: usize, seed: u64, layout: Layout, n_pairs: usize, out: &mut String) -> Result<()> {
    let cfg = desk::desk_synth(ids, per_id, size, seed);
    let ds = synth_dataset(&cfg)?;
    fs::create_dir_all(dir)?;
    // the last fifth of the identities never enters the gallery
    let enrolled = ids - ids / 5;
    let mut counts = vec![0usize; ds.n_ids];
    let mut entries = Vec::with_capacity(ds.len());
    for (img, &id) in ds.images.iter().zip(&ds.labels) {
        let k = counts[id];
        counts[id] += 1;
        let split = match layout {
            Layout::Train => Split::Train,
            Layout::Verify => Split::Pairs,
            Layout::Identify if id < enrolled && k < per_id.div_ceil(2) => Split::Gallery,
            Layout::Identify => Split::Probe,
        };
        let rel = format!("id{id:04}/{k:03}.ppm");
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("relative path has a parent"))?;
        img.write(&path)?;
        entries.push(ManifestEntry { split, path: rel, identity: id, width: img.width(), height: img.height() });
    }
    let manifest = DatasetManifest { root: dir.to_path_buf(), entries };
    manifest.write(dir.join("manifest.tsv"))?;
    if layout == Layout::Verify {
        let proto = PairProtocol::sample(ds, n_pairs, seed)?;
        let pairs = proto
            .pairs
            .iter()
            .map(|&(a, b, same)| PairRecord { a: manifest.entries[a].path.clone(), b: manifest.entries[b].path.clone(), same })
            .collect();
        PairList { root: dir.to_path_buf(), pairs }.write(dir.join("pairs.tsv"))?;
    }
    let _ = writeln!(out, "wrote {} images of {ids} identities to {}", manifest.entries.len(), dir.display());
    Ok(())
}

fn read_corpus(dir: &Path, canonical: usize) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(invalid!("no .pgm/.ppm images in {}", dir.display()));
    }
    paths.iter().map(|p| resize_bilinear(&Image::read(p)?.to_gray(), canonical, canonical)).collect()
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| invalid!("config key {key} is required"))
}

fn cmd_train_trunk(cfg: &RunConfig, fixed: bool, out: &mut String) -> Result<()> {
    let spec = cfg.spec()?;
    let manifest = DatasetManifest::read(require(&cfg.train_manifest, "train_manifest")?)?;
    let data = manifest.load_dataset(Split::Train, spec.canonical_size)?;
    let result = if fixed { train_mm(&cfg.train, &spec, &data, cfg.resolution)? } else { train_trunk(&cfg.train, &spec, &data)? };
    cfg.write_resolved(&cfg.output_dir)?;
    let path = cfg.output_dir.join("trunk.btnt");
    result.trunk.to_checkpoint().save(&path)?;
    fs::write(cfg.output_dir.join("train_log.csv"), result.log.to_csv())?;
    let _ = writeln!(out, "final batch accuracy {:.4}; wrote {}", result.log.final_accuracy().unwrap_or(0.0), path.display());
    Ok(())
}

fn cmd_train_branch(cfg: &RunConfig, out: &mut String) -> Result<()> {
    let trunk = TrunkModel::from_checkpoint(&Checkpoint::load(require(&cfg.checkpoint, "checkpoint")?)?)?;
    let manifest = DatasetManifest::read(require(&cfg.train_manifest, "train_manifest")?)?;
    let data = manifest.load_dataset(Split::Train, trunk.spec.canonical_size)?;
    let result = train_branch(&trunk, cfg.resolution, cfg.regime, &cfg.train, &data)?;
    cfg.write_resolved(&cfg.output_dir)?;
    result.model.to_checkpoint().save(cfg.output_dir.join("btnet.btnt"))?;
    result.delta.save(cfg.output_dir.join("delta.btnt"))?;
    fs::write(cfg.output_dir.join("train_log.csv"), result.log.to_csv())?;
    let _ = writeln!(
        out,
        "branch {} final batch accuracy {:.4}, distill {:.5}; {} arrays in delta",
        cfg.resolution,
        result.log.final_accuracy().unwrap_or(0.0),
        result.log.final_distill().unwrap_or(0.0),
        result.delta.arrays.len()
    );
    Ok(())
}

/// A trunk or a branch model, whichever the checkpoint holds.
pub enum LoadedModel {
    Trunk(TrunkModel),
    Btnet(BTNetModel),
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path)?;
    match ck.kind.as_str() {
        "trunk" => Ok(LoadedModel::Trunk(TrunkModel::from_checkpoint(&ck)?)),
        "btnet" => Ok(LoadedModel::Btnet(BTNetModel::from_checkpoint(&ck)?)),
        other => Err(Error::Format(format!("checkpoint kind {other:?} holds no complete model"))),
    }
}

fn load_btnet(path: &Path) -> Result<BTNetModel> {
    match load_model(path)? {
        LoadedModel::Trunk(t) => BTNetModel::from_trunk(t),
        LoadedModel::Btnet(m) => Ok(m),
    }
}

fn with_embedder<R>(model: &LoadedModel, cfg: &RunConfig, f: impl FnOnce(&dyn Embedder) -> Result<R>) -> Result<R> {
    match model {
        LoadedModel::Trunk(t) => f(t),
        LoadedModel::Btnet(m) => {
            let mut policy = cfg.selection.clone();
            policy.branch_set = m.resolution_set();
            f(&Routed { model: m, policy: &policy })
        }
    }
}

fn finish_report(cfg: &RunConfig, reports: &[MetricReport], out: &mut String) -> Result<()> {
    cfg.write_resolved(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("report.csv"), MetricReport::to_csv(reports))?;
    out.push_str(&MetricReport::to_table(reports));
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, out: &mut String) -> Result<()> {
    let model = load_model(require(&cfg.checkpoint, "checkpoint")?)?;
    let list = PairList::read(require(&cfg.pairs, "pairs")?)?;
    let s = match &model {
        LoadedModel::Trunk(t) => t.spec.canonical_size,
        LoadedModel::Btnet(m) => m.spec().canonical_size,
    };
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut images = Vec::new();
    for p in &list.pairs {
        for path in [p.a.as_str(), p.b.as_str()] {
            if !index.contains_key(path) {
                index.insert(path, images.len());
                images.push(resize_bilinear(&Image::read(list.root.join(path))?, s, s)?);
            }
        }
    }
    let mut reports = Vec::new();
    for &(r1, r2) in &cfg.settings {
        let (ea, eb) = with_embedder(&model, cfg, |e| Ok((e.embed_at(&images, r1)?, e.embed_at(&images, r2)?)))?;
        let scored: Vec<ScoredPair> =
            list.pairs.iter().map(|p| ScoredPair { score: cosine(&ea[index[p.a.as_str()]], &eb[index[p.b.as_str()]]), same: p.same }).collect();
        let mut report = MetricReport::new(format!("{r1}&{r2}")).with_accuracy(verification_accuracy(&scored)? / 100.0);
        let genuine: Vec<f64> = scored.iter().filter(|p| p.same).map(|p| p.score).collect();
        let impostor: Vec<f64> = scored.iter().filter(|p| !p.same).map(|p| p.score).collect();
        for &far in &cfg.far {
            report.add_tar(far, tar_at_far(&genuine, &impostor, far)?);
        }
        report.validate()?;
        reports.push(report);
    }
    finish_report(cfg, &reports, out)
}

fn cmd_identify(cfg: &RunConfig, out: &mut String) -> Result<()> {
    let model = load_model(require(&cfg.checkpoint, "checkpoint")?)?;
    let manifest = DatasetManifest::read(require(&cfg.eval_manifest, "eval_manifest")?)?;
    let s = match &model {
        LoadedModel::Trunk(t) => t.spec.canonical_size,
        LoadedModel::Btnet(m) => m.spec().canonical_size,
    };
    let load = |split| -> Result<Vec<(Image, usize)>> {
        manifest.load_images(split)?.into_iter().map(|(i, id)| Ok((resize_bilinear(&i, s, s)?, id))).collect()
    };
    let (gallery, probes) = (load(Split::Gallery)?, load(Split::Probe)?);
    let mut reports = Vec::new();
    for &(r1, r2) in &cfg.settings {
        let report = with_embedder(&model, cfg, |e| identify(&gallery, &probes, e, r1, e, r2, cfg.rank, &cfg.fpir))?;
        report.validate()?;
        reports.push(report);
    }
    finish_report(cfg, &reports, out)
}

pub const PARAMS_HEADER: &str = "resolution,branch_weights,branch_bn,trunk_bn,shared_weights,branch_plus_bn,full_finetune,fraction";
pub const FLOPS_HEADER: &str = "resolution,flops";

/// One row per branch the model carries.
pub fn report_csv(model: &BTNetModel, kind: ReportKind) -> Result<String> {
    let mut csv = String::new();
    match kind {
        ReportKind::Params => {
            csv.push_str(PARAMS_HEADER);
            csv.push('\n');
            for &r in model.branches.keys() {
                let b = param_breakdown(model, r)?;
                let _ = writeln!(
                    csv,
                    "{r},{},{},{},{},{},{},{:.4}",
                    b.branch_weights,
                    b.branch_bn,
                    b.trunk_bn,
                    b.shared_weights,
                    b.branch_plus_bn(),
                    b.full_finetune,
                    b.fraction()
                );
            }
        }
        ReportKind::Flops => {
            csv.push_str(FLOPS_HEADER);
            csv.push('\n');
            for &r in model.branches.keys() {
                let _ = writeln!(csv, "{r},{}", count_flops(model, r)?);
            }
        }
    }
    Ok(csv)
}

/// Tiles `C x h x w` channels into a near-square grid, each channel
/// min-max normalized.
pub fn feature_grid(data: &[f32], c: usize, h: usize, w: usize) -> Result<Image> {
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut grid = vec![0.0f32; gh * gw];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (oy, ox) = ((ch / cols) * (h + 1), (ch % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                grid[(oy + y) * gw + ox + x] = (plane[y * w + x] - lo) / span;
            }
        }
    }
    Image::new(gh, gw, 1, grid)
}

fn cmd_dump(checkpoint: &Path, image: &Path, dir: &Path, out: &mut String) -> Result<()> {
    let model = load_btnet(checkpoint)?;
    let s = model.spec().canonical_size;
    let hr = resize_bilinear(&Image::read(image)?, s, s)?;
    fs::create_dir_all(dir)?;
    for &r in &model.spec().branch_resolutions {
        let tap = model.trunk.tap_feature(&Image::batch(std::slice::from_ref(&hr))?, r)?;
        let shape = tap.shape().to_vec();
        let path = dir.join(format!("tap{r}.pgm"));
        feature_grid(tap.data(), shape[1], shape[2], shape[3])?.write(&path)?;
        let _ = writeln!(out, "{}", path.display());
        if let Ok(branch) = model.branch(r) {
            let mut g = Graph::new();
            let x = g.constant(Image::batch(&[resize_bilinear(&hr, r, r)?])?)?;
            let z = branch.forward_infer(&mut g, x, &mut Binder::frozen())?;
            let t = g.tensor(z);
            let path = dir.join(format!("branch{r}.pgm"));
            feature_grid(t.data(), shape[1], r, r)?.write(&path)?;
            let _ = writeln!(out, "{}", path.display());
        }
    }
    Ok(())
}

fn cmd_reproduce(experiment: Experiment, dir: &Path, seed: u64, smoke: bool, out: &mut String) -> Result<()> {
    fs::create_dir_all(dir)?;
    match experiment {
        Experiment::Table1Gains => {
            let cells = table1::recompute_gains()?;
            let csv = table1::gains_csv(&cells);
            fs::write(dir.join("table1_gains.csv"), &csv)?;
            out.push_str(&csv);
            let bad = cells.iter().filter(|c| !c.within_tolerance()).count();
            let _ = writeln!(out, "{} of {} gain cells within tolerance", cells.len() - bad, cells.len());
            if bad > 0 {
                return Err(invalid!("{bad} gain cells differ from the published values"));
            }
        }
        Experiment::Fig1Curve => {
            let images = texture_corpus(24, 112, seed)?;
            let curve = error_curve(&images, &[7, 14, 28, 56], 112)?;
            fs::write(dir.join("fig1_curve.csv"), curve.to_csv())?;
            out.push_str(&curve.to_csv());
        }
        Experiment::Baselines | Experiment::Table3Ladder => {
            let plan = if smoke { DeskPlan::smoke(seed) } else { DeskPlan::standard(seed) };
            let store = ArtifactStore::new(dir.join("artifacts"));
            let proto = plan.protocol()?;
            let b = desk::baselines(&plan, &store)?;
            if experiment == Experiment::Baselines {
                let cells = desk::baseline_table(&plan, &b, &proto)?;
                let csv = desk::accuracy_csv(&cells);
                fs::write(dir.join("baselines.csv"), &csv)?;
                out.push_str(&csv);
            } else {
                let rungs = desk::ladder(&plan, &b.mr, &proto, &store)?;
                let csv = desk::ladder_csv(&rungs);
                fs::write(dir.join("table3_ladder.csv"), &csv)?;
                out.push_str(&csv);
                for (what, ok) in desk::ladder_checks(&rungs) {
                    let _ = writeln!(out, "{} {what}", if ok { "ok  " } else { "FAIL" });
                }
            }
        }
    }
    Ok(())
}

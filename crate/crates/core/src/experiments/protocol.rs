//! Cross-resolution verification on held-out identities.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::data::{synth_dataset, Dataset, SynthConfig};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    auc_tpir, cosine, roc_auc, verification_accuracy, IdentificationScores, MetricReport, Probe, ScoredPair, Template,
};
use crate::image::Image;
use crate::model::{BTNetModel, TrunkModel};
use crate::resample::{degrade, resize_bilinear};
use crate::rng::substream;
use crate::select::{prepare_input, SelectionPolicy};

/// Maps canonical-size images to unit embeddings as seen at resolution `r`.
pub trait Embedder {
    fn canonical(&self) -> usize;

    fn embed_at(&self, images: &[Image], r: usize) -> Result<Vec<Vec<f32>>>;
}

/// Low resolutions reach a trunk by bilinear down- then up-sampling.
impl Embedder for TrunkModel {
    fn canonical(&self) -> usize {
        self.spec.canonical_size
    }

    fn embed_at(&self, images: &[Image], r: usize) -> Result<Vec<Vec<f32>>> {
        if r == self.canonical() {
            return self.embed(images);
        }
        let degraded = images.iter().map(|i| degrade(i, r)).collect::<Result<Vec<_>>>()?;
        self.embed(&degraded)
    }
}

/// Routes `r x r` inputs through a selection policy: the native
/// low-resolution image is resized to the chosen branch, and the canonical
/// size without its own branch falls back to the trunk.
#[derive(Debug, Clone, Copy)]
pub struct Routed<'a> {
    pub model: &'a BTNetModel,
    pub policy: &'a SelectionPolicy,
}

impl Routed<'_> {
    /// Embeds images already at their native size.
    pub fn embed_native(&self, images: &[Image]) -> Result<Vec<Vec<f32>>> {
        let s = self.model.spec().canonical_size;
        let mut out = Vec::with_capacity(images.len());
        // batch consecutive images that share a branch
        let mut start = 0;
        while start < images.len() {
            let b = self.policy.select(images[start].height(), images[start].width())?;
            let mut end = start + 1;
            while end < images.len() && self.policy.select(images[end].height(), images[end].width())? == b {
                end += 1;
            }
            let inputs = images[start..end].iter().map(|i| prepare_input(i, b)).collect::<Result<Vec<_>>>()?;
            if b == s && !self.model.branches.contains_key(&b) {
                out.extend(self.model.trunk.embed(&inputs)?);
            } else {
                out.extend(self.model.embed(&inputs, b)?);
            }
            start = end;
        }
        Ok(out)
    }
}

impl Embedder for Routed<'_> {
    fn canonical(&self) -> usize {
        self.model.spec().canonical_size
    }

    fn embed_at(&self, images: &[Image], r: usize) -> Result<Vec<Vec<f32>>> {
        if r == self.canonical() {
            return self.embed_native(images);
        }
        let small = images.iter().map(|i| resize_bilinear(i, r, r)).collect::<Result<Vec<_>>>()?;
        self.embed_native(&small)
    }
}

impl BTNetModel {
    /// Branch resolutions plus the canonical size, ascending.
    pub fn resolution_set(&self) -> Vec<usize> {
        let mut set: Vec<usize> = self.branches.keys().copied().collect();
        let s = self.spec().canonical_size;
        if !set.contains(&s) {
            set.push(s);
        }
        set.sort_unstable();
        set
    }

    /// The default `max + ceil` policy over [`BTNetModel::resolution_set`].
    pub fn default_policy(&self) -> SelectionPolicy {
        SelectionPolicy::default_for(self.resolution_set()).expect("resolution set is ascending and non-empty")
    }
}

/// Routes with the default policy.
impl Embedder for BTNetModel {
    fn canonical(&self) -> usize {
        self.spec().canonical_size
    }

    fn embed_at(&self, images: &[Image], r: usize) -> Result<Vec<Vec<f32>>> {
        let policy = self.default_policy();
        Routed { model: self, policy: &policy }.embed_at(images, r)
    }
}

/// Index pairs into an evaluation set, alternating genuine and impostor.
#[derive(Debug, Clone, PartialEq)]
pub struct PairProtocol {
    pub data: Dataset,
    pub pairs: Vec<(usize, usize, bool)>,
}

impl PairProtocol {
    /// `n_pairs` pairs over `data`, half genuine, drawn from `seed`.
    pub fn sample(data: Dataset, n_pairs: usize, seed: u64) -> Result<Self> {
        data.validate()?;
        let mut by_id: Vec<Vec<usize>> = vec![Vec::new(); data.n_ids];
        data.labels.iter().enumerate().for_each(|(i, &l)| by_id[l].push(i));
        if by_id.iter().any(|v| v.len() < 2) {
            return Err(invalid!("every evaluation identity needs at least 2 images"));
        }
        let mut rng = substream(seed, "eval.pairs");
        let n = data.n_ids;
        let pairs = (0..n_pairs)
            .map(|k| {
                if k % 2 == 0 {
                    let members = &by_id[rng.random_range(0..n)];
                    let a = rng.random_range(0..members.len());
                    let b = (a + rng.random_range(1..members.len())) % members.len();
                    (members[a], members[b], true)
                } else {
                    let ia = rng.random_range(0..n);
                    let ib = (ia + rng.random_range(1..n)) % n;
                    let a = by_id[ia][rng.random_range(0..by_id[ia].len())];
                    let b = by_id[ib][rng.random_range(0..by_id[ib].len())];
                    (a, b, false)
                }
            })
            .collect();
        Ok(Self { data, pairs })
    }

    /// Synthetic held-out identities and pairs.
    pub fn synthetic(cfg: &SynthConfig, n_pairs: usize) -> Result<Self> {
        Self::sample(synth_dataset(cfg)?, n_pairs, cfg.seed)
    }

    /// Cosine scores of every pair, first side embedded by `a` at `r1`,
    /// second side by `b` at `r2`.
    pub fn scores(&self, a: &dyn Embedder, r1: usize, b: &dyn Embedder, r2: usize) -> Result<Vec<ScoredPair>> {
        let ea = a.embed_at(&self.data.images, r1)?;
        let eb = b.embed_at(&self.data.images, r2)?;
        Ok(self.pairs.iter().map(|&(i, j, same)| ScoredPair { score: cosine(&ea[i], &eb[j]), same }).collect())
    }

    /// Ten-fold verification accuracy in percent.
    pub fn accuracy(&self, a: &dyn Embedder, r1: usize, b: &dyn Embedder, r2: usize) -> Result<f64> {
        verification_accuracy(&self.scores(a, r1, b, r2)?)
    }

    /// Accuracy with one model on both sides.
    pub fn accuracy_same_model(&self, m: &dyn Embedder, r1: usize, r2: usize) -> Result<f64> {
        self.accuracy(m, r1, m, r2)
    }

    /// ROC-AUC of genuine against impostor scores.
    pub fn roc_auc(&self, a: &dyn Embedder, r1: usize, b: &dyn Embedder, r2: usize) -> Result<f64> {
        let s = self.scores(a, r1, b, r2)?;
        let genuine: Vec<f64> = s.iter().filter(|p| p.same).map(|p| p.score).collect();
        let impostor: Vec<f64> = s.iter().filter(|p| !p.same).map(|p| p.score).collect();
        roc_auc(&genuine, &impostor)
    }
}

/// Parses `"32&8"` into `(32, 8)`.
pub fn parse_setting(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once('&').ok_or_else(|| invalid!("setting {s:?} is not of the form r1&r2"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad resolution {v:?} in {s:?}")));
    Ok((p(a)?, p(b)?))
}

/// Open-set identification from a gallery at `r_gallery` and probes at
/// `r_probe`. Gallery images of an identity are pooled into one template;
/// probes whose identity has no gallery template are non-mated.
#[allow(clippy::too_many_arguments)]
pub fn identify(
    gallery: &[(Image, usize)],
    probes: &[(Image, usize)],
    gallery_model: &dyn Embedder,
    r_gallery: usize,
    probe_model: &dyn Embedder,
    r_probe: usize,
    rank: usize,
    fpirs: &[f64],
) -> Result<MetricReport> {
    let g_imgs: Vec<Image> = gallery.iter().map(|(i, _)| i.clone()).collect();
    let p_imgs: Vec<Image> = probes.iter().map(|(i, _)| i.clone()).collect();
    let ge = gallery_model.embed_at(&g_imgs, r_gallery)?;
    let pe = probe_model.embed_at(&p_imgs, r_probe)?;
    let mut members: BTreeMap<usize, Vec<Vec<f32>>> = BTreeMap::new();
    for ((_, id), e) in gallery.iter().zip(ge) {
        members.entry(*id).or_default().push(e);
    }
    let templates = members.into_iter().map(|(id, m)| Template::new(id, m)).collect::<Result<Vec<_>>>()?;
    let gallery_probes: Vec<Probe<'_>> = templates.iter().map(|t| Probe { embedding: &t.aggregated, identity: t.identity }).collect();
    let mut mated = Vec::new();
    let mut non_mated: Vec<&[f32]> = Vec::new();
    for ((_, id), e) in probes.iter().zip(&pe) {
        if templates.iter().any(|t| t.identity == *id) {
            mated.push(Probe { embedding: e, identity: *id });
        } else {
            non_mated.push(e);
        }
    }
    let scores = IdentificationScores::new(&mated, &non_mated, &gallery_probes)?;
    let mut report = MetricReport::new(format!("{r_gallery}&{r_probe}"));
    for &f in fpirs {
        report.add_tpir(f, scores.tpir(rank, f)?);
    }
    let grid: Vec<f64> = (0..=AUC_GRID).map(|i| i as f64 / AUC_GRID as f64).collect();
    report.auc = Some(auc_tpir(&scores.curve(rank, &grid)?)?);
    Ok(report)
}

/// FPIR steps of the AUC curve over `[0, 1]`.
pub const AUC_GRID: usize = 100;

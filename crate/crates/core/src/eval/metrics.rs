//! Verification and open-set identification metrics.

use crate::error::{invalid, Error, Result};

pub const DEFAULT_FOLDS: usize = 10;

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity; exact for unit vectors, normalized otherwise.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// A scored pair and whether both sides share an identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub same: bool,
}

/// Threshold maximizing accuracy of `score >= threshold <=> same` on
/// `pairs`, with the accuracy it achieves. Ties go to the lowest threshold.
pub fn best_threshold(pairs: &[ScoredPair]) -> (f64, f64) {
    let mut sorted: Vec<ScoredPair> = pairs.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let n = sorted.len();
    // threshold below everything: every pair predicted same
    let mut correct = sorted.iter().filter(|p| p.same).count();
    let (mut best, mut best_thr) = (correct, f64::NEG_INFINITY);
    let mut i = 0;
    while i < n {
        let s = sorted[i].score;
        while i < n && sorted[i].score == s {
            correct = if sorted[i].same { correct - 1 } else { correct + 1 };
            i += 1;
        }
        if correct > best {
            best = correct;
            best_thr = if i < n { (s + sorted[i].score) / 2.0 } else { f64::INFINITY };
        }
    }
    (best_thr, best as f64 / n.max(1) as f64)
}

/// `k`-fold verification accuracy in percent: each fold is scored with the
/// threshold fitted on the other folds. Folds are contiguous blocks.
pub fn verification_accuracy_folds(pairs: &[ScoredPair], folds: usize) -> Result<f64> {
    if folds < 2 || pairs.len() < folds {
        return Err(invalid!("{} pairs cannot fill {folds} non-empty folds", pairs.len()));
    }
    let n = pairs.len();
    let bounds: Vec<usize> = (0..=folds).map(|f| f * n / folds).collect();
    let mut total = 0.0;
    for f in 0..folds {
        let (lo, hi) = (bounds[f], bounds[f + 1]);
        let train: Vec<ScoredPair> = pairs[..lo].iter().chain(&pairs[hi..]).copied().collect();
        let (thr, _) = best_threshold(&train);
        let test = &pairs[lo..hi];
        let correct = test.iter().filter(|p| (p.score >= thr) == p.same).count();
        total += correct as f64 / test.len() as f64;
    }
    Ok(100.0 * total / folds as f64)
}

/// Ten-fold verification accuracy in percent.
pub fn verification_accuracy(pairs: &[ScoredPair]) -> Result<f64> {
    verification_accuracy_folds(pairs, DEFAULT_FOLDS)
}

/// Scores embedding pairs and runs [`verification_accuracy`].
pub fn verification_accuracy_embeddings(pairs: &[(&[f32], &[f32], bool)]) -> Result<f64> {
    let scored: Vec<ScoredPair> = pairs.iter().map(|(a, b, same)| ScoredPair { score: cosine(a, b), same: *same }).collect();
    verification_accuracy(&scored)
}

fn next_up(x: f64) -> f64 {
    x.next_up()
}

/// Smallest threshold that accepts at most `floor(rate * n)` of `negatives`
/// under `score >= threshold`.
fn conservative_threshold(negatives: &[f64], rate: f64) -> f64 {
    let mut sorted = negatives.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (rate * sorted.len() as f64).floor() as usize;
    match sorted.get(k) {
        Some(&s) => next_up(s),
        None => f64::NEG_INFINITY,
    }
}

/// True accept rate at a false accept rate. The threshold is just above the
/// `(floor(far * N) + 1)`-th highest impostor score, so the realized FAR
/// never exceeds the target; with a single impostor it sits just above it.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(invalid!("TAR@FAR needs genuine and impostor scores"));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(invalid!("FAR must lie in (0, 1), got {far}"));
    }
    let thr = conservative_threshold(impostor, far);
    Ok(genuine.iter().filter(|&&s| s >= thr).count() as f64 / genuine.len() as f64)
}

/// A probe with its true identity.
#[derive(Debug, Clone, Copy)]
pub struct Probe<'a> {
    pub embedding: &'a [f32],
    pub identity: usize,
}

/// Gallery scores of every probe, ready for any `(rank, fpir)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationScores {
    /// `(rank of the mate, best gallery score)` per mated probe, rank from 1.
    pub mated: Vec<(usize, f64)>,
    /// Best gallery score per non-mated probe.
    pub non_mated_top: Vec<f64>,
}

impl IdentificationScores {
    pub fn new(mated: &[Probe<'_>], non_mated: &[&[f32]], gallery: &[Probe<'_>]) -> Result<Self> {
        if gallery.is_empty() {
            return Err(invalid!("empty gallery"));
        }
        let mut ids: Vec<usize> = gallery.iter().map(|g| g.identity).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid!("gallery identities must be distinct"));
        }
        let top = |e: &[f32]| gallery.iter().map(|g| cosine(e, g.embedding)).fold(f64::NEG_INFINITY, f64::max);
        let mated = mated
            .iter()
            .map(|p| {
                let scores: Vec<(usize, f64)> = gallery.iter().map(|g| (g.identity, cosine(p.embedding, g.embedding))).collect();
                let mate = scores
                    .iter()
                    .find(|(id, _)| *id == p.identity)
                    .map(|s| s.1)
                    .ok_or_else(|| invalid!("mated probe identity {} is not in the gallery", p.identity))?;
                let rank = 1 + scores.iter().filter(|(_, s)| *s > mate).count();
                let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                Ok((rank, best))
            })
            .collect::<Result<Vec<_>>>()?;
        let non_mated_top = non_mated.iter().map(|e| top(e)).collect();
        Ok(Self { mated, non_mated_top })
    }

    /// Threshold on non-mated top scores giving at most the target FPIR.
    pub fn threshold(&self, fpir: f64) -> Result<f64> {
        if self.non_mated_top.is_empty() {
            return Err(invalid!("TPIR@FPIR needs non-mated probes"));
        }
        if !(0.0..=1.0).contains(&fpir) {
            return Err(invalid!("FPIR must lie in [0, 1], got {fpir}"));
        }
        Ok(conservative_threshold(&self.non_mated_top, fpir))
    }

    pub fn tpir(&self, rank: usize, fpir: f64) -> Result<f64> {
        let thr = self.threshold(fpir)?;
        Ok(self.tpir_at_threshold(rank, thr))
    }

    pub fn tpir_at_threshold(&self, rank: usize, threshold: f64) -> f64 {
        if self.mated.is_empty() {
            return 0.0;
        }
        let hits = self.mated.iter().filter(|(r, best)| *r <= rank && *best >= threshold).count();
        hits as f64 / self.mated.len() as f64
    }

    /// `(fpir, tpir)` at each requested FPIR.
    pub fn curve(&self, rank: usize, fpirs: &[f64]) -> Result<Vec<(f64, f64)>> {
        fpirs.iter().map(|&f| Ok((f, self.tpir(rank, f)?))).collect()
    }
}

/// Open-set TPIR at rank `rank` and target FPIR.
pub fn tpir_at_fpir(mated: &[Probe<'_>], non_mated: &[&[f32]], gallery: &[Probe<'_>], rank: usize, fpir: f64) -> Result<f64> {
    IdentificationScores::new(mated, non_mated, gallery)?.tpir(rank, fpir)
}

/// Trapezoidal area under a TPIR-vs-FPIR curve; FPIRs must be ascending.
pub fn auc_tpir(curve: &[(f64, f64)]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(invalid!("AUC needs at least two curve points"));
    }
    if curve.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(invalid!("curve FPIRs must be ascending"));
    }
    Ok(curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum())
}

/// Area under the ROC of same-identity vs different-identity scores, with
/// ties counted half.
pub fn roc_auc(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(invalid!("ROC-AUC needs genuine and impostor scores"));
    }
    let mut all: Vec<(f64, bool)> = genuine.iter().map(|&s| (s, true)).chain(impostor.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U with mid-ranks
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += all[i..j].iter().filter(|p| p.1).count() as f64 * mid;
        i = j;
    }
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    Ok((rank_sum - ng * (ng + 1.0) / 2.0) / (ng * ni))
}

fn relative_gain(m: f64, m_hr: f64, m_ref: f64, what: &str) -> Result<f64> {
    let denom = (m_ref - m_hr).abs();
    if denom == 0.0 {
        return Err(Error::Undefined(format!("{what} gain with equal baselines")));
    }
    Ok((m - m_hr) / denom)
}

/// `(m - m_hr) / |m_mr - m_hr|`.
pub fn cross_res_gain(m: f64, m_hr: f64, m_mr: f64) -> Result<f64> {
    relative_gain(m, m_hr, m_mr, "cross-resolution")
}

/// `(m - m_hr) / |m_r - m_hr|`.
pub fn same_res_gain(m: f64, m_hr: f64, m_r: f64) -> Result<f64> {
    relative_gain(m, m_hr, m_r, "same-resolution")
}

/// A gain formatted to two decimals with sign, or `-` when undefined.
pub fn format_gain(g: &Result<f64>) -> String {
    match g {
        Ok(v) => format!("{v:+.2}"),
        Err(_) => "-".into(),
    }
}

/// Mean of the members, normalized to unit length.
pub fn aggregate(members: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = members.first().ok_or_else(|| invalid!("cannot aggregate an empty template"))?;
    let d = first.len();
    if members.iter().any(|m| m.len() != d) {
        return Err(invalid!("template members differ in dimension"));
    }
    let mut mean = vec![0.0f64; d];
    for m in members {
        mean.iter_mut().zip(m).for_each(|(a, &v)| *a += v as f64);
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(invalid!("template mean is the zero vector"));
    }
    Ok(mean.iter().map(|v| (v / norm) as f32).collect())
}

/// Embeddings of one identity pooled into a unit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub identity: usize,
    pub members: Vec<Vec<f32>>,
    pub aggregated: Vec<f32>,
}

impl Template {
    pub fn new(identity: usize, members: Vec<Vec<f32>>) -> Result<Self> {
        let aggregated = aggregate(&members)?;
        Ok(Self { identity, members, aggregated })
    }
}

//! Procedural identities and textures.

use std::f32::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::rng::substream;

/// Knobs of the synthetic identity generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub per_id: usize,
    pub size: usize,
    pub seed: u64,
    /// Cosine components per channel of an identity pattern.
    pub components: usize,
    /// Largest spatial frequency, in cycles per image.
    pub max_freq: usize,
    /// Amplitude falloff exponent over frequency.
    pub falloff: f32,
    /// Maximum shift in pixels, uniform in each direction.
    pub shift: f32,
    /// Relative contrast jitter.
    pub contrast: f32,
    pub noise: f32,
    /// Half-width of the per-channel mean offset around 0.5.
    pub offset_jitter: f32,
}

impl SynthConfig {
    pub fn new(n_ids: usize, per_id: usize, size: usize, seed: u64) -> Self {
        Self {
            n_ids,
            per_id,
            size,
            seed,
            components: 10,
            max_freq: 8,
            falloff: 0.5,
            shift: 1.0,
            contrast: 0.2,
            noise: 0.04,
            offset_jitter: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Wave {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: f32,
}

/// One identity: a fixed smooth pattern per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityPattern {
    channels: Vec<Vec<Wave>>,
    offset: [f32; 3],
}

impl IdentityPattern {
    pub fn random<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let fmax = cfg.max_freq as i32;
        let channels = (0..3)
            .map(|_| {
                let mut waves: Vec<Wave> = (0..cfg.components)
                    .map(|_| {
                        let (fx, fy) = loop {
                            let f = (rng.random_range(-fmax..=fmax), rng.random_range(0..=fmax));
                            if f != (0, 0) {
                                break f;
                            }
                        };
                        let radius = ((fx * fx + fy * fy) as f32).sqrt();
                        Wave { fx: fx as f32, fy: fy as f32, phase: rng.random_range(0.0..TAU), amp: radius.powf(-cfg.falloff) }
                    })
                    .collect();
                let total: f32 = waves.iter().map(|w| w.amp).sum();
                waves.iter_mut().for_each(|w| w.amp *= 0.8 / total);
                waves
            })
            .collect();
        let j = cfg.offset_jitter.max(0.0);
        let offset = [0; 3].map(|_| 0.5 + rng.random_range(-j..=j));
        Self { channels, offset }
    }

    /// Renders at `size x size` with a sub-pixel shift and contrast gain.
    pub fn render(&self, size: usize, dx: f32, dy: f32, gain: f32) -> Result<Image> {
        let n = size as f32;
        Image::from_fn(size, size, 3, |c, y, x| {
            let (u, v) = ((x as f32 + 0.5 + dx) / n, (y as f32 + 0.5 + dy) / n);
            let s: f32 = self.channels[c].iter().map(|w| w.amp * (TAU * (w.fx * u + w.fy * v) + w.phase).cos()).sum();
            self.offset[c] + gain * s * 0.5
        })
    }
}

/// Images with identity labels, all at the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_ids: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn size(&self) -> usize {
        self.images.first().map_or(0, |i| i.height())
    }

    /// Checks labels are dense from zero and images share one square size.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() || self.images.is_empty() {
            return Err(invalid!("dataset needs one label per image and at least one image"));
        }
        let s = self.size();
        if self.images.iter().any(|i| i.height() != s || i.width() != s) {
            return Err(invalid!("dataset images must all be {s}x{s}"));
        }
        let mut seen = vec![false; self.n_ids];
        for &l in &self.labels {
            *seen.get_mut(l).ok_or_else(|| invalid!("label {l} out of range for {} identities", self.n_ids))? = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid!("identity labels must be dense from 0"));
        }
        Ok(())
    }
}

/// Samples of `cfg.n_ids` random identities, `per_id` each, grouped by
/// identity.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_ids < 2 || cfg.per_id == 0 {
        return Err(invalid!("synthetic data needs at least 2 identities and 1 sample each"));
    }
    let mut id_rng = substream(cfg.seed, "data.identities");
    let mut rng = substream(cfg.seed, "data.samples");
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).map_err(|e| invalid!("noise: {e}"))?;
    let mut images = Vec::with_capacity(cfg.n_ids * cfg.per_id);
    let mut labels = Vec::with_capacity(cfg.n_ids * cfg.per_id);
    for id in 0..cfg.n_ids {
        let pattern = IdentityPattern::random(cfg, &mut id_rng);
        for _ in 0..cfg.per_id {
            let dx = rng.random_range(-cfg.shift..=cfg.shift);
            let dy = rng.random_range(-cfg.shift..=cfg.shift);
            let gain = 1.0 + rng.random_range(-cfg.contrast..=cfg.contrast);
            let clean = pattern.render(cfg.size, dx, dy, gain)?;
            let data = clean.data().iter().map(|v| v + noise.sample(&mut rng)).collect();
            images.push(Image::new(cfg.size, cfg.size, 3, data)?);
            labels.push(id);
        }
    }
    Ok(Dataset { images, labels, n_ids: cfg.n_ids })
}

/// Grayscale textures with a `1/f` amplitude spectrum, used as a natural
/// image stand-in for the interpolation-error analysis.
pub fn texture_corpus(n: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    let mut rng = substream(seed, "data.textures");
    let fmax = (size / 2) as i32;
    (0..n)
        .map(|_| {
            let waves: Vec<Wave> = (0..96)
                .map(|_| {
                    let (fx, fy) = loop {
                        let f = (rng.random_range(-fmax..=fmax), rng.random_range(0..=fmax));
                        if f != (0, 0) {
                            break f;
                        }
                    };
                    let radius = ((fx * fx + fy * fy) as f32).sqrt();
                    Wave { fx: fx as f32, fy: fy as f32, phase: rng.random_range(0.0..TAU), amp: 1.0 / radius }
                })
                .collect();
            let total: f32 = waves.iter().map(|w| w.amp).sum();
            let pattern = IdentityPattern {
                channels: vec![waves.iter().map(|w| Wave { amp: w.amp * 0.9 / total, ..*w }).collect(); 3],
                offset: [0.5; 3],
            };
            Ok(pattern.render(size, 0.0, 0.0, 1.0)?.to_gray())
        })
        .collect()
}

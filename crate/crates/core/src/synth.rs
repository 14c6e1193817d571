//! Synthetic crowd scenes: dot annotations on a jittered grid, rendered as
//! bright Gaussian blobs on a noisy background.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::DotAnnotation;
use crate::error::{DenetError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_dots: usize,
    pub max_dots: usize,
    /// Grid pitch in pixels; each occupied cell holds one head.
    pub spacing: usize,
    /// Maximum offset of a head from its cell centre.
    pub jitter: f64,
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub background: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            min_dots: 20,
            max_dots: 60,
            spacing: 8,
            jitter: 0.5,
            blob_sigma: 1.2,
            blob_amplitude: 0.8,
            background: 0.15,
            noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn cells(&self) -> (usize, usize) {
        (self.width / self.spacing.max(1), self.height / self.spacing.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.spacing == 0 {
            return Err(DenetError::Config("synth extents and spacing must be positive".into()));
        }
        if self.min_dots > self.max_dots {
            return Err(DenetError::Config(format!("synth.min_dots ({}) exceeds synth.max_dots ({})", self.min_dots, self.max_dots)));
        }
        let (cx, cy) = self.cells();
        if self.max_dots > cx * cy {
            return Err(DenetError::Config(format!(
                "synth.max_dots ({}) exceeds the {cx}x{cy} grid of {}-pixel cells",
                self.max_dots, self.spacing
            )));
        }
        if !(0.0..self.spacing as f64 / 2.0).contains(&self.jitter) {
            return Err(DenetError::Config("synth.jitter must be in [0, spacing / 2)".into()));
        }
        if self.blob_sigma.is_nan() || self.blob_sigma <= 0.0 || self.noise < 0.0 {
            return Err(DenetError::Config("synth.blob_sigma must be positive and synth.noise non-negative".into()));
        }
        Ok(())
    }
}

pub struct Scene {
    pub annotation: DotAnnotation,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
}

fn scene(id: String, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
    let (cx, cy) = cfg.cells();
    let n = rng.random_range(cfg.min_dots..=cfg.max_dots);
    let mut cells = index::sample(rng, cx * cy, n).into_vec();
    cells.sort_unstable();
    let s = cfg.spacing as f64;
    let points: Vec<(f64, f64)> = cells
        .into_iter()
        .map(|c| {
            let (gx, gy) = ((c % cx) as f64, (c / cx) as f64);
            let mut j = || if cfg.jitter > 0.0 { rng.random_range(-cfg.jitter..cfg.jitter) } else { 0.0 };
            ((gx + 0.5) * s + j(), (gy + 0.5) * s + j())
        })
        .collect();
    let annotation = DotAnnotation::new(id, cfg.width, cfg.height, points);
    let image = render(&annotation, cfg, rng);
    Scene { annotation, image }
}

/// Draws one blob per dot over a noisy, slightly tinted background.
pub fn render(ann: &DotAnnotation, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let (w, h) = (ann.width, ann.height);
    let mut blobs = vec![0.0; w * h];
    let inv = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);
    let r = (3.0 * cfg.blob_sigma).ceil() as i64;
    for &(x, y) in &ann.points {
        let (px, py) = (x.floor() as i64, y.floor() as i64);
        for yy in (py - r).max(0)..=(py + r).min(h as i64 - 1) {
            for xx in (px - r).max(0)..=(px + r).min(w as i64 - 1) {
                let (dx, dy) = (xx as f64 + 0.5 - x, yy as f64 + 0.5 - y);
                blobs[yy as usize * w + xx as usize] += cfg.blob_amplitude * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    let tint = [1.0, 0.8, 0.6];
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (w * h), i % (w * h));
        let noise = if cfg.noise > 0.0 { rng.random_range(-cfg.noise..cfg.noise) } else { 0.0 };
        (cfg.background * tint[c] + blobs[p] + noise).clamp(0.0, 1.0)
    })
}

/// `n` scenes named `synth_000`, `synth_001`, ... from one seeded stream.
pub fn generate(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|i| scene(format!("synth_{i:03}"), cfg, &mut rng)).collect())
}

//! Detection ingestion, masking and count fusion.
//!
//! Detections come from files (or [`mock_detect`]), never from a model run
//! in-process. Retained detections are counted, their regions are zeroed in
//! the image and their dots are dropped from the annotation; the density
//! network only sees what is left.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::DotAnnotation;
use crate::error::{DenetError, Result};
use crate::tensor::Tensor;

pub const PERSON: &str = "person";

/// Column-major run lengths over an `h x w` grid, starting with background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rle {
    /// `[h, w]`.
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl Rle {
    /// Encodes a row-major `h x w` mask.
    pub fn encode(mask: &[bool], h: usize, w: usize) -> Self {
        assert_eq!(mask.len(), h * w);
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for x in 0..w {
            for y in 0..h {
                if mask[y * w + x] != current {
                    counts.push(run);
                    current = !current;
                    run = 0;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [h, w], counts }
    }

    /// Row-major decoding; fails unless the runs cover the grid exactly.
    pub fn decode(&self) -> std::result::Result<Vec<bool>, String> {
        let [h, w] = self.size;
        let total: usize = self.counts.iter().sum();
        if total != h * w {
            return Err(format!("mask_rle runs cover {total} pixels, size {h}x{w} has {}", h * w));
        }
        let mut mask = vec![false; h * w];
        let mut idx = 0;
        for (k, &run) in self.counts.iter().enumerate() {
            if k % 2 == 1 {
                for i in idx..idx + run {
                    let (x, y) = (i / h, i % h);
                    mask[y * w + x] = true;
                }
            }
            idx += run;
        }
        Ok(mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    /// `[x0, y0, x1, y1]` in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<Rle>,
}

impl Detection {
    /// Box clamped to a `width x height` image.
    pub fn clamped(&self, width: usize, height: usize) -> [f64; 4] {
        let [x0, y0, x1, y1] = self.bbox;
        let (w, h) = (width as f64, height as f64);
        [x0.clamp(0.0, w), y0.clamp(0.0, h), x1.clamp(0.0, w), y1.clamp(0.0, h)]
    }

    pub fn center(&self) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.bbox;
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }

    /// Pixel rectangle touched by the box, `(x0, y0, w, h)`, before clipping.
    fn pixel_extent(&self) -> (i64, i64, usize, usize) {
        let [x0, y0, x1, y1] = self.bbox;
        let (px, py) = (x0.floor() as i64, y0.floor() as i64);
        (px, py, (x1.ceil() as i64 - px) as usize, (y1.ceil() as i64 - py) as usize)
    }

    fn validate(&self, width: usize, height: usize) -> std::result::Result<(), String> {
        let [x0, y0, x1, y1] = self.bbox;
        if !self.bbox.iter().all(|v| v.is_finite()) {
            return Err(format!("box {:?} has a non-finite coordinate", self.bbox));
        }
        if !(x0 < x1 && y0 < y1) {
            return Err(format!("box {:?} needs x0 < x1 and y0 < y1", self.bbox));
        }
        let [cx0, cy0, cx1, cy1] = self.clamped(width, height);
        if !(cx0 < cx1 && cy0 < cy1) {
            return Err(format!("box {:?} lies outside the {width}x{height} image", self.bbox));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} is outside [0, 1]", self.score));
        }
        if let Some(rle) = &self.mask_rle {
            rle.decode()?;
            let (_, _, bw, bh) = self.pixel_extent();
            if rle.size != [height, width] && rle.size != [bh, bw] {
                return Err(format!("mask_rle size {:?} matches neither the image [{height}, {width}] nor the box [{bh}, {bw}]", rle.size));
            }
        }
        Ok(())
    }

    /// Marks this detection's pixels in a row-major `width x height` mask.
    fn rasterize(&self, mask: &mut [bool], width: usize, height: usize) {
        let (px, py, bw, bh) = self.pixel_extent();
        let full = self.mask_rle.as_ref().filter(|r| r.size == [height, width]);
        if full.is_some() {
            let m = full.and_then(|r| r.decode().ok()).expect("validated");
            mask.iter_mut().zip(m).for_each(|(d, s)| *d |= s);
            return;
        }
        let local = self.mask_rle.as_ref().map(|r| r.decode().expect("validated"));
        for dy in 0..bh {
            for dx in 0..bw {
                let (x, y) = (px + dx as i64, py + dy as i64);
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    continue;
                }
                if local.as_ref().is_none_or(|m| m[dy * bw + dx]) {
                    mask[y as usize * width + x as usize] = true;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSet {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        DetectionSet { image_id: image_id.into(), detections: Vec::new() }
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        crate::error::from_json(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DenetError::io(path, e))?;
        Self::from_json(&text).map_err(|msg| DenetError::format(path, msg))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("detections serialize");
        std::fs::write(path, text).map_err(|e| DenetError::io(path, e))
    }

    /// Checks every detection against a `width x height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        for (i, d) in self.detections.iter().enumerate() {
            d.validate(width, height).map_err(|msg| DenetError::Input(format!("{}: detections[{i}]: {msg}", self.image_id)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub score_threshold: f64,
    /// Minimum box height as a fraction of the image height.
    pub min_box_height_frac: f64,
    pub mask_dilation_px: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { score_threshold: 0.7, min_box_height_frac: 0.10, mask_dilation_px: 2 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.score_threshold) {
            return Err(DenetError::Config(format!("fusion.score_threshold must be in (0, 1], got {}", self.score_threshold)));
        }
        if !unit(self.min_box_height_frac) {
            return Err(DenetError::Config(format!("fusion.min_box_height_frac must be in (0, 1], got {}", self.min_box_height_frac)));
        }
        Ok(())
    }
}

/// Keeps confident, large person detections, in input order.
pub fn filter_detections(ds: &DetectionSet, cfg: &FusionConfig, (width, height): (usize, usize)) -> Result<DetectionSet> {
    ds.validate(width, height)?;
    let min_h = cfg.min_box_height_frac * height as f64;
    let detections = ds
        .detections
        .iter()
        .filter(|d| {
            let [_, y0, _, y1] = d.clamped(width, height);
            d.score >= cfg.score_threshold && y1 - y0 >= min_h && d.label == PERSON
        })
        .cloned()
        .collect();
    Ok(DetectionSet { image_id: ds.image_id.clone(), detections })
}

/// An image with its detected people removed.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedScene {
    pub masked_image: Tensor,
    /// Dots outside the masked region.
    pub residual: DotAnnotation,
    pub n_d: usize,
    /// Row-major `height x width`, true where masked.
    pub region_mask: Vec<bool>,
    /// Box centres of the retained detections.
    pub detected_centers: Vec<(f64, f64)>,
}

impl MaskedScene {
    pub fn width(&self) -> usize {
        self.residual.width
    }

    pub fn height(&self) -> usize {
        self.residual.height
    }

    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.region_mask[y * self.width() + x]
    }

    pub fn n_gt(&self, original: &DotAnnotation) -> usize {
        original.count()
    }
}

/// Grows a row-major mask by `r` pixels in the Chebyshev metric.
pub fn dilate(mask: &[bool], width: usize, height: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        let row = &mask[y * width..(y + 1) * width];
        for x in 0..width {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(width - 1));
            rows[y * width + x] = row[lo..=hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(height - 1));
        for x in 0..width {
            out[y * width + x] = (lo..=hi).any(|yy| rows[yy * width + x]);
        }
    }
    out
}

/// Pixel containing `(x, y)`, clamped into the image.
pub fn pixel_of((x, y): (f64, f64), width: usize, height: usize) -> (usize, usize) {
    ((x.floor().max(0.0) as usize).min(width - 1), (y.floor().max(0.0) as usize).min(height - 1))
}

/// Zeroes the union of the (dilated) detection regions and drops the dots
/// that fall inside it. `retained` should already be filtered.
pub fn apply_masks(image: &Tensor, ann: &DotAnnotation, retained: &DetectionSet, cfg: &FusionConfig) -> Result<MaskedScene> {
    let (c, h, w) = image.chw()?;
    if (h, w) != (ann.height, ann.width) {
        return Err(DenetError::Input(format!("{}: image is {w}x{h}, annotation is {}x{}", ann.image_id, ann.width, ann.height)));
    }
    if retained.image_id != ann.image_id {
        return Err(DenetError::Input(format!("detections are for `{}`, annotation is `{}`", retained.image_id, ann.image_id)));
    }
    retained.validate(w, h)?;

    let mut raw = vec![false; h * w];
    for d in &retained.detections {
        d.rasterize(&mut raw, w, h);
    }
    let region_mask = dilate(&raw, w, h, cfg.mask_dilation_px);

    let mut masked = image.clone();
    for plane in masked.data_mut().chunks_mut(h * w).take(c) {
        for (v, &m) in plane.iter_mut().zip(&region_mask) {
            if m {
                *v = 0.0;
            }
        }
    }
    let points = ann
        .points
        .iter()
        .copied()
        .filter(|&p| {
            let (x, y) = pixel_of(p, w, h);
            !region_mask[y * w + x]
        })
        .collect();
    Ok(MaskedScene {
        masked_image: masked,
        residual: DotAnnotation::new(ann.image_id.clone(), w, h, points),
        n_d: retained.detections.len(),
        region_mask,
        detected_centers: retained.detections.iter().map(Detection::center).collect(),
    })
}

/// Detected count plus integrated residual density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub n_d: usize,
    pub n_e: f64,
    pub c: f64,
}

pub fn fuse_count(n_d: usize, pred: &Tensor) -> CountRecord {
    let n_e = pred.sum();
    CountRecord { n_d, n_e, c: n_d as f64 + n_e }
}

/// FNV-1a, used to give every image its own detection stream.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Stand-in detector: picks `floor(recall * n)` dots at random (seeded by
/// `seed` and the image id) and puts a `box_h x box_h/2` box of score 1
/// around each.
pub fn mock_detect(ann: &DotAnnotation, recall: f64, box_h: usize, seed: u64) -> Result<DetectionSet> {
    if !(0.0..=1.0).contains(&recall) {
        return Err(DenetError::Input(format!("recall must be in [0, 1], got {recall}")));
    }
    if box_h == 0 {
        return Err(DenetError::Input("mock box height must be positive".into()));
    }
    let n = ann.count();
    let k = ((recall * n as f64) + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&ann.image_id));
    let mut picked = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    picked.sort_unstable();
    let (hh, hw) = (box_h as f64 / 2.0, box_h as f64 / 4.0);
    let detections = picked
        .into_iter()
        .map(|i| {
            let (x, y) = ann.points[i];
            Detection { bbox: [x - hw, y - hh, x + hw, y + hh], score: 1.0, label: PERSON.to_string(), mask_rle: None }
        })
        .collect();
    Ok(DetectionSet { image_id: ann.image_id.clone(), detections })
}

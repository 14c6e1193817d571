//! Ground-truth density maps from head-point annotations.
//!
//! Every annotated head contributes a Gaussian bump of unit mass. The bump is
//! evaluated at pixel centres, truncated to a `±4σ` window clipped to the
//! image, and renormalised over the pixels that survive, so the map always
//! integrates to the number of annotated people.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DenetError, Result};
use crate::tensor::Tensor;

/// Head-centre dot annotations for one image, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DotAnnotation {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<(f64, f64)>,
}

impl DotAnnotation {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize, points: Vec<(f64, f64)>) -> Self {
        DotAnnotation { image_id: image_id.into(), width, height, points }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Checks extents and that every point is finite and inside the image.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(DenetError::Input(format!("annotation `{}`: width and height must be positive", self.image_id)));
        }
        for (i, &(x, y)) in self.points.iter().enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(DenetError::Input(format!("annotation `{}`: points[{i}] has a non-finite coordinate", self.image_id)));
            }
            if !(0.0..self.width as f64).contains(&x) || !(0.0..self.height as f64).contains(&y) {
                return Err(DenetError::Input(format!(
                    "annotation `{}`: points[{i}] = ({x}, {y}) lies outside the {}x{} image",
                    self.image_id, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let ann: DotAnnotation = crate::error::from_json(text)?;
        ann.validate().map_err(|e| e.to_string())?;
        Ok(ann)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DenetError::io(path, e))?;
        Self::from_json(&text).map_err(|msg| DenetError::format(path, msg))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("annotation serializes");
        std::fs::write(path, text).map_err(|e| DenetError::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Fixed,
    Adaptive,
}

/// How the Gaussian width of each head is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelPolicy {
    pub mode: KernelMode,
    pub sigma_fixed: f64,
    pub beta: f64,
    pub k_neighbors: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for KernelPolicy {
    fn default() -> Self {
        KernelPolicy { mode: KernelMode::Fixed, sigma_fixed: 15.0, beta: 0.3, k_neighbors: 3, sigma_min: 1.0, sigma_max: 25.0 }
    }
}

impl KernelPolicy {
    pub fn fixed(sigma: f64) -> Self {
        KernelPolicy { mode: KernelMode::Fixed, sigma_fixed: sigma, ..Default::default() }
    }

    pub fn adaptive() -> Self {
        KernelPolicy { mode: KernelMode::Adaptive, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive =
            [(self.sigma_fixed, "sigma_fixed"), (self.beta, "beta"), (self.sigma_min, "sigma_min"), (self.sigma_max, "sigma_max")];
        for (v, name) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DenetError::Config(format!("kernel.{name} must be a positive number, got {v}")));
            }
        }
        if self.k_neighbors == 0 {
            return Err(DenetError::Config("kernel.k_neighbors must be at least 1".into()));
        }
        if self.sigma_min > self.sigma_max {
            return Err(DenetError::Config(format!("kernel.sigma_min ({}) exceeds kernel.sigma_max ({})", self.sigma_min, self.sigma_max)));
        }
        Ok(())
    }

    pub fn sigma_for(&self, points: &[(f64, f64)], index: usize) -> f64 {
        match self.mode {
            KernelMode::Fixed => self.sigma_fixed,
            KernelMode::Adaptive => adaptive_sigma(points, index, self),
        }
    }
}

/// `clamp(beta * mean distance to the k nearest other points)`; falls back
/// to `sigma_fixed` when the point has no neighbours. Uses every other point
/// when fewer than `k_neighbors` exist.
pub fn adaptive_sigma(points: &[(f64, f64)], index: usize, policy: &KernelPolicy) -> f64 {
    if points.len() < 2 {
        return policy.sigma_fixed;
    }
    let (px, py) = points[index];
    let mut dists: Vec<f64> = points.iter().enumerate().filter(|&(j, _)| j != index).map(|(_, &(x, y))| (x - px).hypot(y - py)).collect();
    dists.sort_by(f64::total_cmp);
    let k = policy.k_neighbors.min(dists.len());
    let mean = dists[..k].iter().sum::<f64>() / k as f64;
    (policy.beta * mean).clamp(policy.sigma_min, policy.sigma_max)
}

/// Non-negative per-pixel person density, row-major `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

pub const GRID_MAGIC: &[u8; 10] = b"DENETGRID1";

impl DensityGrid {
    pub fn zeros(width: usize, height: usize) -> Self {
        DensityGrid { width, height, values: vec![0.0; width * height] }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.values.clone()).expect("grid extents")
    }

    /// Reads a `[1, H, W]` tensor as a grid.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 1 {
            return Err(DenetError::Shape(format!("density tensor has {c} channels, expected 1")));
        }
        Ok(DensityGrid { width: w, height: h, values: t.data().to_vec() })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for row in self.values.chunks(self.width) {
            values.extend(row.iter().rev());
        }
        DensityGrid { width: self.width, height: self.height, values }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(GRID_MAGIC)?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic).map_err(|e| format!("reading magic: {e}"))?;
        if &magic != GRID_MAGIC {
            return Err("missing DENETGRID1 magic".into());
        }
        let mut dims = [0u8; 8];
        r.read_exact(&mut dims).map_err(|e| format!("reading extents: {e}"))?;
        let width = u32::from_le_bytes(dims[..4].try_into().expect("4 bytes")) as usize;
        let height = u32::from_le_bytes(dims[4..].try_into().expect("4 bytes")) as usize;
        let n = width
            .checked_mul(height)
            .filter(|&n| n > 0 && n < (1 << 32))
            .ok_or_else(|| format!("invalid grid extents {width}x{height}"))?;
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(|e| format!("reading {n} values: {e}"))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
            return Err("trailing bytes after grid values".into());
        }
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(DensityGrid { width, height, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| DenetError::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| DenetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| DenetError::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|msg| DenetError::format(path, msg))
    }
}

/// Pixel range `lo..=hi` whose centres lie within `±radius` of `c`, clipped
/// to `0..n`, always containing the pixel under `c`.
fn window(c: f64, radius: f64, n: usize) -> (usize, usize) {
    let own = (c.floor() as usize).min(n - 1);
    let lo = (c - radius - 0.5).ceil().max(0.0) as usize;
    let hi = ((c + radius - 0.5).floor().max(0.0) as usize).min(n - 1);
    (lo.min(own), hi.max(own))
}

fn gaussian_profile(c: f64, sigma: f64, lo: usize, hi: usize) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    (lo..=hi)
        .map(|i| {
            let d = i as f64 + 0.5 - c;
            (-d * d * inv).exp()
        })
        .collect()
}

/// Adds one unit-mass truncated Gaussian centred at `(x, y)`.
pub fn stamp_gaussian(grid: &mut DensityGrid, x: f64, y: f64, sigma: f64) {
    let radius = 4.0 * sigma;
    let (x0, x1) = window(x, radius, grid.width);
    let (y0, y1) = window(y, radius, grid.height);
    let gx = gaussian_profile(x, sigma, x0, x1);
    let gy = gaussian_profile(y, sigma, y0, y1);
    let norm = gx.iter().sum::<f64>() * gy.iter().sum::<f64>();
    // The pixel under the dot is always in the window, so norm > 0 unless
    // sigma is so small that every weight underflows.
    if !(norm > 0.0 && norm.is_finite()) {
        let (px, py) = (x.floor() as usize, y.floor() as usize);
        grid.values[py.min(grid.height - 1) * grid.width + px.min(grid.width - 1)] += 1.0;
        return;
    }
    for (row, wy) in (y0..=y1).zip(&gy) {
        let base = row * grid.width;
        let scale = wy / norm;
        for (v, wx) in grid.values[base + x0..=base + x1].iter_mut().zip(&gx) {
            *v += wx * scale;
        }
    }
}

/// Sums one normalised Gaussian per annotated point.
pub fn generate_density_map(ann: &DotAnnotation, policy: &KernelPolicy) -> Result<DensityGrid> {
    ann.validate()?;
    policy.validate()?;
    let mut grid = DensityGrid::zeros(ann.width, ann.height);
    for (i, &(x, y)) in ann.points.iter().enumerate() {
        let sigma = policy.sigma_for(&ann.points, i);
        stamp_gaussian(&mut grid, x, y, sigma);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_annotation_gives_zero_grid() {
        let ann = DotAnnotation::new("e", 16, 8, vec![]);
        let g = generate_density_map(&ann, &KernelPolicy::default()).unwrap();
        assert_eq!(g.sum(), 0.0);
        assert_eq!(g.values.len(), 128);
    }

    #[test]
    fn centred_dot_has_unit_mass() {
        let ann = DotAnnotation::new("c", 64, 64, vec![(32.0, 32.0)]);
        let g = generate_density_map(&ann, &KernelPolicy::fixed(4.0)).unwrap();
        assert!((g.sum() - 1.0).abs() < 1e-6);
        assert!(g.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_points_outside_and_non_finite() {
        let ann = DotAnnotation::new("o", 10, 10, vec![(1.0, 1.0), (10.0, 2.0)]);
        let err = generate_density_map(&ann, &KernelPolicy::default()).unwrap_err();
        assert!(err.to_string().contains("points[1]"), "{err}");
        let ann = DotAnnotation::new("n", 10, 10, vec![(f64::NAN, 2.0)]);
        assert!(matches!(ann.validate(), Err(DenetError::Input(_))));
    }

    #[test]
    fn adaptive_sigma_examples() {
        let p = KernelPolicy { k_neighbors: 3, ..KernelPolicy::adaptive() };
        assert!((adaptive_sigma(&[(0.0, 0.0), (6.0, 8.0)], 0, &p) - 3.0).abs() < 1e-12);
        assert_eq!(adaptive_sigma(&[(5.0, 5.0)], 0, &p), p.sigma_fixed);
        let line: Vec<(f64, f64)> = (0..5).map(|i| (10.0 + 20.0 * i as f64, 7.0)).collect();
        let p1 = KernelPolicy { k_neighbors: 1, ..KernelPolicy::adaptive() };
        for i in 1..4 {
            assert!((adaptive_sigma(&line, i, &p1) - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_sigma_keeps_mass_in_own_pixel() {
        let mut g = DensityGrid::zeros(4, 4);
        stamp_gaussian(&mut g, 2.9, 1.2, 1e-3);
        assert!((g.at(2, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn policy_validation_names_field() {
        let p = KernelPolicy { sigma_min: 5.0, sigma_max: 2.0, ..Default::default() };
        assert!(p.validate().unwrap_err().to_string().contains("sigma_min"));
    }

    #[test]
    fn annotation_json_schema() {
        let ok = r#"{"image_id": "a", "width": 4, "height": 3, "points": [[1.5, 2.0]]}"#;
        assert_eq!(DotAnnotation::from_json(ok).unwrap().points, vec![(1.5, 2.0)]);
        let extra = r#"{"image_id": "a", "width": 4, "height": 3, "points": [], "dots": []}"#;
        assert!(DotAnnotation::from_json(extra).unwrap_err().contains("unknown field `dots`"));
        let missing = r#"{"image_id": "a", "height": 3, "points": []}"#;
        assert!(DotAnnotation::from_json(missing).unwrap_err().contains("width"));
    }
}

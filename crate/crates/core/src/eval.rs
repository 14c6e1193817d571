//! Count metrics, the detect-mask-estimate-fuse pipeline and k-fold splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::DotAnnotation;
use crate::error::{DenetError, Result};
use crate::fusion::{apply_masks, filter_detections, fuse_count, DetectionSet, FusionConfig};
use crate::model::DensityEstimator;
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageCount {
    pub image_id: String,
    pub n_gt: usize,
    pub n_d: usize,
    pub n_e: f64,
    pub c: f64,
}

impl ImageCount {
    pub fn abs_err(&self) -> f64 {
        (self.c - self.n_gt as f64).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub per_image: Vec<ImageCount>,
    pub mae: f64,
    /// Mean of squared errors, without a square root.
    pub mse: f64,
    /// `sqrt(mse)`, the figure most tables label MSE.
    pub rmse: f64,
}

impl CountReport {
    pub fn from_rows(per_image: Vec<ImageCount>) -> Result<Self> {
        let (mae, mse) = mae_mse(&per_image)?;
        Ok(CountReport { per_image, mae, mse, rmse: mse.sqrt() })
    }

    pub fn mean_gt(&self) -> f64 {
        self.per_image.iter().map(|r| r.n_gt as f64).sum::<f64>() / self.per_image.len() as f64
    }

    pub fn summary(&self) -> String {
        format!("images {}  MAE {:.4}  MSE {:.4}  RMSE {:.4}", self.per_image.len(), self.mae, self.mse, self.rmse)
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_string_pretty(self).expect("report serializes")).map_err(|e| DenetError::io(&json, e))?;
        let path = dir.join("report.csv");
        let csv_err = |e: csv::Error| DenetError::Runtime(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["image_id", "n_gt", "n_d", "n_e", "c", "abs_err"]).map_err(csv_err)?;
        for r in &self.per_image {
            w.write_record([
                r.image_id.clone(),
                r.n_gt.to_string(),
                r.n_d.to_string(),
                r.n_e.to_string(),
                r.c.to_string(),
                r.abs_err().to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| DenetError::io(&path, e))
    }
}

/// `(mean |C - C_gt|, mean |C - C_gt|^2)`.
pub fn mae_mse(rows: &[ImageCount]) -> Result<(f64, f64)> {
    if rows.is_empty() {
        return Err(DenetError::Contract("MAE/MSE of an empty image list".into()));
    }
    let n = rows.len() as f64;
    let mae = rows.iter().map(ImageCount::abs_err).sum::<f64>() / n;
    let mse = rows.iter().map(|r| r.abs_err().powi(2)).sum::<f64>() / n;
    Ok((mae, mse))
}

/// One evaluation image.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub image: Tensor,
    pub annotation: DotAnnotation,
    pub detections: Option<DetectionSet>,
}

/// Filter, mask, estimate and fuse one image.
pub fn count_image<E: DensityEstimator + ?Sized>(estimator: &E, item: &EvalItem, fusion: &FusionConfig) -> Result<ImageCount> {
    let ann = &item.annotation;
    let dets = item.detections.as_ref().ok_or_else(|| DenetError::Input(format!("no detection record for image `{}`", ann.image_id)))?;
    let retained = filter_detections(dets, fusion, (ann.width, ann.height))?;
    let scene = apply_masks(&item.image, ann, &retained, fusion)?;
    let pred = estimator.estimate(&scene.masked_image)?;
    let rec = fuse_count(scene.n_d, &pred);
    Ok(ImageCount { image_id: ann.image_id.clone(), n_gt: ann.count(), n_d: rec.n_d, n_e: rec.n_e, c: rec.c })
}

/// Runs every image (in parallel) and reports in input order.
pub fn evaluate<E: DensityEstimator + ?Sized>(estimator: &E, items: &[EvalItem], fusion: &FusionConfig) -> Result<CountReport> {
    fusion.validate()?;
    let rows = par::map(items, |it| count_image(estimator, it, fusion));
    CountReport::from_rows(rows.into_iter().collect::<Result<Vec<_>>>()?)
}

/// `k` disjoint folds covering `0..n`, sizes within one of each other.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// Indices outside fold `i`, ascending.
    pub fn train_indices(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.folds.iter().enumerate().filter(|&(j, _)| j != i).flat_map(|(_, f)| f.iter().copied()).collect();
        v.sort_unstable();
        v
    }
}

/// Seeded shuffle, then contiguous split.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 || n < k {
        return Err(DenetError::Contract(format!("cannot split {n} images into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(FoldSplit { k, folds })
}

/// Trains on `k - 1` folds and evaluates the held-out one, `k` times; the
/// per-image rows of all folds are merged in dataset order.
pub fn cross_validate<E, F>(items: &[EvalItem], k: usize, seed: u64, fusion: &FusionConfig, mut train_fn: F) -> Result<CountReport>
where
    E: DensityEstimator,
    F: FnMut(usize, &[usize]) -> Result<E>,
{
    let split = make_folds(items.len(), k, seed)?;
    let mut rows: Vec<Option<ImageCount>> = vec![None; items.len()];
    for (f, fold) in split.folds.iter().enumerate() {
        let est = train_fn(f, &split.train_indices(f))?;
        let held: Vec<EvalItem> = fold.iter().map(|&i| items[i].clone()).collect();
        let rep = evaluate(&est, &held, fusion)?;
        for (&i, row) in fold.iter().zip(rep.per_image) {
            rows[i] = Some(row);
        }
    }
    CountReport::from_rows(rows.into_iter().map(|r| r.expect("folds cover every image")).collect())
}

/// An estimator that predicts no density anywhere.
pub struct ZeroEstimator;

impl DensityEstimator for ZeroEstimator {
    fn estimate(&self, image: &Tensor) -> Result<Tensor> {
        let (_, h, w) = image.chw()?;
        Ok(Tensor::zeros(&[1, h, w]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(c: f64, gt: usize) -> ImageCount {
        ImageCount { image_id: String::new(), n_gt: gt, n_d: 0, n_e: c, c }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mae_mse(&[row(5.0, 7)]).unwrap(), (2.0, 4.0));
        assert_eq!(mae_mse(&[row(1.0, 0), row(0.0, 3)]).unwrap(), (2.0, 5.0));
        assert_eq!(mae_mse(&[row(4.0, 4)]).unwrap(), (0.0, 0.0));
        assert!(mae_mse(&[]).is_err());
    }

    #[test]
    fn folds_partition() {
        let s = make_folds(50, 5, 1).unwrap();
        assert!(s.folds.iter().all(|f| f.len() == 10));
        let mut all: Vec<usize> = s.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(s, make_folds(50, 5, 1).unwrap());
        let s = make_folds(7, 3, 2).unwrap();
        let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert!(make_folds(3, 4, 0).is_err());
    }

    #[test]
    fn empty_detections_zero_model() {
        let ann = DotAnnotation::new("a", 16, 16, vec![(2.0, 2.0), (9.0, 9.0)]);
        let item = EvalItem { image: Tensor::zeros(&[3, 16, 16]), annotation: ann, detections: Some(DetectionSet::empty("a")) };
        let rep = evaluate(&ZeroEstimator, std::slice::from_ref(&item), &FusionConfig::default()).unwrap();
        assert_eq!(rep.mae, 2.0);
        let missing = EvalItem { detections: None, ..item };
        let err = evaluate(&ZeroEstimator, &[missing], &FusionConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`a`"));
    }
}

//! Pixel-level Euclidean loss, relative counting loss and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::density::DensityGrid;
use crate::error::{DenetError, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    /// Lower bound on the magnitude of the counting-loss denominator.
    pub denom_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.1, denom_floor: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(DenetError::Config(format!("loss.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.denom_floor > 0.0 && self.denom_floor.is_finite()) {
            return Err(DenetError::Config(format!("loss.denom_floor must be > 0, got {}", self.denom_floor)));
        }
        Ok(())
    }

    /// `max(|n_gt - n_d + 1|, denom_floor)`.
    pub fn denominator(&self, ctx: &CountContext) -> f64 {
        (ctx.n_gt as f64 - ctx.n_d as f64 + 1.0).abs().max(self.denom_floor)
    }
}

/// Ground-truth and detected person counts for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountContext {
    pub n_gt: usize,
    pub n_d: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub euclidean: Var,
    pub counting: Var,
}

/// Mean over pixels of `(pred - gt)^2`.
pub fn euclidean_loss(tape: &mut Tape, pred: Var, gt: &DensityGrid) -> Result<Var> {
    let (_, h, w) = tape.value(pred).chw()?;
    if (h, w) != (gt.height, gt.width) {
        return Err(DenetError::Shape(format!("prediction is {h}x{w}, ground truth is {}x{}", gt.height, gt.width)));
    }
    let target = tape.constant(gt.to_tensor());
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    Ok(tape.mean_all(sq))
}

/// `((n_gt - n_d - sum(pred)) / d)^2` with `d` from [`LossConfig::denominator`].
pub fn counting_loss(tape: &mut Tape, pred: Var, ctx: &CountContext, cfg: &LossConfig) -> Var {
    let d = cfg.denominator(ctx);
    let n_e = tape.sum_all(pred);
    let neg = tape.scale(n_e, -1.0);
    let resid = tape.offset(neg, ctx.n_gt as f64 - ctx.n_d as f64);
    let rel = tape.scale(resid, 1.0 / d);
    tape.square(rel)
}

pub fn combined_loss(tape: &mut Tape, pred: Var, gt: &DensityGrid, ctx: &CountContext, cfg: &LossConfig) -> Result<LossTerms> {
    let euclidean = euclidean_loss(tape, pred, gt)?;
    let counting = counting_loss(tape, pred, ctx, cfg);
    let weighted = tape.scale(counting, cfg.alpha);
    let total = tape.add(euclidean, weighted)?;
    Ok(LossTerms { total, euclidean, counting })
}

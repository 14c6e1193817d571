//! Adam training of the estimation network on masked scenes.

use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{generate_density_map, DensityGrid, DotAnnotation, KernelPolicy};
use crate::error::{DenetError, Result};
use crate::fusion::{apply_masks, filter_detections, DetectionSet, FusionConfig, MaskedScene};
use crate::loss::{combined_loss, CountContext, LossConfig};
use crate::model::{pad_to_multiple, EnetModel, STRIDE};
use crate::tensor::{checkpoint, Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const STATE_FILE: &str = "train_state.json";
pub const CURVE_FILE: &str = "loss_curve.csv";

/// Side of a random crop relative to the image.
pub const CROP_SCALE: f64 = 0.75;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 20,
            epochs: 200,
            batch_size: 1,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DenetError::Config(msg));
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("train.lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("train.lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 {
            return bad("train.lr_decay_every and train.batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("train.adam_beta1 and train.adam_beta2 must be in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad(format!("train.adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }

    /// `lr_initial * decay^floor(epoch / every)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_initial * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// One masked, possibly transformed, training image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub image: Tensor,
    pub gt: DensityGrid,
    /// Row-major, true where detections were removed.
    pub region_mask: Vec<bool>,
    /// Dots outside the mask.
    pub residual: Vec<(f64, f64)>,
    /// Every annotated dot.
    pub points: Vec<(f64, f64)>,
    pub detected_centers: Vec<(f64, f64)>,
}

impl TrainSample {
    pub fn width(&self) -> usize {
        self.gt.width
    }

    pub fn height(&self) -> usize {
        self.gt.height
    }

    pub fn context(&self) -> CountContext {
        CountContext { n_gt: self.points.len(), n_d: self.detected_centers.len() }
    }

    /// Identity sample of a masked scene; ground truth comes from the
    /// residual dots only.
    pub fn from_scene(original: &DotAnnotation, scene: &MaskedScene, kernel: &KernelPolicy) -> Result<Self> {
        Ok(TrainSample {
            id: original.image_id.clone(),
            image: scene.masked_image.clone(),
            gt: generate_density_map(&scene.residual, kernel)?,
            region_mask: scene.region_mask.clone(),
            residual: scene.residual.points.clone(),
            points: original.points.clone(),
            detected_centers: scene.detected_centers.clone(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let (w, h) = (self.width(), self.height());
        let c = self.image.len() / (w * h);
        let mut img = self.image.clone();
        for row in img.data_mut().chunks_mut(w) {
            row.reverse();
        }
        let mut mask = self.region_mask.clone();
        for row in mask.chunks_mut(w) {
            row.reverse();
        }
        let mirror = |pts: &[(f64, f64)]| pts.iter().map(|&(x, y)| (w as f64 - x, y)).collect::<Vec<_>>();
        debug_assert_eq!(img.len(), c * w * h);
        TrainSample {
            id: format!("{}#flip", self.id),
            image: img,
            gt: self.gt.flip_horizontal(),
            region_mask: mask,
            residual: mirror(&self.residual),
            points: mirror(&self.points),
            detected_centers: mirror(&self.detected_centers),
        }
    }

    /// The `cw x ch` window at `(x0, y0)`. Ground truth is regenerated from
    /// the residual dots inside the window, so its sum equals their count.
    pub fn crop(&self, (x0, y0): (usize, usize), (cw, ch): (usize, usize), kernel: &KernelPolicy, tag: &str) -> Result<Self> {
        let (w, h) = (self.width(), self.height());
        let c = self.image.len() / (w * h);
        let src = self.image.data();
        let mut img = Vec::with_capacity(c * cw * ch);
        for ci in 0..c {
            for y in y0..y0 + ch {
                let row = (ci * h + y) * w;
                img.extend_from_slice(&src[row + x0..row + x0 + cw]);
            }
        }
        let mut mask = Vec::with_capacity(cw * ch);
        for y in y0..y0 + ch {
            mask.extend_from_slice(&self.region_mask[y * w + x0..y * w + x0 + cw]);
        }
        let inside = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
            let (fx, fy) = (x0 as f64, y0 as f64);
            pts.iter()
                .filter(|&&(x, y)| x >= fx && x < fx + cw as f64 && y >= fy && y < fy + ch as f64)
                .map(|&(x, y)| (x - fx, y - fy))
                .collect()
        };
        let id = format!("{}#{tag}", self.id);
        let residual = inside(&self.residual);
        let gt = generate_density_map(&DotAnnotation::new(id.clone(), cw, ch, residual.clone()), kernel)?;
        Ok(TrainSample {
            id,
            image: Tensor::new(vec![c, ch, cw], img)?,
            gt,
            region_mask: mask,
            residual,
            points: inside(&self.points),
            detected_centers: inside(&self.detected_centers),
        })
    }
}

/// Filters detections, masks the image and builds the identity sample.
pub fn prepare_sample(
    image: &Tensor,
    ann: &DotAnnotation,
    detections: &DetectionSet,
    fusion: &FusionConfig,
    kernel: &KernelPolicy,
) -> Result<TrainSample> {
    let retained = filter_detections(detections, fusion, (ann.width, ann.height))?;
    let scene = apply_masks(image, ann, &retained, fusion)?;
    TrainSample::from_scene(ann, &scene, kernel)
}

/// Identity, horizontal flip and two random crops at [`CROP_SCALE`], with
/// crop sides rounded down to a multiple of 8. Images too small for such a
/// crop yield four identity copies.
pub fn augment(sample: &TrainSample, kernel: &KernelPolicy, rng: &mut ChaCha8Rng) -> Result<Vec<TrainSample>> {
    let (w, h) = (sample.width(), sample.height());
    let side = |n: usize| ((n as f64 * CROP_SCALE) as usize / STRIDE) * STRIDE;
    let (cw, ch) = (side(w), side(h));
    if cw == 0 || ch == 0 {
        warn!("{}: {w}x{h} is too small for a {CROP_SCALE} crop; using identity copies", sample.id);
        return Ok(vec![sample.clone(); 4]);
    }
    let mut out = vec![sample.clone(), sample.flip_horizontal()];
    for tag in ["crop0", "crop1"] {
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        out.push(sample.crop((x0, y0), (cw, ch), kernel, tag)?);
    }
    Ok(out)
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(model: &EnetModel) -> Self {
        let zeros = || model.params().iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Adam { m: zeros(), v: zeros(), t: 0 }
    }

    /// One bias-corrected update from the gradients stored on the parameters.
    pub fn step(&mut self, model: &mut EnetModel, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, m), v) in model.params_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = match p.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let (m, v) = (m.data_mut(), v.data_mut());
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            }
        }
    }

    fn save(&self, model: &EnetModel, path: &Path) -> Result<()> {
        let names: Vec<(String, &Tensor)> = model
            .params()
            .iter()
            .zip(&self.m)
            .map(|((n, _), t)| (format!("m/{n}"), t))
            .chain(model.params().iter().zip(&self.v).map(|((n, _), t)| (format!("v/{n}"), t)))
            .collect();
        checkpoint::save(path, names.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    fn load(model: &EnetModel, path: &Path, t: u64) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let n = model.params().len();
        let expected = model
            .params()
            .iter()
            .map(|(name, p)| (format!("m/{name}"), p.shape()))
            .chain(model.params().iter().map(|(name, p)| (format!("v/{name}"), p.shape())));
        if loaded.len() != 2 * n {
            return Err(DenetError::format(path, format!("{} moments for {n} parameters", loaded.len())));
        }
        for ((name, t), (want, shape)) in loaded.iter().zip(expected) {
            if *name != want || t.shape() != shape {
                return Err(DenetError::format(path, format!("moment `{name}` does not match `{want}`")));
            }
        }
        let mut tensors: Vec<Tensor> = loaded.into_iter().map(|(_, t)| t).collect();
        let v = tensors.split_off(n);
        Ok(Adam { m: tensors, v, t })
    }
}

/// Scalars of a training run, written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateFile {
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
    /// ChaCha8 word position, as a decimal string (it is 68 bits wide).
    pub rng_word_pos: String,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &EnetModel, cfg: &TrainConfig) -> Self {
        TrainState { step: 0, epoch: 0, adam: Adam::new(model), rng: ChaCha8Rng::seed_from_u64(cfg.seed) }
    }

    /// Writes the model checkpoint, the optimizer moments and the sidecar.
    pub fn save(&self, model: &EnetModel, cfg: &TrainConfig, dir: &Path) -> Result<()> {
        model.save(&dir.join(CHECKPOINT_FILE))?;
        self.adam.save(model, &dir.join(OPTIMIZER_FILE))?;
        let sidecar = StateFile { step: self.step, epoch: self.epoch, seed: cfg.seed, rng_word_pos: self.rng.get_word_pos().to_string() };
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("state serializes")).map_err(|e| DenetError::io(&path, e))
    }

    /// Restores a run saved by [`TrainState::save`] into `model`'s shape.
    pub fn load(model_config: crate::model::EnetConfig, dir: &Path) -> Result<(EnetModel, Self)> {
        let model = EnetModel::load(model_config, &dir.join(CHECKPOINT_FILE))?;
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DenetError::io(&path, e))?;
        let s: StateFile = crate::error::from_json(&text).map_err(|e| DenetError::format(&path, e))?;
        let pos: u128 = s.rng_word_pos.parse().map_err(|_| DenetError::format(&path, format!("bad rng_word_pos `{}`", s.rng_word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_word_pos(pos);
        let adam = Adam::load(&model, &dir.join(OPTIMIZER_FILE), s.step)?;
        Ok((model, TrainState { step: s.step, epoch: s.epoch, adam, rng }))
    }
}

/// One row of the loss curve; losses are batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_e: f64,
    pub loss_c: f64,
    pub loss_total: f64,
}

/// Loss terms of one sample and, if `backprop`, its gradients added to the
/// model's parameter gradients with weight `weight`.
pub fn sample_loss(model: &mut EnetModel, sample: &TrainSample, loss_cfg: &LossConfig, backprop: Option<f64>) -> Result<(f64, f64, f64)> {
    let (padded, record) = pad_to_multiple(&sample.image, STRIDE)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(padded);
    let out = model.forward_on(&mut tape, &bound, x)?;
    let pred = tape.crop(out, record.height, record.width)?;
    let terms = combined_loss(&mut tape, pred, &sample.gt, &sample.context(), loss_cfg)?;
    let value = |v| tape.value(v).data()[0];
    let (e, c, total) = (value(terms.euclidean), value(terms.counting), value(terms.total));
    if !total.is_finite() {
        return Err(DenetError::NonFiniteLoss { sample: sample.id.clone(), value: total });
    }
    if let Some(weight) = backprop {
        let scaled = tape.scale(terms.total, weight);
        tape.backward(scaled)?;
        model.accumulate_grads(&tape, &bound)?;
    }
    Ok((e, c, total))
}

/// One optimizer step on `batch`. Returns the pre-update batch-mean losses.
pub fn train_step(
    model: &mut EnetModel,
    batch: &[&TrainSample],
    loss_cfg: &LossConfig,
    state: &mut TrainState,
    cfg: &TrainConfig,
) -> Result<CurveRow> {
    if batch.is_empty() {
        return Err(DenetError::Contract("train_step needs a non-empty batch".into()));
    }
    model.zero_grads();
    let weight = 1.0 / batch.len() as f64;
    let (mut e, mut c, mut t) = (0.0, 0.0, 0.0);
    for s in batch {
        let (se, sc, st) = sample_loss(model, s, loss_cfg, Some(weight))?;
        e += se * weight;
        c += sc * weight;
        t += st * weight;
    }
    let lr = cfg.learning_rate(state.epoch);
    state.adam.step(model, lr, cfg);
    state.step += 1;
    Ok(CurveRow { step: state.step, epoch: state.epoch, lr, loss_e: e, loss_c: c, loss_total: t })
}

/// Runs the remaining epochs of `cfg` from `state`. Each epoch shuffles the
/// samples with the run's generator. With `out_dir`, the checkpoint,
/// optimizer moments and sidecar are rewritten after every epoch and each
/// step appends to the loss curve.
pub fn train(
    model: &mut EnetModel,
    samples: &[TrainSample],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    state: &mut TrainState,
    out_dir: Option<&Path>,
) -> Result<Vec<CurveRow>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if samples.is_empty() {
        return Err(DenetError::Input("training set is empty".into()));
    }
    let mut curve_writer = match out_dir {
        Some(dir) => {
            let path = dir.join(CURVE_FILE);
            let append = state.step > 0 && path.exists();
            let file = fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(&path)
                .map_err(|e| DenetError::io(&path, e))?;
            Some((csv::WriterBuilder::new().has_headers(!append).from_writer(file), path))
        }
        None => None,
    };
    if let Some(dir) = out_dir {
        state.save(model, cfg, dir)?;
    }
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    while state.epoch < cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let row = train_step(model, &batch, loss_cfg, state, cfg)?;
            if let Some((w, path)) = curve_writer.as_mut() {
                w.serialize(&row).map_err(|e| DenetError::Runtime(format!("{}: {e}", path.display())))?;
            }
            curve.push(row);
        }
        state.epoch += 1;
        if let Some((w, path)) = curve_writer.as_mut() {
            w.flush().map_err(|e| DenetError::io(&*path, e))?;
        }
        if let Some(dir) = out_dir {
            state.save(model, cfg, dir)?;
        }
        if let Some(last) = curve.last() {
            info!("epoch {}/{}: lr {:.3e} loss {:.6e}", state.epoch, cfg.epochs, last.lr, last.loss_total);
        }
    }
    Ok(curve)
}

/// Identity samples of every scene, each expanded by [`augment`] with one
/// generator seeded from `seed`.
pub fn build_training_set(base: &[TrainSample], kernel: &KernelPolicy, seed: u64) -> Result<Vec<TrainSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5_a5a5_a5a5);
    let mut out = Vec::with_capacity(4 * base.len());
    for s in base {
        out.extend(augment(s, kernel, &mut rng)?);
    }
    Ok(out)
}

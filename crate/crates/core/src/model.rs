//! The estimation network.
//!
//! Encoder: a trimmed Xception. One stride-2 3x3 convolution, two stride-2
//! residual blocks of separable convolutions, then `middle_blocks` identity
//! residual blocks of three separable convolutions each. Total stride is 8.
//!
//! Decoder: three (convolution, 2x transposed convolution) pairs with 7x7,
//! 5x5 and 3x3 kernels, a stack of dilated 3x3 convolutions and a 1x1 head
//! followed by ReLU. The output has the same extent as the input.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::DensityGrid;
use crate::error::{DenetError, Result};
use crate::loss::{combined_loss, CountContext, LossConfig};
use crate::tensor::gradcheck::{self, CheckReport};
use crate::tensor::{checkpoint, ConvSpec, Tape, Tensor, Var};

/// Output stride of the encoder; inputs must be multiples of this.
pub const STRIDE: usize = 8;

/// Decoder convolution kernels, largest first.
pub const DECODER_KERNELS: [usize; 3] = [7, 5, 3];

/// Init scale of the last pointwise convolution of each middle block.
const RESIDUAL_GAIN: f64 = 0.1;
/// Init scale of the head weights.
const HEAD_GAIN: f64 = 0.01;
/// Initial head bias: a small positive density so the final ReLU starts live.
const HEAD_BIAS: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnetConfig {
    pub middle_blocks: usize,
    pub base_channels: usize,
    pub decoder_channels: Vec<usize>,
    /// `(channels, dilation)` per dilated layer.
    pub dilated_stack: Vec<(usize, usize)>,
    pub output_activation: OutputActivation,
}

impl Default for EnetConfig {
    fn default() -> Self {
        EnetConfig {
            middle_blocks: 4,
            base_channels: 32,
            decoder_channels: vec![128, 64, 32],
            dilated_stack: vec![(32, 2), (32, 2), (32, 2)],
            output_activation: OutputActivation::Relu,
        }
    }
}

impl EnetConfig {
    /// A narrow variant for gradient checks and quick tests.
    pub fn tiny() -> Self {
        EnetConfig {
            middle_blocks: 1,
            base_channels: 2,
            decoder_channels: vec![4, 3, 2],
            dilated_stack: vec![(2, 2)],
            output_activation: OutputActivation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.middle_blocks == 0 {
            return Err(DenetError::Config("model.middle_blocks must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(DenetError::Config("model.base_channels must be positive".into()));
        }
        if self.decoder_channels.len() != DECODER_KERNELS.len() {
            return Err(DenetError::Config(format!(
                "model.decoder_channels must list exactly {} transposed-convolution stages, got {}",
                DECODER_KERNELS.len(),
                self.decoder_channels.len()
            )));
        }
        if self.decoder_channels.contains(&0) {
            return Err(DenetError::Config("model.decoder_channels must be positive".into()));
        }
        for (i, &(c, d)) in self.dilated_stack.iter().enumerate() {
            if c == 0 || d == 0 {
                return Err(DenetError::Config(format!("model.dilated_stack[{i}] needs positive channels and dilation, got ({c}, {d})")));
            }
        }
        Ok(())
    }

    fn encoder_channels(&self) -> [usize; 3] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b]
    }
}

/// How one parameter tensor is initialised.
#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(±gain * sqrt(6 / fan_in))`.
    Weight {
        fan_in: usize,
        gain: f64,
    },
    /// `U(±1 / sqrt(fan_in))`.
    Bias {
        fan_in: usize,
    },
    Constant(f64),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Layout(Vec<ParamSpec>);

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn conv_with(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, gain: f64, bias: Init) {
        let fan_in = cin * k * k;
        self.push(format!("{prefix}.weight"), vec![cout, cin, k, k], Init::Weight { fan_in, gain });
        self.push(format!("{prefix}.bias"), vec![cout], bias);
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.conv_with(prefix, cin, cout, k, 1.0, Init::Bias { fan_in: cin * k * k });
    }

    fn separable_with(&mut self, prefix: &str, cin: usize, cout: usize, gain: f64) {
        self.push(format!("{prefix}.depthwise"), vec![cin, 1, 3, 3], Init::Weight { fan_in: 9, gain: 1.0 });
        self.push(format!("{prefix}.pointwise"), vec![cout, cin, 1, 1], Init::Weight { fan_in: cin, gain });
        self.push(format!("{prefix}.bias"), vec![cout], Init::Bias { fan_in: cin });
    }

    fn separable(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.separable_with(prefix, cin, cout, 1.0);
    }

    fn upsample(&mut self, prefix: &str, c: usize) {
        // [C_in, C_out, 4, 4] at stride 2: each output pixel sees C_in * 2 * 2 taps.
        let fan_in = c * 4;
        self.push(format!("{prefix}.weight"), vec![c, c, 4, 4], Init::Weight { fan_in, gain: 1.0 });
        self.push(format!("{prefix}.bias"), vec![c], Init::Bias { fan_in });
    }

    fn of(cfg: &EnetConfig) -> Self {
        let mut l = Layout::default();
        let [c1, c2, c3] = cfg.encoder_channels();
        l.conv("entry.conv", 3, c1, 3);
        for (b, (cin, cout)) in [(c1, c2), (c2, c3)].into_iter().enumerate() {
            let p = format!("entry.block{}", b + 1);
            l.separable(&format!("{p}.sep1"), cin, cout);
            l.separable(&format!("{p}.sep2"), cout, cout);
            l.conv(&format!("{p}.skip"), cin, cout, 1);
        }
        for m in 1..=cfg.middle_blocks {
            for s in 1..=3 {
                let gain = if s == 3 { RESIDUAL_GAIN } else { 1.0 };
                l.separable_with(&format!("middle.block{m}.sep{s}"), c3, c3, gain);
            }
        }
        let mut c = c3;
        for (i, (&dc, &k)) in cfg.decoder_channels.iter().zip(&DECODER_KERNELS).enumerate() {
            let p = format!("decoder.stage{}", i + 1);
            l.conv(&format!("{p}.conv"), c, dc, k);
            l.upsample(&format!("{p}.up"), dc);
            c = dc;
        }
        for (i, &(ch, _)) in cfg.dilated_stack.iter().enumerate() {
            l.conv(&format!("decoder.dilated{}", i + 1), c, ch, 3);
            c = ch;
        }
        l.conv_with("head", c, 1, 1, HEAD_GAIN, Init::Constant(HEAD_BIAS));
        l
    }
}

/// Anything that maps a `[3, H, W]` image to a `[1, H, W]` density map.
///
/// The evaluation harness only talks to this trait, so other estimators can
/// be paired with the same detection front end.
pub trait DensityEstimator: Sync {
    fn estimate(&self, image: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnetModel {
    config: EnetConfig,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// Parameter variables of one model on one tape, in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Name lookup over a [`Bound`] during one forward pass.
struct Lookup<'a> {
    vars: &'a [Var],
    index: &'a HashMap<String, usize>,
}

impl Lookup<'_> {
    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

impl EnetModel {
    /// Fan-in scaled uniform initialisation: weights `U(±gain * sqrt(6 / fan_in))`,
    /// biases `U(±1 / sqrt(fan_in))`, drawn in parameter order from `seed`.
    /// The gain is 1 except on the last layer of each residual branch and on
    /// the head, and the head bias starts at a small positive constant.
    pub fn build(config: EnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Layout::of(&config)
            .0
            .into_iter()
            .map(|p| {
                let t = match p.init {
                    Init::Constant(v) => Tensor::full(&p.shape, v),
                    Init::Weight { fan_in, gain } => {
                        let bound = gain * (6.0 / fan_in as f64).sqrt();
                        Tensor::from_fn(&p.shape, |_| rng.random_range(-bound..=bound))
                    }
                    Init::Bias { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Tensor::from_fn(&p.shape, |_| rng.random_range(-bound..bound))
                    }
                };
                (p.name, t.into_parameter())
            })
            .collect();
        Ok(Self::from_params(config, params))
    }

    fn from_params(config: EnetConfig, params: Vec<(String, Tensor)>) -> Self {
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        EnetModel { config, params, index }
    }

    pub fn config(&self) -> &EnetConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|(_, t)| tape.param(t)).collect() }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect() }
    }

    fn check_input(image: &Tensor) -> Result<()> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(DenetError::Shape(format!("expected a 3-channel image, got {c} channels")));
        }
        if h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(DenetError::Input(format!("image extents {h}x{w} are not multiples of {STRIDE}; pad with pad_to_multiple first")));
        }
        Ok(())
    }

    /// The encoder alone: `[3, H, W]` to `[4 * base, H / 8, W / 8]`.
    pub fn encode_on(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
        Self::check_input(tape.value(image))?;
        if bound.vars.len() != self.params.len() {
            return Err(DenetError::Contract(format!("{} bound variables for {} parameters", bound.vars.len(), self.params.len())));
        }
        let p = &Lookup { vars: &bound.vars, index: &self.index };
        let [c1, c2, c3] = self.config.encoder_channels();

        let spec = ConvSpec::same(3, c1, 3).with_stride(2);
        let x = tape.conv2d(image, p.get("entry.conv.weight"), Some(p.get("entry.conv.bias")), &spec)?;
        let mut x = tape.relu(x);
        for (b, (cin, cout)) in [(c1, c2), (c2, c3)].into_iter().enumerate() {
            x = entry_block(tape, p, &format!("entry.block{}", b + 1), x, cin, cout)?;
        }
        for m in 1..=self.config.middle_blocks {
            x = middle_block(tape, p, &format!("middle.block{m}"), x, c3)?;
        }
        Ok(x)
    }

    /// Runs the network on a `[3, H, W]` value already on the tape.
    pub fn forward_on(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Var> {
        let mut x = self.encode_on(tape, bound, image)?;
        let p = &Lookup { vars: &bound.vars, index: &self.index };
        let mut c = 4 * self.config.base_channels;
        for (i, (&dc, &k)) in self.config.decoder_channels.iter().zip(&DECODER_KERNELS).enumerate() {
            let pre = format!("decoder.stage{}", i + 1);
            let y = conv(tape, p, &format!("{pre}.conv"), x, &ConvSpec::same(c, dc, k))?;
            let y = tape.relu(y);
            let up = tape.transposed_conv2d(
                y,
                p.get(&format!("{pre}.up.weight")),
                Some(p.get(&format!("{pre}.up.bias"))),
                &ConvSpec::upsample2x(dc, dc),
            )?;
            x = tape.relu(up);
            c = dc;
        }
        for (i, &(ch, d)) in self.config.dilated_stack.iter().enumerate() {
            let spec = ConvSpec::same(c, ch, 3).with_dilation(d).with_padding(d);
            let y = conv(tape, p, &format!("decoder.dilated{}", i + 1), x, &spec)?;
            x = tape.relu(y);
            c = ch;
        }
        let y = conv(tape, p, "head", x, &ConvSpec::same(c, 1, 1))?;
        Ok(match self.config.output_activation {
            OutputActivation::Relu => tape.relu(y),
        })
    }

    /// Runs the network on an image whose extents are multiples of 8.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor) -> Result<(Var, Bound)> {
        Self::check_input(image)?;
        let bound = self.bind(tape);
        let x = tape.constant(image.clone());
        let out = self.forward_on(tape, &bound, x)?;
        Ok((out, bound))
    }

    /// Adds the tape gradients of `bound` into the parameters' gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for ((_, t), &v) in self.params.iter_mut().zip(&bound.vars) {
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.len()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Loads parameters saved by [`EnetModel::save`] for a model of `config`.
    pub fn load(config: EnetConfig, path: &Path) -> Result<Self> {
        let template = Self::build(config.clone(), 0)?;
        let loaded = checkpoint::load(path)?;
        if loaded.len() != template.params.len() {
            return Err(DenetError::format(
                path,
                format!("checkpoint has {} parameters, model config expects {}", loaded.len(), template.params.len()),
            ));
        }
        let mut params = Vec::with_capacity(loaded.len());
        for ((name, t), (tname, tt)) in loaded.into_iter().zip(&template.params) {
            if &name != tname || t.shape() != tt.shape() {
                return Err(DenetError::format(
                    path,
                    format!("parameter `{name}` {:?} does not match expected `{tname}` {:?}", t.shape(), tt.shape()),
                ));
            }
            params.push((name, t.into_parameter()));
        }
        Ok(Self::from_params(config, params))
    }
}

impl DensityEstimator for EnetModel {
    /// Pads to a multiple of 8, runs the network and crops back.
    fn estimate(&self, image: &Tensor) -> Result<Tensor> {
        let (padded, record) = pad_to_multiple(image, STRIDE)?;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = tape.constant(padded);
        let out = self.forward_on(&mut tape, &bound, x)?;
        crop_output(tape.value(out), &record)
    }
}

fn conv(tape: &mut Tape, p: &Lookup<'_>, prefix: &str, x: Var, spec: &ConvSpec) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"));
    let b = p.get(&format!("{prefix}.bias"));
    tape.conv2d(x, w, Some(b), spec)
}

fn separable(tape: &mut Tape, p: &Lookup<'_>, prefix: &str, x: Var, cin: usize, cout: usize) -> Result<Var> {
    tape.separable_conv2d(
        x,
        p.get(&format!("{prefix}.depthwise")),
        p.get(&format!("{prefix}.pointwise")),
        Some(p.get(&format!("{prefix}.bias"))),
        &ConvSpec::same(cin, cout, 3).separable(),
    )
}

/// relu-sep-relu-sep-maxpool with a strided 1x1 projection shortcut.
fn entry_block(tape: &mut Tape, p: &Lookup<'_>, prefix: &str, x: Var, cin: usize, cout: usize) -> Result<Var> {
    let y = tape.relu(x);
    let y = separable(tape, p, &format!("{prefix}.sep1"), y, cin, cout)?;
    let y = tape.relu(y);
    let y = separable(tape, p, &format!("{prefix}.sep2"), y, cout, cout)?;
    let y = tape.max_pool2d(y, 2, 2)?;
    let skip = conv(tape, p, &format!("{prefix}.skip"), x, &ConvSpec::same(cin, cout, 1).with_stride(2))?;
    tape.add(y, skip)
}

/// Three pre-activated separable convolutions with an identity shortcut.
fn middle_block(tape: &mut Tape, p: &Lookup<'_>, prefix: &str, x: Var, c: usize) -> Result<Var> {
    let mut y = x;
    for s in 1..=3 {
        y = tape.relu(y);
        y = separable(tape, p, &format!("{prefix}.sep{s}"), y, c, c)?;
    }
    tape.add(x, y)
}

/// How to undo [`pad_to_multiple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl CropRecord {
    pub fn is_identity(&self) -> bool {
        self.height == self.padded_height && self.width == self.padded_width
    }
}

/// Reflects index `i` into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflect-pads a `[C, H, W]` tensor on the right and bottom up to the next
/// multiple of `multiple`.
pub fn pad_to_multiple(image: &Tensor, multiple: usize) -> Result<(Tensor, CropRecord)> {
    if multiple == 0 {
        return Err(DenetError::Input("padding multiple must be at least 1".into()));
    }
    let (c, h, w) = image.chw()?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    let record = CropRecord { height: h, width: w, padded_height: ph, padded_width: pw };
    if record.is_identity() {
        return Ok((image.clone(), record));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let row = (ch * h + reflect(y, h)) * w;
            out.extend((0..pw).map(|x| src[row + reflect(x, w)]));
        }
    }
    Ok((Tensor::new(vec![c, ph, pw], out)?, record))
}

pub fn crop_output(output: &Tensor, record: &CropRecord) -> Result<Tensor> {
    let (_, h, w) = output.chw()?;
    if (h, w) != (record.padded_height, record.padded_width) {
        return Err(DenetError::Shape(format!("output is {h}x{w}, crop record expects {}x{}", record.padded_height, record.padded_width)));
    }
    if record.is_identity() {
        return Ok(output.clone());
    }
    output.crop_chw(record.height, record.width)
}

/// Finite-difference check of the whole network under the combined loss,
/// on `n_entries` randomly chosen parameter entries of an 8x8 input.
/// Entries whose perturbation crosses a ReLU or pooling kink are replaced by
/// fresh draws.
pub fn gradcheck_end_to_end(config: &EnetConfig, seed: u64, n_entries: usize, h: f64) -> Result<CheckReport> {
    let model = EnetModel::build(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let image = Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0));
    let gt = DensityGrid { width: 8, height: 8, values: (0..64).map(|_| rng.random_range(0.0..0.1)).collect() };
    let ctx = CountContext { n_gt: 9, n_d: 2 };
    let loss_cfg = LossConfig::default();

    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let candidates: Vec<(usize, usize)> = (0..4 * n_entries)
        .map(|_| {
            let i = rng.random_range(0..inputs.len());
            (i, rng.random_range(0..inputs[i].len()))
        })
        .collect();

    gradcheck::check_sampled(
        "enet + combined loss",
        &inputs,
        |tape, vars| {
            let bound = Bound { vars: vars.to_vec() };
            let x = tape.constant(image.clone());
            let pred = model.forward_on(tape, &bound, x)?;
            Ok(combined_loss(tape, pred, &gt, &ctx, &loss_cfg)?.total)
        },
        h,
        &candidates,
        n_entries,
    )
}

use super::kernels::{self, ConvGeom};
use super::{ConvSpec, Tensor};
use crate::error::{DenetError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    /// Stored as the adjoint convolution that maps the output back onto the
    /// input, so forward = `conv_backward_input` and backward = `conv_forward`.
    ConvTranspose {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    Crop {
        input: Var,
        h: usize,
        w: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records one forward pass and replays it in reverse.
///
/// A tape supports exactly one `backward`; call [`Tape::reset`] before the
/// next forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, requires_grad: bool, op: Op) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or_else(|| DenetError::Contract(format!("variable {} is not on this tape", v.0)))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records `t` as a leaf; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, rg, Op::Leaf)
    }

    /// Records a trainable copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), true, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The value of `v` with its gradient attached.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?;
        let mut t = self.value(v).clone();
        t.grad = Some(g.to_vec());
        Some(t)
    }

    fn conv_geom(&self, x: Var, weight: Var, spec: &ConvSpec, groups: usize, c_out: usize) -> Result<ConvGeom> {
        spec.validate()?;
        let (c, h, w) = self.node(x)?.value.chw()?;
        if c != spec.channels_in {
            return Err(DenetError::Shape(format!("input has {c} channels, spec expects {}", spec.channels_in)));
        }
        let expect = [c_out, spec.channels_in / groups, spec.kernel_h, spec.kernel_w];
        let wshape = self.node(weight)?.value.shape();
        if wshape != expect {
            return Err(DenetError::Shape(format!("weight shape {wshape:?}, expected {expect:?}")));
        }
        spec.output_hw(h, w)?;
        ConvGeom::new(c, (h, w), c_out, (spec.kernel_h, spec.kernel_w), spec.stride, spec.dilation, spec.padding, groups)
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            let shape = self.node(b)?.value.shape();
            if shape != [channels] {
                return Err(DenetError::Shape(format!("bias shape {shape:?}, expected [{channels}]")));
            }
        }
        Ok(())
    }

    /// Dense 2-D convolution. `weight` is `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = self.conv_geom(x, weight, spec, 1, spec.channels_out)?;
        self.check_bias(bias, geom.c_out)?;
        let mut out = vec![0.0; geom.output_len()];
        kernels::conv_forward(&geom, self.value(x).data(), self.value(weight).data(), bias.map(|b| self.value(b).data()), &mut out);
        let value = Tensor::new(vec![geom.c_out, geom.oh, geom.ow], out)?;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, rg, Op::Conv { input: x, weight, bias, geom }))
    }

    /// Per-channel convolution. `weight` is `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, weight: Var, spec: &ConvSpec) -> Result<Var> {
        let geom = self.conv_geom(x, weight, spec, spec.channels_in, spec.channels_in)?;
        let mut out = vec![0.0; geom.output_len()];
        kernels::conv_forward(&geom, self.value(x).data(), self.value(weight).data(), None, &mut out);
        let value = Tensor::new(vec![geom.c_out, geom.oh, geom.ow], out)?;
        let rg = self.rg(&[x, weight]);
        Ok(self.push(value, rg, Op::Conv { input: x, weight, bias: None, geom }))
    }

    /// Depthwise convolution (geometry from `spec`) followed by a 1x1
    /// pointwise convolution `[C_out, C_in, 1, 1]` with optional bias.
    pub fn separable_conv2d(&mut self, x: Var, depthwise: Var, pointwise: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let dshape = self.node(depthwise)?.value.shape().to_vec();
        if dshape.first() != Some(&spec.channels_in) {
            return Err(DenetError::Shape(format!(
                "depthwise kernel count {:?} does not match {} input channels",
                dshape.first(),
                spec.channels_in
            )));
        }
        let mid = self.depthwise_conv2d(x, depthwise, spec)?;
        let point = ConvSpec {
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            dilation: 1,
            padding: 0,
            channels_in: spec.channels_in,
            channels_out: spec.channels_out,
            depthwise_separable: false,
        };
        self.conv2d(mid, pointwise, bias, &point)
    }

    /// Transposed convolution. `weight` is `[C_in, C_out, kh, kw]`. The
    /// configuration must map `H x W` onto exactly `2H x 2W`.
    pub fn transposed_conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        spec.validate()?;
        let (c, h, w) = self.node(x)?.value.chw()?;
        if c != spec.channels_in {
            return Err(DenetError::Shape(format!("input has {c} channels, spec expects {}", spec.channels_in)));
        }
        let expect = [spec.channels_in, spec.channels_out, spec.kernel_h, spec.kernel_w];
        let wshape = self.node(weight)?.value.shape();
        if wshape != expect {
            return Err(DenetError::Shape(format!("transposed weight shape {wshape:?}, expected {expect:?}")));
        }
        let oh = spec.transposed_extent(h, spec.kernel_h);
        let ow = spec.transposed_extent(w, spec.kernel_w);
        if oh != Some(2 * h) || ow != Some(2 * w) {
            return Err(DenetError::InvalidSpec(format!(
                "transposed convolution (kernel {}x{}, stride {}, padding {}) maps {h}x{w} to {oh:?}x{ow:?}, not an exact doubling",
                spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
            )));
        }
        self.check_bias(bias, spec.channels_out)?;
        let geom = ConvGeom::new(
            spec.channels_out,
            (2 * h, 2 * w),
            spec.channels_in,
            (spec.kernel_h, spec.kernel_w),
            spec.stride,
            spec.dilation,
            spec.padding,
            1,
        )?;
        if (geom.oh, geom.ow) != (h, w) {
            return Err(DenetError::InvalidSpec(format!(
                "adjoint geometry maps {}x{} to {}x{}, expected {h}x{w}",
                2 * h,
                2 * w,
                geom.oh,
                geom.ow
            )));
        }
        let mut out = vec![0.0; geom.input_len()];
        kernels::conv_backward_input(&geom, self.value(x).data(), self.value(weight).data(), &mut out);
        if let Some(b) = bias {
            kernels::add_channel_bias(&mut out, self.value(b).data());
        }
        let value = Tensor::new(vec![spec.channels_out, 2 * h, 2 * w], out)?;
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, rg, Op::ConvTranspose { input: x, weight, bias, geom }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let t = &self.node(x)?.value;
        let chw = t.chw()?;
        let (out, argmax, oh, ow) = kernels::max_pool_forward(t.data(), chw, k, stride)?;
        let value = Tensor::new(vec![chw.0, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::MaxPool { input: x, argmax }))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(DenetError::Shape(format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, op)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.map(x, |v| v * factor, Op::Scale(x, factor))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::Offset(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), rg, Op::MeanAll(x))
    }

    /// Keeps the top-left `h x w` window of a `[C, H, W]` value.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = &self.node(x)?.value;
        let (_, src_h, src_w) = t.chw()?;
        if (h, w) == (src_h, src_w) {
            return Ok(x);
        }
        let value = t.crop_chw(h, w)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Crop { input: x, h, w }))
    }

    /// Which branch every piecewise-linear op took: the sign of each ReLU
    /// input and the winner of each pooling window. Two passes with equal
    /// patterns lie on the same smooth piece of the recorded function.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.nodes[x.0].value.data().iter().map(|&v| usize::from(v > 0.0))),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(DenetError::Contract("backward already ran on this tape; reset it before the next pass".into()));
        }
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(DenetError::Contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let root_rg = root.requires_grad;
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root_rg {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, geom } => {
                if wants(*input) {
                    let mut gi = vec![0.0; geom.input_len()];
                    kernels::conv_backward_input(geom, g, val(*weight), &mut gi);
                    accumulate(grads, *input, gi);
                }
                if wants(*weight) {
                    let mut gw = vec![0.0; geom.weight_len()];
                    kernels::conv_backward_weight(geom, val(*input), g, &mut gw);
                    accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    accumulate(grads, b, kernels::channel_sums(g, geom.c_out));
                }
            }
            Op::ConvTranspose { input, weight, bias, geom } => {
                if wants(*input) {
                    let mut gi = vec![0.0; geom.output_len()];
                    kernels::conv_forward(geom, g, val(*weight), None, &mut gi);
                    accumulate(grads, *input, gi);
                }
                if wants(*weight) {
                    let mut gw = vec![0.0; geom.weight_len()];
                    kernels::conv_backward_weight(geom, g, val(*input), &mut gw);
                    accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    accumulate(grads, b, kernels::channel_sums(g, geom.c_in));
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let gi = val(*x).iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                    accumulate(grads, *x, gi);
                }
            }
            Op::MaxPool { input, argmax } => {
                if wants(*input) {
                    let mut gi = vec![0.0; self.nodes[input.0].value.len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gi[src] += gv;
                    }
                    accumulate(grads, *input, gi);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * f).collect());
                }
            }
            Op::Offset(x) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Square(x) => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().zip(val(*x)).map(|(gv, v)| 2.0 * v * gv).collect());
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    accumulate(grads, *x, vec![g[0]; self.nodes[x.0].value.len()]);
                }
            }
            Op::MeanAll(x) => {
                if wants(*x) {
                    let n = self.nodes[x.0].value.len();
                    accumulate(grads, *x, vec![g[0] / n as f64; n]);
                }
            }
            Op::Crop { input, h, w } => {
                if wants(*input) {
                    let (c, src_h, src_w) = self.nodes[input.0].value.chw()?;
                    let mut gi = vec![0.0; c * src_h * src_w];
                    for ch in 0..c {
                        for y in 0..*h {
                            let dst = (ch * src_h + y) * src_w;
                            let src = (ch * h + y) * w;
                            gi[dst..dst + w].copy_from_slice(&g[src..src + w]);
                        }
                    }
                    accumulate(grads, *input, gi);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

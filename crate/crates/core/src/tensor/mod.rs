//! Dense 64-bit tensors and a reverse-mode gradient tape.
//!
//! Activations are `[channels, height, width]`, convolution kernels are
//! `[channels_out, channels_in / groups, kh, kw]` and transposed-convolution
//! kernels are `[channels_in, channels_out, kh, kw]`. Batches are handled by
//! the caller, one image per tape.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod tape;

pub use tape::{Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{DenetError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(DenetError::Shape(format!("extents must be non-empty and positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DenetError::Shape(format!("shape {shape:?} holds {n} values but {} were given", data.len())));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(&mut f).collect()).expect("positive extents")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn into_parameter(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient (batch accumulation).
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(DenetError::Shape(format!("gradient of length {} for tensor of shape {:?}", g.len(), self.shape)));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Reads a rank-3 tensor as `(channels, height, width)`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(DenetError::Shape(format!("expected [channels, height, width], got {:?}", self.shape))),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Top-left `h x w` window of every channel of a `[C, H, W]` tensor.
    pub fn crop_chw(&self, h: usize, w: usize) -> Result<Tensor> {
        let (c, src_h, src_w) = self.chw()?;
        if h == 0 || w == 0 || h > src_h || w > src_w {
            return Err(DenetError::Shape(format!("cannot crop {src_h}x{src_w} to {h}x{w}")));
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * src_h + y) * src_w;
                out.extend_from_slice(&self.data[row..row + w]);
            }
        }
        Tensor::new(vec![c, h, w], out)
    }
}

/// Geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub channels_in: usize,
    pub channels_out: usize,
    pub depthwise_separable: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, dilation 1, "same" padding for odd kernels.
    pub fn same(channels_in: usize, channels_out: usize, kernel: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            dilation: 1,
            padding: kernel / 2,
            channels_in,
            channels_out,
            depthwise_separable: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn separable(mut self) -> Self {
        self.depthwise_separable = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.kernel_h, "kernel_h"),
            (self.kernel_w, "kernel_w"),
            (self.stride, "stride"),
            (self.dilation, "dilation"),
            (self.channels_in, "channels_in"),
            (self.channels_out, "channels_out"),
        ];
        for (v, name) in checks {
            if v == 0 {
                return Err(DenetError::InvalidSpec(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// `floor((in + 2p - d(k-1) - 1) / s) + 1`, or `None` when the dilated
    /// kernel does not fit.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
        let span = dilation * (kernel - 1) + 1;
        let padded = input + 2 * padding;
        if padded < span {
            None
        } else {
            Some((padded - span) / stride + 1)
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = Self::out_extent(h, self.kernel_h, self.stride, self.dilation, self.padding);
        let ow = Self::out_extent(w, self.kernel_w, self.stride, self.dilation, self.padding);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(DenetError::InvalidSpec(format!(
                "{}x{} kernel (dilation {}, padding {}) yields an empty output on a {h}x{w} input",
                self.kernel_h, self.kernel_w, self.dilation, self.padding
            ))),
        }
    }

    /// Transposed-convolution output extent, `(in - 1)s - 2p + d(k - 1) + 1`.
    pub fn transposed_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        ((input - 1) * self.stride + self.dilation * (kernel - 1) + 1).checked_sub(2 * self.padding)
    }

    /// The doubling upsampler: kernel 4, stride 2, padding 1.
    pub fn upsample2x(channels_in: usize, channels_out: usize) -> Self {
        ConvSpec { kernel_h: 4, kernel_w: 4, stride: 2, dilation: 1, padding: 1, channels_in, channels_out, depthwise_separable: false }
    }
}

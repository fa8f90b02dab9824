//! Layer structs: thin stateful wrappers over the functional ops, carrying
//! weights, seeded initialization, and a visitor for parameter enumeration.
//!
//! The visitor is the single source of truth for what a layer owns: leaf
//! registration, SGD updates, weight decay grouping, and checkpoints all
//! walk it. Names compose dot-separated ("stem.c1.conv.w").

use rand::Rng;

use crate::error::{Error, Result};
use crate::ssm::normal;
use crate::tensor::ops;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// How the optimizer treats a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Trainable, subject to weight decay (conv / linear kernels).
    Decayed,
    /// Trainable, no weight decay (biases, norm gains, SSM parameters).
    Plain,
    /// Not trainable; serialized with the model (running statistics).
    Buffer,
}

/// Visitor callback: (dotted name, slot, tensor).
pub type ParamFn<'a> = dyn FnMut(&str, Slot, &mut Tensor) + 'a;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Kaiming-style uniform init bound for a given fan-in.
fn uniform_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

fn uniform_vec<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect()
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: groups {groups} must divide channels {in_ch}/{out_ch}"
            )));
        }
        let fan_in = (in_ch / groups) * k * k;
        let bound = uniform_bound(fan_in);
        let w = Tensor::new(
            &[out_ch, in_ch / groups, k, k],
            uniform_vec(rng, out_ch * (in_ch / groups) * k * k, bound),
        )?;
        let b = if bias {
            Some(Tensor::new(&[out_ch], uniform_vec(rng, out_ch, bound))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            stride,
            pad,
            groups,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(
            tape,
            x,
            &self.w,
            self.b.as_ref(),
            self.stride,
            self.pad,
            self.groups,
        )
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        f(&join(prefix, "w"), Slot::Decayed, &mut self.w);
        if let Some(b) = self.b.as_mut() {
            f(&join(prefix, "b"), Slot::Plain, b);
        }
    }

    /// Set all weights (and bias) to zero; used to pin residual branches.
    pub fn zero(&mut self) {
        self.w.data_mut().fill(0.0);
        if let Some(b) = self.b.as_mut() {
            b.data_mut().fill(0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Scalar batch counter; zero means eval mode is not yet legal.
    pub batches_seen: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            batches_seen: Tensor::scalar(0.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Train mode normalizes with batch statistics (population variance) and
    /// folds them into the running estimates. Eval mode requires at least
    /// one prior training batch.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        if train {
            let out = ops::batchnorm2d_train(tape, x, &self.gamma, &self.beta, self.eps)?;
            let m = self.momentum;
            for (r, b) in self
                .running_mean
                .data_mut()
                .iter_mut()
                .zip(out.batch_mean.iter())
            {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self
                .running_var
                .data_mut()
                .iter_mut()
                .zip(out.batch_var.iter())
            {
                *r = (1.0 - m) * *r + m * b;
            }
            self.batches_seen.data_mut()[0] += 1.0;
            Ok(out.y)
        } else {
            if self.batches_seen.data()[0] == 0.0 {
                return Err(Error::State(
                    "batch norm used in eval mode before any training batch".into(),
                ));
            }
            ops::batchnorm2d_eval(
                tape,
                x,
                &self.gamma,
                &self.beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            )
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        f(&join(prefix, "gamma"), Slot::Plain, &mut self.gamma);
        f(&join(prefix, "beta"), Slot::Plain, &mut self.beta);
        f(&join(prefix, "rmean"), Slot::Buffer, &mut self.running_mean);
        f(&join(prefix, "rvar"), Slot::Buffer, &mut self.running_var);
        f(&join(prefix, "nbatch"), Slot::Buffer, &mut self.batches_seen);
    }
}

// ---------------------------------------------------------------------------
// LayerNorm over channels
// ---------------------------------------------------------------------------

pub struct LayerNormChannels {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormChannels {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm_channels(tape, x, &self.gamma, &self.beta, self.eps)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        f(&join(prefix, "gamma"), Slot::Plain, &mut self.gamma);
        f(&join(prefix, "beta"), Slot::Plain, &mut self.beta);
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = uniform_bound(in_f);
        Ok(Self {
            w: Tensor::new(&[out_f, in_f], uniform_vec(rng, out_f * in_f, bound))?,
            b: Tensor::new(&[out_f], uniform_vec(rng, out_f, bound))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        ops::linear(tape, x, &self.w, Some(&self.b))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        f(&join(prefix, "w"), Slot::Decayed, &mut self.w);
        f(&join(prefix, "b"), Slot::Plain, &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Conv -> BN -> SiLU, the workhorse composite
// ---------------------------------------------------------------------------

pub struct ConvBnSilu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnSilu {
    pub fn new<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(rng, in_ch, out_ch, k, stride, pad, 1, false)?,
            bn: BatchNorm2d::new(out_ch),
        })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, &y, train)?;
        ops::silu(tape, &y)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamFn) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// Normal-distributed helper re-exported for weight init at call sites that
/// want gaussians rather than uniforms.
pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| normal(rng) * std).collect()
}

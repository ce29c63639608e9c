//! Parameter containers for the layers used by the classifier and generator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::model::{Mode, ParamCursor};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-normal initialised `k×k` convolution without bias.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self {
            weight: Tensor::randn(&[cout, cin, k, k], std, rng),
            bias: None,
            stride,
            pad,
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, cur: &mut ParamCursor, x: Var) -> Var {
        let w = cur.next();
        let b = self.bias.as_ref().map(|_| cur.next());
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub(crate) fn tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

/// Transposed convolution with weights `[cin, cout, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Tensor::randn(&[cin, cout, k, k], 0.02, rng),
            bias: with_bias.then(|| Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, cur: &mut ParamCursor, x: Var) -> Var {
        let w = cur.next();
        let b = self.bias.as_ref().map(|_| cur.next());
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }

    pub(crate) fn tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inp: usize, out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[out, inp], bound, rng),
            bias: Tensor::uniform(&[out], bound, rng),
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub(crate) fn forward(&self, tape: &mut Tape, cur: &mut ParamCursor, x: Var) -> Var {
        let w = cur.next();
        let b = cur.next();
        tape.linear(x, w, b)
    }

    pub(crate) fn tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    pub(crate) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Running mean and (biased) variance of one normalisation layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn channel_count(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Returns the output and, in train mode, the batch moments.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        cur: &mut ParamCursor,
        x: Var,
        mode: Mode,
    ) -> (Var, Option<BnStats>) {
        let g = cur.next();
        let b = cur.next();
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, g, b, BN_EPS);
                (y, Some(BnStats { mean, var }))
            }
            Mode::Eval => {
                let y = tape.batch_norm_eval(
                    x,
                    g,
                    b,
                    self.running_mean.data(),
                    self.running_var.data(),
                    BN_EPS,
                );
                (y, None)
            }
        }
    }

    /// Exponential moving average towards the given batch moments.
    pub fn update_running(&mut self, batch: &BnStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&batch.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&batch.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn stats(&self) -> BnStats {
        BnStats {
            mean: self.running_mean.data().to_vec(),
            var: self.running_var.data().to_vec(),
        }
    }

    pub fn set_stats(&mut self, stats: &BnStats) {
        self.running_mean.data_mut().copy_from_slice(&stats.mean);
        self.running_var.data_mut().copy_from_slice(&stats.var);
    }

    pub(crate) fn tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    /// Trainable tensors into `out`, running statistics into `buffers`.
    pub(crate) fn tensors_mut<'a>(
        &'a mut self,
        out: &mut Vec<&'a mut Tensor>,
        buffers: &mut Vec<&'a mut Tensor>,
    ) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
        buffers.push(&mut self.running_mean);
        buffers.push(&mut self.running_var);
    }

    pub(crate) fn buffers<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.running_mean);
        out.push(&self.running_var);
    }
}

//! First-order optimizers and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerSpec {
    Sgd { momentum: f64, weight_decay: f64 },
    /// Squared-gradient averaging without a momentum buffer.
    RmsProp { alpha: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerSpec {
    pub fn classifier_default() -> Self {
        OptimizerSpec::Sgd { momentum: 0.9, weight_decay: 5e-4 }
    }

    pub fn generator_default() -> Self {
        OptimizerSpec::RmsProp { alpha: 0.99, eps: 1e-8 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerSpec::Sgd { .. } => "sgd",
            OptimizerSpec::RmsProp { .. } => "rmsprop",
            OptimizerSpec::Adam { .. } => "adam",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerSpec::Sgd { momentum, weight_decay } => (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerSpec::RmsProp { alpha, eps } => (0.0..1.0).contains(&alpha) && eps > 0.0,
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Learning rate divided by `factor` at each milestone fraction of the total steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self { milestones: vec![0.5, 0.75], factor: 10.0 }
    }
}

impl StepDecay {
    pub fn none() -> Self {
        Self { milestones: Vec::new(), factor: 1.0 }
    }

    /// Learning rate at (0-based) `step` of `total` steps.
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| step >= (m * total as f64).round() as usize)
            .count();
        base / self.factor.powi(passed as i32)
    }
}

pub struct Optimizer {
    spec: OptimizerSpec,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self { spec, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let data = p.data_mut();
            match self.spec {
                OptimizerSpec::Sgd { momentum, weight_decay } => {
                    for ((w, &gi), mi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let d = gi + weight_decay * *w;
                        *mi = momentum * *mi + d;
                        *w -= lr * *mi;
                    }
                }
                OptimizerSpec::RmsProp { alpha, eps } => {
                    for ((w, &gi), vi) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vi = alpha * *vi + (1.0 - alpha) * gi * gi;
                        *w -= lr * gi / (vi.sqrt() + eps);
                    }
                }
                OptimizerSpec::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(spec: OptimizerSpec, lr: f64, steps: usize) -> f64 {
        // minimise (w - 3)^2
        let mut w = Tensor::new(vec![1], vec![0.0]).unwrap();
        let mut opt = Optimizer::new(spec);
        for _ in 0..steps {
            let g = Tensor::new(vec![1], vec![2.0 * (w.data()[0] - 3.0)]).unwrap();
            opt.step(&mut [&mut w], &[g], lr).unwrap();
        }
        w.data()[0]
    }

    #[test]
    fn optimizers_converge_on_a_quadratic() {
        assert!((quad(OptimizerSpec::Sgd { momentum: 0.9, weight_decay: 0.0 }, 0.05, 300) - 3.0).abs() < 1e-3);
        assert!((quad(OptimizerSpec::RmsProp { alpha: 0.9, eps: 1e-8 }, 0.01, 2000) - 3.0).abs() < 0.05);
        assert!((quad(OptimizerSpec::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, 0.05, 2000) - 3.0).abs() < 1e-2);
    }

    #[test]
    fn plain_sgd_matches_hand_update() {
        let mut w = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        let mut opt = Optimizer::new(OptimizerSpec::Sgd { momentum: 0.5, weight_decay: 0.0 });
        opt.step(&mut [&mut w], &[g.clone()], 0.1).unwrap();
        assert_eq!(w.data(), &[0.95, -1.025]);
        opt.step(&mut [&mut w], &[g], 0.1).unwrap();
        // velocity 0.5·0.5 + 0.5 = 0.75
        assert!((w.data()[0] - 0.875).abs() < 1e-15);
    }

    #[test]
    fn step_decay_milestones() {
        let s = StepDecay::default();
        assert_eq!(s.lr_at(0.01, 0, 100), 0.01);
        assert_eq!(s.lr_at(0.01, 49, 100), 0.01);
        assert!((s.lr_at(0.01, 50, 100) - 0.001).abs() < 1e-18);
        assert!((s.lr_at(0.01, 99, 100) - 0.0001).abs() < 1e-18);
        assert_eq!(StepDecay::none().lr_at(0.3, 99, 100), 0.3);
    }
}

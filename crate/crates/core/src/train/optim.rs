//! Optimisers and the learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    /// Heavy-ball SGD with momentum 0.9.
    SgdMomentum,
    /// Adam with decoupled weight decay.
    AdamW,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" | "sgd-momentum" => Ok(Algorithm::SgdMomentum),
            "adamw" | "adamw-style" | "adam" => Ok(Algorithm::AdamW),
            _ => Err(Error::arg(format!("unknown optimiser '{s}' (sgd-momentum, adamw)"))),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::SgdMomentum => "sgd-momentum",
            Algorithm::AdamW => "adamw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// `lr · (1 + cos(π t / T)) / 2` over all `T` steps.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::AdamW,
            lr: 6e-4,
            schedule: Schedule::Cosine,
            epochs: 20,
            batch: 32,
            weight_decay: 1e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::arg("learning rate must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::arg("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimiser state.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    algorithm: Algorithm,
    weight_decay: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: &OptimConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect::<Vec<_>>();
        Self {
            algorithm: config.algorithm,
            weight_decay: config.weight_decay,
            first: zeros(),
            second: if config.algorithm == Algorithm::AdamW { zeros() } else { Vec::new() },
            steps: 0,
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim("optimiser state does not match the parameter list"));
        }
        self.steps += 1;
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr_t = T::from_f64_lossy(lr);
        match self.algorithm {
            Algorithm::SgdMomentum => {
                let mu = T::from_f64_lossy(MOMENTUM);
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                        *vi = mu * *vi + gi + wd * *w;
                        *w -= lr_t * *vi;
                    }
                }
            }
            Algorithm::AdamW => {
                let (b1, b2) = (T::from_f64_lossy(BETA1), T::from_f64_lossy(BETA2));
                let c1 = T::from_f64_lossy(1.0 - BETA1.powi(self.steps));
                let c2 = T::from_f64_lossy(1.0 - BETA2.powi(self.steps));
                let eps = T::from_f64_lossy(ADAM_EPS);
                let decay = T::one() - lr_t * wd;
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
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

    #[test]
    fn cosine_reaches_zero() {
        let c = OptimConfig::default();
        assert_eq!(c.lr_at(0, 100), 6e-4);
        assert!(c.lr_at(100, 100).abs() < 1e-18);
        assert!((c.lr_at(50, 100) - 3e-4).abs() < 1e-15);
    }

    #[test]
    fn minimises_quadratic() {
        for algorithm in [Algorithm::SgdMomentum, Algorithm::AdamW] {
            let cfg = OptimConfig {
                algorithm,
                lr: 0.05,
                weight_decay: 0.0,
                ..OptimConfig::default()
            };
            let mut w = Tensor::new([1, 1, 1, 2], vec![3.0f64, -2.0]).unwrap();
            let mut opt = Optimizer::new(&cfg, &[&w]);
            for _ in 0..500 {
                let g = w.data().to_vec();
                opt.step(&mut [&mut w], &[g], cfg.lr).unwrap();
            }
            assert!(w.l2_norm() < 1e-2, "{algorithm}: {:?}", w.data());
        }
    }
}

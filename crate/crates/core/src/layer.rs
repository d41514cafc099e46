//! The SineFM layer.
//!
//! A layer convolves its input with `C_s` learnable seed filters, expands the
//! resulting seed maps through `k·C_s` fixed transforms, normalises each
//! generated map and mixes them with a learnable 1×1 convolution into the
//! remaining `C_o − C_s` output channels. Output is `[seed maps, mixed maps]`,
//! before any activation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Xoshiro256;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::transforms::{HyperBounds, TransformFamily, TransformSpec};

/// Epsilon added to the centred-map norm before dividing.
pub const NORM_EPS: f64 = 1e-5;

/// Ridge term for [`fit_alpha`].
pub const FIT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SineFMConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// Seed channels.
    pub c_s: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Fan-out ratio: transforms applied per seed channel.
    pub fanout: usize,
    pub family: TransformFamily,
    pub seed: u64,
    pub bounds: HyperBounds,
}

impl SineFMConfig {
    /// A layer with the default hyperparameter ranges.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        c_s: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        fanout: usize,
        family: TransformFamily,
        seed: u64,
    ) -> Self {
        Self {
            c_in,
            c_out,
            c_s,
            kernel,
            stride,
            padding,
            fanout,
            family,
            seed,
            bounds: HyperBounds::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 {
            return Err(Error::arg("c_in must be positive"));
        }
        if self.c_s == 0 || self.c_s > self.c_out {
            return Err(Error::arg(format!(
                "seed channels must satisfy 1 <= c_s <= c_out, got c_s={} c_out={}",
                self.c_s, self.c_out
            )));
        }
        if self.fanout == 0 {
            return Err(Error::arg("fan-out ratio must be at least 1"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::arg(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.stride == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        self.bounds.validate()
    }

    pub fn plan(&self) -> Result<ChannelPlan> {
        channel_plan(self.c_out, self.c_s, self.fanout)
    }

    /// Learnable scalars: seed filters plus combination weights.
    pub fn learnable_params(&self) -> usize {
        self.c_s * self.c_in * self.kernel * self.kernel + (self.c_out - self.c_s) * self.fanout * self.c_s
    }

    pub fn transform_spec(&self) -> Result<TransformSpec> {
        TransformSpec::sample(self.seed, self.family, self.fanout * self.c_s, &self.bounds)
    }
}

/// Channel arithmetic of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelPlan {
    /// `C_s · (⌈C_o / C_s⌉ − 1)`.
    pub c_g: usize,
    /// Inputs to the 1×1 combination: `k · C_s`.
    pub combine_in: usize,
    /// Outputs of the 1×1 combination: `C_o − C_s`.
    pub combine_out: usize,
}

pub fn channel_plan(c_out: usize, c_s: usize, k: usize) -> Result<ChannelPlan> {
    if c_s == 0 || c_s > c_out {
        return Err(Error::arg(format!(
            "seed channels must satisfy 1 <= c_s <= c_out, got c_s={c_s} c_out={c_out}"
        )));
    }
    if k == 0 {
        return Err(Error::arg("fan-out ratio must be at least 1"));
    }
    Ok(ChannelPlan {
        c_g: c_s * (c_out.div_ceil(c_s) - 1),
        combine_in: k * c_s,
        combine_out: c_out - c_s,
    })
}

/// `(generated channel, source seed channel)` pairs; round-robin over seeds.
pub fn transform_channel_assignment(plan: &ChannelPlan, c_s: usize) -> Vec<(usize, usize)> {
    (0..plan.combine_in).map(|j| (j, j % c_s.max(1))).collect()
}

/// Standalone map normalisation (see [`Tape::normalize_maps`]).
pub fn normalize_maps<T: Real>(y: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(y.clone());
    let out = tape.normalize_maps(v, eps)?;
    Ok(tape.value(out).clone())
}

/// Uniform draw in `±bound`, rounded through `f32` so weights survive the
/// `f32` payload unchanged.
pub(crate) fn init_uniform<T: Real>(rng: &mut Xoshiro256, shape: Shape, fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(rng.uniform(-bound, bound) as f32 as f64))
        .collect();
    Tensor::from_vec(shape, data).expect("shape and buffer agree")
}

#[derive(Debug, Clone)]
pub struct SineFMLayer<T> {
    config: SineFMConfig,
    seed_filters: Tensor<T>,
    transform: Arc<TransformSpec>,
    /// Absent when `c_out == c_s`.
    combine: Option<Tensor<T>>,
}

impl<T: Real> SineFMLayer<T> {
    /// Builds a layer with fan-in-scaled uniform weights drawn from `rng`.
    pub fn new(config: SineFMConfig, rng: &mut Xoshiro256) -> Result<Self> {
        config.validate()?;
        let plan = config.plan()?;
        let k = config.kernel;
        let seed_filters = init_uniform(rng, Shape::new(config.c_s, config.c_in, k, k)?, config.c_in * k * k);
        let combine = if plan.combine_out > 0 {
            Some(init_uniform(rng, Shape::new(plan.combine_out, plan.combine_in, 1, 1)?, plan.combine_in))
        } else {
            None
        };
        Self::from_weights(config, seed_filters, combine)
    }

    /// Assembles a layer from explicit learnable weights; the transforms are
    /// re-derived from `config.seed`.
    pub fn from_weights(config: SineFMConfig, seed_filters: Tensor<T>, combine: Option<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let plan = config.plan()?;
        let k = config.kernel;
        let want = Shape::new(config.c_s, config.c_in, k, k)?;
        if seed_filters.shape() != want {
            return Err(Error::dim(format!("seed filters {} but config expects {want}", seed_filters.shape())));
        }
        match (&combine, plan.combine_out) {
            (None, 0) => {}
            (Some(c), n) if n > 0 => {
                let want = Shape::new(n, plan.combine_in, 1, 1)?;
                if c.shape() != want {
                    return Err(Error::dim(format!("combination weights {} but config expects {want}", c.shape())));
                }
            }
            _ => {
                return Err(Error::dim(format!(
                    "combination weights must be present exactly when c_out > c_s (c_out={}, c_s={})",
                    config.c_out, config.c_s
                )))
            }
        }
        let transform = Arc::new(config.transform_spec()?);
        Ok(Self {
            config,
            seed_filters,
            transform,
            combine,
        })
    }

    pub fn config(&self) -> &SineFMConfig {
        &self.config
    }

    pub fn transform(&self) -> &TransformSpec {
        &self.transform
    }

    pub fn seed_filters(&self) -> &Tensor<T> {
        &self.seed_filters
    }

    pub fn combine(&self) -> Option<&Tensor<T>> {
        self.combine.as_ref()
    }

    /// Learnable tensors in a fixed order: seed filters, then combination.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        std::iter::once(&self.seed_filters).chain(self.combine.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        std::iter::once(&mut self.seed_filters).chain(self.combine.as_mut()).collect()
    }

    /// Records the layer on `tape`. Learnable weights are registered as
    /// differentiable leaves and appended to `param_vars` in
    /// [`params`](Self::params) order.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, param_vars: &mut Vec<Var>) -> Result<Var> {
        let w = tape.param(&self.seed_filters);
        param_vars.push(w);
        let alpha = self.combine.as_ref().map(|c| tape.param(c));
        param_vars.extend(alpha);
        self.forward_with(tape, x, w, alpha)
    }

    /// Records the layer with caller-supplied weight variables in place of
    /// the stored tensors.
    pub fn forward_with(&self, tape: &mut Tape<T>, x: Var, seed_filters: Var, combine: Option<Var>) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.c() != self.config.c_in {
            return Err(Error::dim(format!(
                "SineFM layer expects {} input channels, got {}",
                self.config.c_in,
                xs.c()
            )));
        }
        if tape.shape(seed_filters) != self.seed_filters.shape()
            || combine.map(|c| tape.shape(c)) != self.combine.as_ref().map(Tensor::shape)
        {
            return Err(Error::dim("weight variables do not match the layer's shapes"));
        }
        let seed_maps = tape.conv2d(x, seed_filters, self.config.stride, self.config.padding)?;
        let Some(alpha) = combine else {
            return Ok(seed_maps);
        };
        let generated = tape.generate(seed_maps, Arc::clone(&self.transform))?;
        let normalized = tape.normalize_maps(generated, T::from_f64_lossy(NORM_EPS))?;
        let mixed = tape.conv2d(normalized, alpha, 1, 0)?;
        tape.concat_channels(&[seed_maps, mixed])
    }

    /// Inference-only forward pass.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, &mut Vec::new())?;
        Ok(tape.value(out).clone())
    }
}

/// Result of fitting combination weights to a standard filter.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaFit {
    pub alpha: Vec<f64>,
    /// Root-mean-square residual over patches.
    pub residual: f64,
    /// The rectified response matrix was identically zero.
    pub degenerate: bool,
}

/// Gathers every zero-padded `K×K` patch of `x` as a `P×C×K×K` tensor
/// (`P = N·H'·W'`).
pub fn extract_patches(x: &Tensor<f64>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<f64>> {
    let s = x.shape();
    let ho = crate::tape::conv_out_extent(s.h(), kernel, stride, pad)
        .ok_or_else(|| Error::dim("kernel larger than padded input"))?;
    let wo = crate::tape::conv_out_extent(s.w(), kernel, stride, pad)
        .ok_or_else(|| Error::dim("kernel larger than padded input"))?;
    let mut data = Vec::with_capacity(s.n() * ho * wo * s.c() * kernel * kernel);
    for n in 0..s.n() {
        for i in 0..ho {
            for j in 0..wo {
                for c in 0..s.c() {
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let ii = (i * stride + ki) as isize - pad as isize;
                            let jj = (j * stride + kj) as isize - pad as isize;
                            let inside = ii >= 0 && jj >= 0 && (ii as usize) < s.h() && (jj as usize) < s.w();
                            data.push(if inside { x.at(n, c, ii as usize, jj as usize) } else { 0.0 });
                        }
                    }
                }
            }
        }
    }
    Tensor::new([s.n() * ho * wo, s.c(), kernel, kernel], data)
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Least-squares combination weights that make a single-seed SineFM unit
/// imitate one standard filter followed by ReLU.
///
/// Row `π` of the design matrix holds `relu(φ_i(w_sᵀ x_π))` for each of the
/// `m = spec.len()` transforms; the target is `relu(wᵀ x_π)`. Solved through
/// ridge-regularised normal equations.
pub fn fit_alpha(
    seed_filter: &Tensor<f64>,
    spec: &TransformSpec,
    target_filter: &Tensor<f64>,
    patches: &Tensor<f64>,
) -> Result<AlphaFit> {
    let d = seed_filter.len();
    if target_filter.len() != d {
        return Err(Error::dim(format!(
            "seed filter has {d} taps but target filter has {}",
            target_filter.len()
        )));
    }
    let ps = patches.shape();
    if ps.c() * ps.hw() != d {
        return Err(Error::dim(format!("patches {ps} do not match filters of {d} taps")));
    }
    let (p, m) = (ps.n(), spec.len());
    if p < m {
        return Err(Error::arg(format!("need at least {m} patches for {m} transforms, got {p}")));
    }
    let dot = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    let mut design = DMatrix::<f64>::zeros(p, m);
    let mut target = DVector::<f64>::zeros(p);
    for (pi, patch) in patches.data().chunks(d).enumerate() {
        let s = dot(seed_filter.data(), patch);
        for i in 0..m {
            design[(pi, i)] = relu(spec.eval(i, s));
        }
        target[pi] = relu(dot(target_filter.data(), patch));
    }
    let rms = |v: &DVector<f64>| (v.norm_squared() / p as f64).sqrt();
    if design.iter().all(|&v| v == 0.0) {
        return Ok(AlphaFit {
            alpha: vec![0.0; m],
            residual: rms(&target),
            degenerate: true,
        });
    }
    let gram = design.transpose() * &design + DMatrix::<f64>::identity(m, m) * FIT_RIDGE;
    let rhs = design.transpose() * &target;
    let alpha = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric("normal equations are singular".into()))?,
    };
    let residual = rms(&(&design * &alpha - &target));
    Ok(AlphaFit {
        alpha: alpha.iter().copied().collect(),
        residual,
        degenerate: false,
    })
}

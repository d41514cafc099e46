//! Central-difference validation of tape gradients.

use crate::error::{Error, Result};
use crate::layer::{SineFMConfig, SineFMLayer};
use crate::rng::{derive_seed, stream, Xoshiro256};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::transforms::TransformFamily;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked elements of `|a − n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(parameter, element)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Elements whose difference stencil crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

fn evaluate<F>(forward: &F, params: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().with_kink_tracking();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = forward(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::arg(format!("grad_check needs a scalar function, got {}", v.shape())));
    }
    Ok((v.data()[0], tape.kink_signature()))
}

/// Compares the tape gradient of `forward` against central differences with
/// step `eps`, over every element of every parameter.
///
/// Elements whose `±eps` stencil changes any ReLU sign or max-pool winner are
/// excluded; there the subgradient is not a derivative.
pub fn grad_check_report<F>(forward: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let mut tape = Tape::new().with_kink_tracking();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = forward(&mut tape, &vars)?;
    let base_sig = tape.kink_signature();
    let base_value = tape.value(out).data().first().copied().unwrap_or(f64::NAN);
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap_or(&[]).to_vec()).collect();

    let (again, again_sig) = evaluate(&forward, params)?;
    if again.to_bits() != base_value.to_bits() || again_sig != base_sig {
        return Err(Error::Validation(format!(
            "function is not deterministic: {base_value:e} then {again:e}"
        )));
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for p in 0..work.len() {
        for e in 0..work[p].len() {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + eps;
            let (fp, sp) = evaluate(&forward, &work)?;
            work[p].data_mut()[e] = orig - eps;
            let (fm, sm) = evaluate(&forward, &work)?;
            work[p].data_mut()[e] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[p][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((p, e));
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn grad_check<F>(forward: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_report(forward, params, eps).map(|r| r.max_rel_error)
}

/// Gradient check of one SineFM layer (`c_in=3, c_s=2, c_out=8, k=3, K=3`,
/// input `2×3×8×8`) under the loss `Σ out ⊙ R` for a fixed random `R`.
/// Every random draw derives from `seed`.
pub fn layer_grad_check(family: TransformFamily, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let config = SineFMConfig::new(3, 8, 2, 3, 1, 1, 3, family, derive_seed(seed, stream::TRANSFORMS));
    let mut init = Xoshiro256::seed_from_u64(derive_seed(seed, stream::INIT));
    let layer = SineFMLayer::<f64>::new(config, &mut init)?;
    let mut data = Xoshiro256::seed_from_u64(derive_seed(seed, stream::DATA));
    let mut normal = |shape: Shape| {
        let v: Vec<f64> = (0..shape.numel()).map(|_| data.normal()).collect();
        Tensor::from_vec(shape, v)
    };
    let x = normal(Shape::new(2, 3, 8, 8)?)?;
    let r = normal(Shape::new(2, 8, 8, 8)?)?;
    let params: Vec<Tensor<f64>> = layer.params().into_iter().cloned().collect();
    grad_check_report(
        |tape, vars| {
            let xv = tape.constant(x.clone());
            let rv = tape.constant(r.clone());
            let out = layer.forward_with(tape, xv, vars[0], vars.get(1).copied())?;
            let weighted = tape.mul(out, rv)?;
            tape.sum(weighted)
        },
        &params,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn exact_quadratic() {
        let x = Tensor::new([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::new([1, 1, 1, 3], vec![0.0, 1.5, -2.0]).unwrap();
        let r = grad_check_report(
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum(r)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn nondeterminism_is_rejected() {
        let calls = Cell::new(0u32);
        let x = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let err = grad_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let s = t.scale(v[0], calls.get() as f64)?;
                t.sum(s)
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn layer_suite_sinusoidal() {
        let r = layer_grad_check(TransformFamily::Sinusoidal, 0, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.checked + r.skipped, 2 * 3 * 9 + 6 * 6);
    }
}

//! Finite-difference verification of tape gradients.

use crate::error::AdError;

use super::tape::{ParamSet, Tape, ValueRef};
use super::tensor::Tensor;

/// Check the gradient of a scalar function of one vector argument.
///
/// `f` rebuilds the computation on a fresh tape from an input node holding
/// the current point. Returns the maximum over coordinates of
/// `|analytic − central difference| / max(1, |analytic|)`.
pub fn gradcheck<F>(f: F, point: &[f64], eps: f64) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, ValueRef) -> Result<ValueRef, AdError>,
{
    let params = ParamSet::new();

    let eval = |xs: &[f64]| -> Result<f64, AdError> {
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(xs.to_vec()));
        let y = f(&mut tape, x)?;
        let t = tape.value(y);
        t.check_finite("gradcheck evaluation")?;
        Ok(t.item())
    };

    // Analytic gradient at the point.
    let analytic = {
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(point.to_vec()));
        let y = f(&mut tape, x)?;
        tape.value(y).check_finite("gradcheck evaluation")?;
        let grads = tape.backward(y);
        grads.grad_or_zeros(x, point.len())
    };

    let mut max_err = 0.0f64;
    let mut xs = point.to_vec();
    for i in 0..xs.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let fp = eval(&xs)?;
        xs[i] = orig - eps;
        let fm = eval(&xs)?;
        xs[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Check gradients of a scalar function of every parameter in `params`.
///
/// `build` constructs the scalar on a fresh tape; it is re-run for each
/// perturbed coordinate, so it must be deterministic.
pub fn gradcheck_params<F>(params: &mut ParamSet, eps: f64, build: F) -> Result<f64, AdError>
where
    F: Fn(&ParamSet, &mut Tape) -> Result<ValueRef, AdError>,
{
    let (value_check, analytic) = {
        let mut tape = Tape::new(params);
        let root = build(params, &mut tape)?;
        tape.value(root).check_finite("gradcheck evaluation")?;
        let grads = tape.backward(root);
        let per_param: Vec<Vec<f64>> = params
            .iter()
            .map(|(id, _, t)| grads.grad_or_zeros(ValueRef::Param(id), t.numel()))
            .collect();
        (tape.value(root).item(), per_param)
    };
    if !value_check.is_finite() {
        return Err(AdError::NonFinite { context: "gradcheck evaluation", detail: String::new() });
    }

    let eval = |params: &ParamSet| -> Result<f64, AdError> {
        let mut tape = Tape::new(params);
        let root = build(params, &mut tape)?;
        let t = tape.value(root);
        t.check_finite("gradcheck evaluation")?;
        Ok(t.item())
    };

    let n_params = params.len();
    let mut max_err = 0.0f64;
    for p in 0..n_params {
        let numel = params.tensor(super::tape::ParamId(p)).numel();
        for i in 0..numel {
            let id = super::tape::ParamId(p);
            let orig = params.tensor(id).values()[i];
            params.tensor_mut(id).values_mut()[i] = orig + eps;
            let fp = eval(params)?;
            params.tensor_mut(id).values_mut()[i] = orig - eps;
            let fm = eval(params)?;
            params.tensor_mut(id).values_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic[p][i];
            let err = (a - fd).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_near_exact() {
        // f(x) = Σ x², analytic gradient [2, 4] at [1, 2].
        let err = gradcheck(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.dot_const(sq, vec![1.0, 1.0]))
            },
            &[1.0, 2.0],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "err = {err}");

        // And the analytic gradient itself is [2, 4].
        let params = ParamSet::new();
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.dot_const(sq, vec![1.0, 1.0]);
        let g = tape.backward(s);
        assert_eq!(g.node_grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn linear_function_is_exact_under_fd() {
        let err = gradcheck(
            |tape, x| Ok(tape.dot_const(x, vec![3.0, -2.0, 0.5])),
            &[0.2, -1.0, 4.0],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "err = {err}");
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        let err = gradcheck(
            |tape, x| {
                let y = tape.kl_div(vec![1.0], x, None);
                // log of a negative clamped value stays finite; force a NaN
                // through a degenerate weighted sum instead.
                Ok(tape.weighted_sum_scalars(vec![y], vec![f64::NAN]))
            },
            &[0.5],
            1e-5,
        );
        assert!(err.is_err());
    }
}

//! Central finite-difference verification of recorded gradients.

use super::tape::{Tape, Var};
use super::tensor::{Tensor, TensorError};

/// Relative error between an analytic and a numeric derivative, floored so
/// near-zero gradients do not explode the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check the gradient of a scalar-valued function of one tensor.
///
/// `f` must rebuild the same computation on any tape it is given. Returns the
/// maximum relative error over all coordinates of `x`.
pub fn check_gradients<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let errs = check_param_gradients(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        h,
    )?;
    Ok(errs[0])
}

/// Check the gradient of a scalar-valued function of several tensors,
/// returning the per-tensor maximum relative error.
pub fn check_param_gradients<F>(
    f: F,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    {
        let lv = tape.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                got: lv.shape().to_vec(),
            });
        }
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.value(v).grad.clone().expect("populated by backward"))
        .collect();
    drop(tape);

    let eval = |tensors: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut errors = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        for ci in 0..work[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_err = max_err.max(relative_error(grads[ci], numeric));
        }
        errors.push(max_err);
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = RngStream::new(1);
        let x = Tensor::uniform(vec![6], -1.0, 1.0, &mut rng);
        let coef = Tensor::uniform(vec![6], -2.0, 2.0, &mut rng);
        let err = check_gradients(
            |tape, xv| {
                let c = tape.constant(coef.clone());
                let prod = tape.mul_elem(xv, c)?;
                tape.sum_all(prod)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "linear gradcheck error {err}");
    }

    #[test]
    fn sigmoid_at_zero_has_quarter_slope() {
        let x = Tensor::vector(vec![0.0]);
        // Analytic derivative at 0 is exactly 0.25; the checker must agree
        // with the central difference to high accuracy.
        let err = check_gradients(
            |tape, xv| {
                let s = tape.sigmoid(xv)?;
                tape.sum_all(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "sigmoid gradcheck error {err}");

        let mut tape = Tape::new();
        let xv = tape.leaf(x.with_grad());
        let s = tape.sigmoid(xv).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(xv).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn composed_nonlinear_graph_passes() {
        let mut rng = RngStream::new(3);
        let x = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(vec![4, 4], -0.7, 0.7, &mut rng);
        let gamma = Tensor::vector(vec![1.0, 0.9, 1.1, 1.2]);
        let beta = Tensor::vector(vec![0.1, -0.1, 0.0, 0.2]);
        // Read the softmax out through fixed weights; summing it directly
        // would be a constant function with an all-zero gradient.
        let readout = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let errs = check_param_gradients(
            |tape, vars| {
                let h = tape.matmul(vars[0], vars[1])?;
                let n = tape.layer_norm(h, vars[2], vars[3], 1e-5)?;
                let a = tape.relu(n)?;
                let s = tape.softmax(a, 1)?;
                let c = tape.constant(readout.clone());
                let weighted = tape.mul_elem(s, c)?;
                tape.sum_all(weighted)
            },
            &[x, w, gamma, beta],
            1e-5,
        )
        .unwrap();
        for (i, e) in errs.iter().enumerate() {
            assert!(*e < 1e-7, "param {i} gradcheck error {e}");
        }
    }

    #[test]
    fn dropout_backward_matches_reseeded_finite_differences() {
        let mut rng = RngStream::new(4);
        let x = Tensor::uniform(vec![40], -1.0, 1.0, &mut rng);
        // Reseeding inside the closure makes the mask identical on every
        // evaluation, so the stochastic layer becomes a fixed linear map.
        let err = check_gradients(
            |tape, xv| {
                let mut drop_rng = RngStream::new(123);
                let d = tape.dropout(xv, 0.4, true, &mut drop_rng)?;
                tape.sum_all(d)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "dropout gradcheck error {err}");
    }
}

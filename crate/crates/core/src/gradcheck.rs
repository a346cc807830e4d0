//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compare the tape gradient of a scalar function against central finite
/// differences at every coordinate of `x`.
///
/// Returns max over coordinates of
/// |analytic - central| / max(|analytic|, |central|, 1e-12).
pub fn finite_difference_check(
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    step: f64,
) -> Result<f64> {
    finite_difference_check_multi(|tape, vars| f(tape, vars[0]), &[x.clone()], step)
}

/// Multi-input variant: `f` receives one differentiable leaf per input and
/// must return a scalar root. The reported error is the max over all
/// inputs and coordinates.
pub fn finite_difference_check_multi(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::config("finite difference step must be > 0"));
    }

    // analytic gradients from one recorded pass
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let root = f(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Contract(
            "finite_difference_check: function must be scalar-valued".to_string(),
        ));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<_>>()?;
        let root = f(&mut tape, &vars)?;
        let v = tape.value(root).item()?;
        if !v.is_finite() {
            return Err(Error::numeric(
                "finite_difference_check: non-finite function value",
            ));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let orig = input.data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = orig - step;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = orig;

            let central = (fp - fm) / (2.0 * step);
            let a = analytic[ti].data()[ci];
            let err = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

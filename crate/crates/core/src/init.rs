//! Weight initialization: truncated normal (std 0.02) for projections and
//! convolutions, zeros for biases, ones/zeros for norm affines.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{PId, Params};
use crate::rng::trunc_normal;
use crate::tensor::{Element, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Dense weight [in, out] plus a zero bias [out].
pub fn dense<E: Element>(
    params: &mut Params<E>,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(PId, PId)> {
    let w = params.add(
        format!("{name}.w"),
        trunc_normal(rng, &[rows, cols], INIT_STD),
    )?;
    let b = params.add(format!("{name}.b"), Tensor::zeros(&[cols]))?;
    Ok((w, b))
}

/// Convolution kernel [c_out, c_in_per_group, k, k] plus zero bias [c_out].
pub fn conv<E: Element>(
    params: &mut Params<E>,
    name: &str,
    c_out: usize,
    c_in_per_group: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(PId, PId)> {
    let w = params.add(
        format!("{name}.w"),
        trunc_normal(rng, &[c_out, c_in_per_group, k, k], INIT_STD),
    )?;
    let b = params.add(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
    Ok((w, b))
}

/// Transposed-convolution kernel [c_in, c_out_per_group, k, k] plus bias.
pub fn conv_transposed<E: Element>(
    params: &mut Params<E>,
    name: &str,
    c_in: usize,
    c_out_per_group: usize,
    c_out: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(PId, PId)> {
    let w = params.add(
        format!("{name}.w"),
        trunc_normal(rng, &[c_in, c_out_per_group, k, k], INIT_STD),
    )?;
    let b = params.add(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
    Ok((w, b))
}

/// LayerNorm affine: gamma ones, beta zeros.
pub fn norm_affine<E: Element>(
    params: &mut Params<E>,
    name: &str,
    c: usize,
) -> Result<(PId, PId)> {
    let gamma = params.add(format!("{name}.gamma"), Tensor::ones(&[c]))?;
    let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[c]))?;
    Ok((gamma, beta))
}

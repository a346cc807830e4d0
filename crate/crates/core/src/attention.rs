//! Linear attention in global and recurrent form, the quadratic softmax
//! baseline, and exact multiply-add accounting for the complexity claim.
//!
//! The kernels here are single-head and allocation-light; the model uses
//! the tape compositions at the bottom so gradients come for free.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Additive guard on attention denominators.
pub const DENOM_EPS: f64 = 1e-6;

/// The positive feature map phi(x) = elu(x) + 1.
pub fn feature_map_phi<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| {
        if v >= E::zero() {
            v + E::one()
        } else {
            v.exp()
        }
    })
}

fn check_qkv<E: Element>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>) -> Result<(usize, usize, usize)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape("attention kernels take rank-2 Q, K, V"));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    if k.shape() != [n, d] || v.shape()[0] != n {
        return Err(Error::shape(format!(
            "attention: Q {:?}, K {:?}, V {:?} inconsistent",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if n == 0 {
        return Err(Error::shape("attention: need at least one position"));
    }
    Ok((n, d, v.shape()[1]))
}

fn check_positive<E: Element>(t: &Tensor<E>, who: &str) -> Result<()> {
    if t.data().iter().any(|&v| v <= E::zero()) {
        return Err(Error::Validation(format!(
            "{who} must be strictly positive (apply the feature map first)"
        )));
    }
    Ok(())
}

/// Global (non-causal) linear attention:
/// y_i = Q_i (sum_j K_j^T V_j) / (Q_i (sum_j K_j^T) + eps).
pub fn linear_attention_global<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, d, dv) = check_qkv(q, k, v)?;
    check_positive(q, "Q")?;
    check_positive(k, "K")?;

    // shared sums over all positions, accumulated in position order
    let mut s = vec![E::zero(); d * dv];
    let mut z = vec![E::zero(); d];
    for j in 0..n {
        let k_j = &k.data()[j * d..(j + 1) * d];
        let v_j = &v.data()[j * dv..(j + 1) * dv];
        for a in 0..d {
            let ka = k_j[a];
            z[a] = z[a] + ka;
            let row = &mut s[a * dv..(a + 1) * dv];
            for b in 0..dv {
                row[b] = row[b] + ka * v_j[b];
            }
        }
    }

    let eps = E::from_f64(DENOM_EPS);
    let mut out = vec![E::zero(); n * dv];
    for i in 0..n {
        let q_i = &q.data()[i * d..(i + 1) * d];
        let mut den = E::zero();
        let y = &mut out[i * dv..(i + 1) * dv];
        for a in 0..d {
            let qa = q_i[a];
            den = den + qa * z[a];
            let row = &s[a * dv..(a + 1) * dv];
            for b in 0..dv {
                y[b] = y[b] + qa * row[b];
            }
        }
        den = den + eps;
        if !(den > E::zero()) || !den.is_finite() {
            return Err(Error::numeric(format!(
                "linear attention denominator degenerate at position {i}"
            )));
        }
        let inv = den.recip();
        for b in 0..dv {
            y[b] = y[b] * inv;
        }
    }
    Tensor::new(vec![n, dv], out)
}

/// Running prefix sums of the recurrent form.
pub struct RecurrentState<E: Element> {
    /// S_i = sum_{j<=i} K_j^T V_j, shape [d, d_v].
    pub s: Tensor<E>,
    /// Z_i = sum_{j<=i} K_j^T, shape [d].
    pub z: Tensor<E>,
}

impl<E: Element> RecurrentState<E> {
    pub fn new(d: usize, dv: usize) -> Self {
        RecurrentState {
            s: Tensor::zeros(&[d, dv]),
            z: Tensor::zeros(&[d]),
        }
    }

    /// Fold position i into the state: S += K_i^T V_i, Z += K_i^T.
    pub fn step(&mut self, k_i: &[E], v_i: &[E]) {
        let d = self.z.numel();
        let dv = v_i.len();
        let s = self.s.data_mut();
        let z = self.z.data_mut();
        for a in 0..d {
            let ka = k_i[a];
            z[a] = z[a] + ka;
            let row = &mut s[a * dv..(a + 1) * dv];
            for b in 0..dv {
                row[b] = row[b] + ka * v_i[b];
            }
        }
    }

    /// y_i = Q_i S_i / (Q_i Z_i + eps).
    pub fn output(&self, q_i: &[E]) -> Result<Vec<E>> {
        let d = self.z.numel();
        let dv = self.s.numel() / d;
        let mut y = vec![E::zero(); dv];
        let mut den = E::zero();
        for a in 0..d {
            let qa = q_i[a];
            den = den + qa * self.z.data()[a];
            let row = &self.s.data()[a * dv..(a + 1) * dv];
            for b in 0..dv {
                y[b] = y[b] + qa * row[b];
            }
        }
        den = den + E::from_f64(DENOM_EPS);
        if !(den > E::zero()) || !den.is_finite() {
            return Err(Error::numeric(
                "recurrent linear attention denominator degenerate",
            ));
        }
        let inv = den.recip();
        for b in y.iter_mut() {
            *b = *b * inv;
        }
        Ok(y)
    }
}

/// Causal recurrent linear attention: one O(N d d_v) pass over positions.
pub fn linear_attention_recurrent<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (n, d, dv) = check_qkv(q, k, v)?;
    check_positive(q, "Q")?;
    check_positive(k, "K")?;
    let mut state = RecurrentState::new(d, dv);
    let mut out = vec![E::zero(); n * dv];
    for i in 0..n {
        state.step(&k.data()[i * d..(i + 1) * d], &v.data()[i * dv..(i + 1) * dv]);
        let y = state.output(&q.data()[i * d..(i + 1) * d])?;
        out[i * dv..(i + 1) * dv].copy_from_slice(&y);
    }
    Tensor::new(vec![n, dv], out)
}

/// Quadratic softmax attention baseline, streamed per query row so memory
/// stays O(N) even at large N.
pub fn softmax_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    scale: E,
) -> Result<Tensor<E>> {
    let (n, d, dv) = check_qkv(q, k, v)?;
    let mut out = vec![E::zero(); n * dv];
    let mut logits = vec![E::zero(); n];
    for i in 0..n {
        let q_i = &q.data()[i * d..(i + 1) * d];
        let mut max = E::neg_infinity();
        for j in 0..n {
            let k_j = &k.data()[j * d..(j + 1) * d];
            let mut dot = E::zero();
            for a in 0..d {
                dot = dot + q_i[a] * k_j[a];
            }
            let l = dot * scale;
            logits[j] = l;
            if l > max {
                max = l;
            }
        }
        let mut sum = E::zero();
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum = sum + *l;
        }
        let inv = sum.recip();
        let y = &mut out[i * dv..(i + 1) * dv];
        for j in 0..n {
            let w = logits[j] * inv;
            let v_j = &v.data()[j * dv..(j + 1) * dv];
            for b in 0..dv {
                y[b] = y[b] + w * v_j[b];
            }
        }
    }
    Tensor::new(vec![n, dv], out)
}

/// Which attention kernel a count or measurement refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Linear,
    Softmax,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Linear => "linear",
            AttentionKind::Softmax => "softmax",
        }
    }
}

/// Exact arithmetic-operation count of one kernel invocation.
///
/// Linear:  S (n d d_v MACs) + Z (n d adds) + numerators (n d d_v MACs)
///          + denominators (n d MACs) + divisions (n d_v).
/// Softmax: logits (n^2 d MACs) + scale (n^2) + exp (n^2) + row sums (n^2)
///          + normalize (n^2) + AV (n^2 d_v MACs).
pub fn attention_flops(kind: AttentionKind, n: u64, d: u64, d_v: u64) -> u64 {
    match kind {
        AttentionKind::Linear => 2 * n * d * d_v + 2 * n * d + n * d_v,
        AttentionKind::Softmax => n * n * (d + d_v + 4),
    }
}

/// Least-squares fit of ln(y) = intercept + slope * ln(x).
/// Returns (slope, intercept, rms residual).
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::config(
            "slope fit needs at least two matching samples",
        ));
    }
    if xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(Error::config("slope fit needs positive samples"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        cov += (x - mx) * (y - my);
        var += (x - mx) * (x - mx);
    }
    let slope = cov / var;
    let intercept = my - slope * mx;
    let rss: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    Ok((slope, intercept, (rss / n).sqrt()))
}

// ── tape compositions (differentiable) ──────────────────────────────

/// Global linear attention over batched heads: q, k are [..., N, d] and
/// already feature-mapped positive; v is [..., N, d_v].
pub fn tape_linear_attention_global<E: Element>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let rank = tape.shape(q).len();
    if rank < 2 {
        return Err(Error::shape("tape linear attention: rank >= 2"));
    }
    let kt = tape.transpose_last2(k)?;
    let s = tape.matmul(kt, v)?; // [..., d, d_v]
    let num = tape.matmul(q, s)?; // [..., N, d_v]
    let z = tape.sum_axis(k, rank - 2)?; // [..., d]
    let mut zshape = tape.shape(z).to_vec();
    zshape.push(1);
    let zc = tape.reshape(z, zshape)?; // [..., d, 1]
    let den = tape.matmul(q, zc)?; // [..., N, 1]
    let den = tape.add_scalar(den, E::from_f64(DENOM_EPS))?;
    tape.div(num, den)
}

/// Softmax attention as a differentiable composition (for gradient checks
/// and comparisons, not used inside the model).
pub fn tape_softmax_attention<E: Element>(
    tape: &mut Tape<E>,
    q: Var,
    k: Var,
    v: Var,
    scale: E,
) -> Result<Var> {
    let kt = tape.transpose_last2(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.mul_scalar(logits, scale)?;
    let probs = tape.softmax(scaled)?;
    tape.matmul(probs, v)
}

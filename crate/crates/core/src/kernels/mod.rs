//! Raw numeric kernels on flat row-major buffers.
//!
//! The tape dispatches here for both forward and backward; everything is
//! single-threaded with a fixed accumulation order, so repeated runs are
//! bitwise identical.

pub mod broadcast;
pub mod conv;
pub mod matmul;

use crate::tensor::Element;

/// Row-wise layer normalization over the last axis.
/// Returns per-row (mean, invstd) for the backward pass.
pub fn layer_norm_fwd<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    eps: E,
    cols: usize,
    out: &mut [E],
) -> (Vec<E>, Vec<E>) {
    let rows = x.len() / cols;
    let mut means = Vec::with_capacity(rows);
    let mut invstds = Vec::with_capacity(rows);
    let n = E::from_f64(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut sum = E::zero();
        for &v in row {
            sum = sum + v;
        }
        let mean = sum / n;
        let mut var = E::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let invstd = (var + eps).sqrt().recip();
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out_row[c] = (row[c] - mean) * invstd * gamma[c] + beta[c];
        }
        means.push(mean);
        invstds.push(invstd);
    }
    (means, invstds)
}

pub fn layer_norm_bwd<E: Element>(
    x: &[E],
    gamma: &[E],
    means: &[E],
    invstds: &[E],
    dy: &[E],
    cols: usize,
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
) {
    let rows = x.len() / cols;
    let n = E::from_f64(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let mean = means[r];
        let invstd = invstds[r];
        // dxhat = dy * gamma; two row means feed the normalized-input rule
        let mut sum_dxhat = E::zero();
        let mut sum_dxhat_xhat = E::zero();
        for c in 0..cols {
            let xhat = (row[c] - mean) * invstd;
            let dxhat = dy_row[c] * gamma[c];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            dgamma[c] = dgamma[c] + dy_row[c] * xhat;
            dbeta[c] = dbeta[c] + dy_row[c];
        }
        let m1 = sum_dxhat / n;
        let m2 = sum_dxhat_xhat / n;
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let xhat = (row[c] - mean) * invstd;
            let dxhat = dy_row[c] * gamma[c];
            dx_row[c] = dx_row[c] + invstd * (dxhat - m1 - xhat * m2);
        }
    }
}

/// Row-wise softmax over the last axis (max-subtracted).
pub fn softmax_fwd<E: Element>(x: &[E], cols: usize, out: &mut [E]) {
    let rows = x.len() / cols;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut sum = E::zero();
        for c in 0..cols {
            let e = (row[c] - max).exp();
            out_row[c] = e;
            sum = sum + e;
        }
        let inv = sum.recip();
        for v in out_row.iter_mut() {
            *v = *v * inv;
        }
    }
}

pub fn softmax_bwd<E: Element>(y: &[E], dy: &[E], cols: usize, dx: &mut [E]) {
    let rows = y.len() / cols;
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let dy_row = &dy[r * cols..(r + 1) * cols];
        let mut dot = E::zero();
        for c in 0..cols {
            dot = dot + y_row[c] * dy_row[c];
        }
        let dx_row = &mut dx[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dx_row[c] = dx_row[c] + y_row[c] * (dy_row[c] - dot);
        }
    }
}

/// Pairwise rotation tables applied to `[.., seq, dim]`.
/// `cos`/`sin` are `[seq, dim/2]`; pair (2i, 2i+1) rotates by the i-th angle.
pub fn rope_fwd<E: Element>(x: &[E], cos: &[E], sin: &[E], seq: usize, dim: usize, out: &mut [E]) {
    let half = dim / 2;
    let block = seq * dim;
    let batches = x.len() / block;
    for b in 0..batches {
        for l in 0..seq {
            let xb = &x[b * block + l * dim..b * block + (l + 1) * dim];
            let ob = &mut out[b * block + l * dim..b * block + (l + 1) * dim];
            let cs = &cos[l * half..(l + 1) * half];
            let sn = &sin[l * half..(l + 1) * half];
            for i in 0..half {
                let x0 = xb[2 * i];
                let x1 = xb[2 * i + 1];
                ob[2 * i] = x0 * cs[i] - x1 * sn[i];
                ob[2 * i + 1] = x0 * sn[i] + x1 * cs[i];
            }
        }
    }
}

/// Backward of `rope_fwd`: rotate the upstream gradient by the negated angles.
pub fn rope_bwd<E: Element>(dy: &[E], cos: &[E], sin: &[E], seq: usize, dim: usize, dx: &mut [E]) {
    let half = dim / 2;
    let block = seq * dim;
    let batches = dy.len() / block;
    for b in 0..batches {
        for l in 0..seq {
            let gb = &dy[b * block + l * dim..b * block + (l + 1) * dim];
            let ob = &mut dx[b * block + l * dim..b * block + (l + 1) * dim];
            let cs = &cos[l * half..(l + 1) * half];
            let sn = &sin[l * half..(l + 1) * half];
            for i in 0..half {
                let g0 = gb[2 * i];
                let g1 = gb[2 * i + 1];
                ob[2 * i] = ob[2 * i] + g0 * cs[i] + g1 * sn[i];
                ob[2 * i + 1] = ob[2 * i + 1] - g0 * sn[i] + g1 * cs[i];
            }
        }
    }
}

/// Regroup `[B, H*W, r*r*C]` into `[B, rH*rW, C]`: every sequence position
/// expands into an r-by-r spatial patch. Pure element permutation.
pub fn patch_regroup_fwd<E: Element>(
    x: &[E],
    h: usize,
    w: usize,
    r: usize,
    c: usize,
    out: &mut [E],
) {
    let l_in = h * w;
    let block_in = l_in * r * r * c;
    let w_out = w * r;
    let block_out = block_in;
    let batches = x.len() / block_in;
    for b in 0..batches {
        for y in 0..h {
            for xg in 0..w {
                let src_pos = &x[b * block_in + (y * w + xg) * r * r * c..];
                for dy in 0..r {
                    for dx in 0..r {
                        let src = &src_pos[(dy * r + dx) * c..(dy * r + dx + 1) * c];
                        let orow = (y * r + dy) * w_out + (xg * r + dx);
                        let dst = &mut out[b * block_out + orow * c..b * block_out + (orow + 1) * c];
                        dst.copy_from_slice(src);
                    }
                }
            }
        }
    }
}

/// Exact inverse of `patch_regroup_fwd`.
pub fn patch_regroup_inv<E: Element>(
    y: &[E],
    h: usize,
    w: usize,
    r: usize,
    c: usize,
    out: &mut [E],
) {
    let l_in = h * w;
    let block = l_in * r * r * c;
    let w_out = w * r;
    let batches = y.len() / block;
    for b in 0..batches {
        for yy in 0..h {
            for xg in 0..w {
                let dst_pos = b * block + (yy * w + xg) * r * r * c;
                for dy in 0..r {
                    for dx in 0..r {
                        let orow = (yy * r + dy) * w_out + (xg * r + dx);
                        let src = &y[b * block + orow * c..b * block + (orow + 1) * c];
                        let dst = &mut out[dst_pos + (dy * r + dx) * c..dst_pos + (dy * r + dx + 1) * c];
                        dst.copy_from_slice(src);
                    }
                }
            }
        }
    }
}

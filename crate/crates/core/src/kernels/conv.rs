//! Grouped 2D cross-correlation and its transpose, with exact adjoint
//! index math shared between forward and backward passes.

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Geometry of a (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// Extra rows/cols appended to a transposed convolution's output.
    /// Ignored by the forward convolution.
    pub output_padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
            groups,
            output_padding: 0,
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::config(format!(
                "kernel, stride and groups must be positive: {:?}",
                self
            )));
        }
        Ok(())
    }

    /// floor((in + 2 pad - k) / stride) + 1, rejecting degenerate outputs.
    pub fn out_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::shape(format!(
                "degenerate output: input {} with {:?} yields extent < 1",
                input, self
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// (in - 1) * stride - 2 pad + k + output_padding for the transpose.
    pub fn transposed_out_extent(&self, input: usize) -> Result<usize> {
        let grown = (input - 1) * self.stride + self.kernel + self.output_padding;
        if grown < 2 * self.padding + 1 {
            return Err(Error::shape(format!(
                "degenerate transposed output: input {} with {:?}",
                input, self
            )));
        }
        Ok(grown - 2 * self.padding)
    }
}

/// Range of output positions `o` with `o*stride - pad + k` inside `[0, limit)`.
fn valid_out_range(o_count: usize, stride: usize, pad: isize, k: usize, limit: usize) -> (usize, usize) {
    // o*stride + k - pad >= 0  and  o*stride + k - pad < limit
    let off = k as isize - pad;
    let lo = if off >= 0 {
        0
    } else {
        (((-off) as usize) + stride - 1) / stride
    };
    let hi_excl = if (limit as isize) <= off {
        0
    } else {
        (((limit as isize - off - 1) as usize) / stride + 1).min(o_count)
    };
    (lo.min(hi_excl), hi_excl)
}

/// Forward grouped cross-correlation.
/// x: [n, c_in, h, w], w: [c_out, c_in/g, k, k], b: optional [c_out].
pub fn conv2d_fwd<E: Element>(
    x: &[E],
    w: &[E],
    b: Option<&[E]>,
    n: usize,
    c_in: usize,
    h: usize,
    wdt: usize,
    c_out: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    let g = spec.groups;
    let cin_g = c_in / g;
    let cout_g = c_out / g;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;

    if let Some(bias) = b {
        for ni in 0..n {
            for co in 0..c_out {
                let plane = &mut out[(ni * c_out + co) * oh * ow..(ni * c_out + co + 1) * oh * ow];
                for v in plane.iter_mut() {
                    *v = bias[co];
                }
            }
        }
    }

    for ni in 0..n {
        for co in 0..c_out {
            let grp = co / cout_g;
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let x_chan = &x[(ni * c_in + ci) * h * wdt..(ni * c_in + ci + 1) * h * wdt];
                let w_base = ((co * cin_g + ci_l) * k) * k;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_out_range(oh, s, p, ky, h);
                    for kx in 0..k {
                        let wv = w[w_base + ky * k + kx];
                        if wv == E::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_out_range(ow, s, p, kx, wdt);
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * s) as isize - p + ky as isize;
                            let x_row = &x_chan[iy as usize * wdt..(iy as usize + 1) * wdt];
                            let o_row = &mut out
                                [((ni * c_out + co) * oh + oy) * ow..((ni * c_out + co) * oh + oy + 1) * ow];
                            if s == 1 {
                                let shift = kx as isize - p;
                                for ox in ox_lo..ox_hi {
                                    o_row[ox] = o_row[ox] + wv * x_row[(ox as isize + shift) as usize];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * s) as isize - p + kx as isize;
                                    o_row[ox] = o_row[ox] + wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d w.r.t. its input: scatter dy back through the kernel.
pub fn conv2d_bwd_input<E: Element>(
    dy: &[E],
    w: &[E],
    n: usize,
    c_in: usize,
    h: usize,
    wdt: usize,
    c_out: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    dx: &mut [E],
) {
    let g = spec.groups;
    let cin_g = c_in / g;
    let cout_g = c_out / g;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;

    for ni in 0..n {
        for co in 0..c_out {
            let grp = co / cout_g;
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let dx_chan =
                    &mut dx[(ni * c_in + ci) * h * wdt..(ni * c_in + ci + 1) * h * wdt];
                let w_base = ((co * cin_g + ci_l) * k) * k;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_out_range(oh, s, p, ky, h);
                    for kx in 0..k {
                        let wv = w[w_base + ky * k + kx];
                        if wv == E::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_out_range(ow, s, p, kx, wdt);
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize - p + ky as isize) as usize;
                            let dy_row = &dy
                                [((ni * c_out + co) * oh + oy) * ow..((ni * c_out + co) * oh + oy + 1) * ow];
                            let dx_row = &mut dx_chan[iy * wdt..(iy + 1) * wdt];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * s) as isize - p + kx as isize) as usize;
                                dx_row[ix] = dx_row[ix] + wv * dy_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of conv2d w.r.t. the kernel.
pub fn conv2d_bwd_weight<E: Element>(
    x: &[E],
    dy: &[E],
    n: usize,
    c_in: usize,
    h: usize,
    wdt: usize,
    c_out: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    dw: &mut [E],
) {
    let g = spec.groups;
    let cin_g = c_in / g;
    let cout_g = c_out / g;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;

    for ni in 0..n {
        for co in 0..c_out {
            let grp = co / cout_g;
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let x_chan = &x[(ni * c_in + ci) * h * wdt..(ni * c_in + ci + 1) * h * wdt];
                let w_base = ((co * cin_g + ci_l) * k) * k;
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_out_range(oh, s, p, ky, h);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_out_range(ow, s, p, kx, wdt);
                        let mut acc = E::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize - p + ky as isize) as usize;
                            let dy_row = &dy
                                [((ni * c_out + co) * oh + oy) * ow..((ni * c_out + co) * oh + oy + 1) * ow];
                            let x_row = &x_chan[iy * wdt..(iy + 1) * wdt];
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * s) as isize - p + kx as isize) as usize;
                                acc = acc + dy_row[ox] * x_row[ix];
                            }
                        }
                        dw[w_base + ky * k + kx] = dw[w_base + ky * k + kx] + acc;
                    }
                }
            }
        }
    }
}

/// Channel-wise sum of dy for the bias gradient.
pub fn conv2d_bwd_bias<E: Element>(dy: &[E], n: usize, c_out: usize, plane: usize, db: &mut [E]) {
    for ni in 0..n {
        for co in 0..c_out {
            let sl = &dy[(ni * c_out + co) * plane..(ni * c_out + co + 1) * plane];
            let mut acc = E::zero();
            for &v in sl {
                acc = acc + v;
            }
            db[co] = db[co] + acc;
        }
    }
}

/// Transposed grouped convolution: the adjoint of `conv2d_fwd` as a forward
/// op. x: [n, c_in, h, w], w: [c_in, c_out/g, k, k], b: optional [c_out].
pub fn conv_transpose2d_fwd<E: Element>(
    x: &[E],
    w: &[E],
    b: Option<&[E]>,
    n: usize,
    c_in: usize,
    h: usize,
    wdt: usize,
    c_out: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    let g = spec.groups;
    let cin_g = c_in / g;
    let cout_g = c_out / g;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;

    if let Some(bias) = b {
        for ni in 0..n {
            for co in 0..c_out {
                let plane = &mut out[(ni * c_out + co) * oh * ow..(ni * c_out + co + 1) * oh * ow];
                for v in plane.iter_mut() {
                    *v = bias[co];
                }
            }
        }
    }

    for ni in 0..n {
        for ci in 0..c_in {
            let grp = ci / cin_g;
            let x_chan = &x[(ni * c_in + ci) * h * wdt..(ni * c_in + ci + 1) * h * wdt];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let w_base = ((ci * cout_g + co_l) * k) * k;
                for ky in 0..k {
                    let (iy_lo, iy_hi) = valid_out_range(h, s, p, ky, oh);
                    for kx in 0..k {
                        let wv = w[w_base + ky * k + kx];
                        if wv == E::zero() {
                            continue;
                        }
                        let (ix_lo, ix_hi) = valid_out_range(wdt, s, p, kx, ow);
                        for iy in iy_lo..iy_hi {
                            let oy = ((iy * s) as isize - p + ky as isize) as usize;
                            let x_row = &x_chan[iy * wdt..(iy + 1) * wdt];
                            let o_row = &mut out
                                [((ni * c_out + co) * oh + oy) * ow..((ni * c_out + co) * oh + oy + 1) * ow];
                            for ix in ix_lo..ix_hi {
                                let ox = ((ix * s) as isize - p + kx as isize) as usize;
                                o_row[ox] = o_row[ox] + wv * x_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the transposed convolution w.r.t. its input: a plain
/// cross-correlation of dy with the same kernel.
pub fn conv_transpose2d_bwd_input<E: Element>(
    dy: &[E],
    w: &[E],
    n: usize,
    c_in: usize,
    h: usize,
    wdt: usize,
    c_out: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    dx: &mut [E],
) {
    let g = spec.groups;
    let cin_g = c_in / g;
    let cout_g = c_out / g;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;

    for ni in 0..n {
        for ci in 0..c_in {
            let grp = ci / cin_g;
            let dx_chan = &mut dx[(ni * c_in + ci) * h * wdt..(ni * c_in + ci + 1) * h * wdt];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let w_base = ((ci * cout_g + co_l) * k) * k;
                for ky in 0..k {
                    let (iy_lo, iy_hi) = valid_out_range(h, s, p, ky, oh);
                    for kx in 0..k {
                        let wv = w[w_base + ky * k + kx];
                        if wv == E::zero() {
                            continue;
                        }
                        let (ix_lo, ix_hi) = valid_out_range(wdt, s, p, kx, ow);
                        for iy in iy_lo..iy_hi {
                            let oy = ((iy * s) as isize - p + ky as isize) as usize;
                            let dy_row = &dy
                                [((ni * c_out + co) * oh + oy) * ow..((ni * c_out + co) * oh + oy + 1) * ow];
                            let dx_row = &mut dx_chan[iy * wdt..(iy + 1) * wdt];
                            for ix in ix_lo..ix_hi {
                                let ox = ((ix * s) as isize - p + kx as isize) as usize;
                                dx_row[ix] = dx_row[ix] + wv * dy_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the transposed convolution w.r.t. the kernel.
pub fn conv_transpose2d_bwd_weight<E: Element>(
    x: &[E],
    dy: &[E],
    n: usize,
    c_in: usize,
    h: usize,
    wdt: usize,
    c_out: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    dw: &mut [E],
) {
    let g = spec.groups;
    let cin_g = c_in / g;
    let cout_g = c_out / g;
    let k = spec.kernel;
    let s = spec.stride;
    let p = spec.padding as isize;

    for ni in 0..n {
        for ci in 0..c_in {
            let grp = ci / cin_g;
            let x_chan = &x[(ni * c_in + ci) * h * wdt..(ni * c_in + ci + 1) * h * wdt];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let w_base = ((ci * cout_g + co_l) * k) * k;
                for ky in 0..k {
                    let (iy_lo, iy_hi) = valid_out_range(h, s, p, ky, oh);
                    for kx in 0..k {
                        let (ix_lo, ix_hi) = valid_out_range(wdt, s, p, kx, ow);
                        let mut acc = E::zero();
                        for iy in iy_lo..iy_hi {
                            let oy = ((iy * s) as isize - p + ky as isize) as usize;
                            let dy_row = &dy
                                [((ni * c_out + co) * oh + oy) * ow..((ni * c_out + co) * oh + oy + 1) * ow];
                            let x_row = &x_chan[iy * wdt..(iy + 1) * wdt];
                            for ix in ix_lo..ix_hi {
                                let ox = ((ix * s) as isize - p + kx as isize) as usize;
                                acc = acc + x_row[ix] * dy_row[ox];
                            }
                        }
                        dw[w_base + ky * k + kx] = dw[w_base + ky * k + kx] + acc;
                    }
                }
            }
        }
    }
}

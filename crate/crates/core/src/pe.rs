//! Position encodings: rotary (RoPE), locally-enhanced (LePE), and
//! conditional (CPE), plus their combined composition around the linear
//! attention core. Together they stand in for a recurrent forget gate.

use rand_chacha::ChaCha8Rng;

use crate::attention::DENOM_EPS;
use crate::error::{Error, Result};
use crate::init;
use crate::kernels::conv::ConvSpec;
use crate::params::{Graph, PId, Params};
use crate::tape::Var;
use crate::tensor::{Element, Tensor};

/// Rotary-encoding geometry: per-pair angles theta_i = base^(-2i/d).
#[derive(Debug, Clone)]
pub struct RopeParams {
    pub base: f64,
    pub dim: usize,
}

impl RopeParams {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_base(dim, 10_000.0)
    }

    pub fn with_base(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::config(format!(
                "rope dim must be positive and even, got {dim}"
            )));
        }
        if base <= 1.0 {
            return Err(Error::config("rope base must exceed 1"));
        }
        Ok(RopeParams { base, dim })
    }

    /// Angle increment of pair i; strictly decreasing in i.
    pub fn theta(&self, i: usize) -> f64 {
        self.base.powf(-2.0 * i as f64 / self.dim as f64)
    }
}

/// cos/sin tables [positions.len(), dim/2] for 1-D rotary encoding.
pub fn rope_tables_1d(p: &RopeParams, positions: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let half = p.dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &m in positions {
        for i in 0..half {
            let angle = m as f64 * p.theta(i);
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Rotate consecutive pairs of x[N, d] by position-dependent angles.
pub fn rope<E: Element>(
    x: &Tensor<E>,
    positions: &[usize],
    p: &RopeParams,
) -> Result<Tensor<E>> {
    if x.rank() != 2 || x.shape()[1] != p.dim {
        return Err(Error::shape(format!(
            "rope: expected [N, {}], got {:?}",
            p.dim,
            x.shape()
        )));
    }
    if positions.len() != x.shape()[0] {
        return Err(Error::shape(format!(
            "rope: {} positions for {} rows",
            positions.len(),
            x.shape()[0]
        )));
    }
    let (cos, sin) = rope_tables_1d(p, positions);
    let half = p.dim / 2;
    let mut out = vec![E::zero(); x.numel()];
    for (n, _) in positions.iter().enumerate() {
        for i in 0..half {
            let c = E::from_f64(cos[n * half + i]);
            let s = E::from_f64(sin[n * half + i]);
            let x0 = x.data()[n * p.dim + 2 * i];
            let x1 = x.data()[n * p.dim + 2 * i + 1];
            out[n * p.dim + 2 * i] = x0 * c - x1 * s;
            out[n * p.dim + 2 * i + 1] = x0 * s + x1 * c;
        }
    }
    Tensor::new(vec![x.shape()[0], p.dim], out)
}

/// Axial 2-D tables [h*w, dim/2] in raster order: the leading half of the
/// pairs rotates with the row index, the rest with the column index, each
/// half running its own theta schedule over its sub-dimension.
pub fn rope_tables_2d(dim: usize, h: usize, w: usize, base: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim % 2 != 0 {
        return Err(Error::config(format!("2-D rope needs even dim, got {dim}")));
    }
    let pairs = dim / 2;
    let row_pairs = pairs - pairs / 2;
    let col_pairs = pairs / 2;
    let theta = |k: usize, sub_pairs: usize| -> f64 {
        if sub_pairs == 0 {
            return 0.0;
        }
        base.powf(-2.0 * k as f64 / (2 * sub_pairs) as f64)
    };
    let mut cos = Vec::with_capacity(h * w * pairs);
    let mut sin = Vec::with_capacity(h * w * pairs);
    for y in 0..h {
        for x in 0..w {
            for k in 0..row_pairs {
                let a = y as f64 * theta(k, row_pairs);
                cos.push(a.cos());
                sin.push(a.sin());
            }
            for k in 0..col_pairs {
                let a = x as f64 * theta(k, col_pairs);
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
    }
    Ok((cos, sin))
}

/// Differentiable axial 2-D rope on x[..., h*w, d].
pub fn tape_rope_2d<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let shape = g.tape.shape(x).to_vec();
    let d = *shape.last().ok_or_else(|| Error::shape("rope on scalar"))?;
    let (cos, sin) = rope_tables_2d(d, h, w, 10_000.0)?;
    let cos: Vec<E> = cos.into_iter().map(E::from_f64).collect();
    let sin: Vec<E> = sin.into_iter().map(E::from_f64).collect();
    g.tape.rope(x, cos, sin, h * w, d)
}

/// Weights of the conv-based encodings inside one block.
#[derive(Debug, Clone)]
pub struct PeWeights {
    pub lepe_dw: PId,
    pub lepe_dw_b: PId,
    pub lepe_proj: PId,
    pub lepe_proj_b: PId,
    pub cpe1: PId,
    pub cpe1_b: PId,
    pub cpe2: PId,
    pub cpe2_b: PId,
}

impl PeWeights {
    pub fn init<E: Element>(
        params: &mut Params<E>,
        prefix: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (lepe_dw, lepe_dw_b) = init::conv(params, &format!("{prefix}.lepe_dw"), channels, 1, 3, rng)?;
        let (lepe_proj, lepe_proj_b) =
            init::dense(params, &format!("{prefix}.lepe_proj"), channels, channels, rng)?;
        let (cpe1, cpe1_b) = init::conv(params, &format!("{prefix}.cpe1"), channels, 1, 3, rng)?;
        let (cpe2, cpe2_b) = init::conv(params, &format!("{prefix}.cpe2"), channels, 1, 3, rng)?;
        Ok(PeWeights {
            lepe_dw,
            lepe_dw_b,
            lepe_proj,
            lepe_proj_b,
            cpe1,
            cpe1_b,
            cpe2,
            cpe2_b,
        })
    }
}

/// Query/key/value projections feeding the attention core.
/// The value projection is optional: the mixer supplies an already
/// projected value stream, the standalone composition projects with W_V.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: PId,
    pub b_q: PId,
    pub w_k: PId,
    pub b_k: PId,
    pub w_v: Option<(PId, PId)>,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    pub fn init<E: Element>(
        params: &mut Params<E>,
        prefix: &str,
        channels: usize,
        heads: usize,
        with_value_proj: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "heads {heads} must divide channels {channels}"
            )));
        }
        let (w_q, b_q) = init::dense(params, &format!("{prefix}.q"), channels, channels, rng)?;
        let (w_k, b_k) = init::dense(params, &format!("{prefix}.k"), channels, channels, rng)?;
        let w_v = if with_value_proj {
            Some(init::dense(params, &format!("{prefix}.v"), channels, channels, rng)?)
        } else {
            None
        };
        Ok(AttentionParams {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            heads,
            head_dim: channels / heads,
        })
    }
}

fn depthwise_spec() -> ConvSpec {
    ConvSpec::new(3, 1, 1, 1) // groups patched per call
}

/// Apply a depthwise 3x3 conv to a sequence laid out on an h-by-w grid.
pub fn dwconv_on_grid<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    w: PId,
    b: PId,
    h: usize,
    wdt: usize,
) -> Result<Var> {
    let channels = *g.tape.shape(x).last().unwrap();
    let grid = g.tape.seq_to_grid(x, h, wdt)?;
    let wv = g.p(w)?;
    let bv = g.p(b)?;
    let mut spec = depthwise_spec();
    spec.groups = channels;
    let conv = g.tape.conv2d(grid, wv, Some(bv), spec)?;
    g.tape.grid_to_seq(conv)
}

/// LePE: v + W_L(DWConv3x3(grid(v))). Local bias on the value stream.
pub fn lepe<E: Element>(
    g: &mut Graph<E>,
    v: Var,
    w: &PeWeights,
    h: usize,
    wdt: usize,
) -> Result<Var> {
    let seq = g.tape.shape(v)[1];
    if seq != h * wdt {
        return Err(Error::shape(format!(
            "lepe: sequence length {seq} is not {h}x{wdt}"
        )));
    }
    let grid = g.tape.seq_to_grid(v, h, wdt)?;
    let channels = g.tape.shape(grid)[1];
    let wv = g.p(w.lepe_dw)?;
    let bv = g.p(w.lepe_dw_b)?;
    let mut spec = depthwise_spec();
    spec.groups = channels;
    let conv = g.tape.conv2d(grid, wv, Some(bv), spec)?;
    let seq_back = g.tape.grid_to_seq(conv)?;
    let pw = g.p(w.lepe_proj)?;
    let pb = g.p(w.lepe_proj_b)?;
    let projected = g.tape.linear(seq_back, pw, Some(pb))?;
    g.tape.add(v, projected)
}

/// CPE: x + depthwise-3x3(x) on the spatial grid.
pub fn cpe<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    conv_w: PId,
    conv_b: PId,
    h: usize,
    wdt: usize,
) -> Result<Var> {
    let seq = g.tape.shape(x)[1];
    if seq != h * wdt {
        return Err(Error::shape(format!(
            "cpe: sequence length {seq} is not {h}x{wdt}"
        )));
    }
    let branch = dwconv_on_grid(g, x, conv_w, conv_b, h, wdt)?;
    g.tape.add(x, branch)
}

/// [B, L, heads*d] -> [B, heads, L, d]
pub fn split_heads<E: Element>(g: &mut Graph<E>, x: Var, heads: usize) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    if s.len() != 3 || s[2] % heads != 0 {
        return Err(Error::shape(format!(
            "split_heads: {:?} not divisible into {heads} heads",
            s
        )));
    }
    let r = g.tape.reshape(x, vec![s[0], s[1], heads, s[2] / heads])?;
    g.tape.permute(r, &[0, 2, 1, 3])
}

/// [B, heads, L, d] -> [B, L, heads*d]
pub fn merge_heads<E: Element>(g: &mut Graph<E>, x: Var) -> Result<Var> {
    let s = g.tape.shape(x).to_vec();
    let p = g.tape.permute(x, &[0, 2, 1, 3])?;
    g.tape.reshape(p, vec![s[0], s[2], s[1] * s[3]])
}

/// Multi-head linear attention with rotary phases.
///
/// The positive feature maps phi(q), phi(k) normalize the denominator;
/// their rotated versions pair up in the numerator, encoding relative
/// position without breaking positivity.
pub fn rope_linear_attention<E: Element>(
    g: &mut Graph<E>,
    q_proj: Var,
    k_proj: Var,
    v_stream: Var,
    heads: usize,
    h: usize,
    wdt: usize,
) -> Result<Var> {
    let qh = split_heads(g, q_proj, heads)?; // [B, H, L, d]
    let kh = split_heads(g, k_proj, heads)?;
    let vh = split_heads(g, v_stream, heads)?;
    let phi_q = g.tape.elu_plus_one(qh)?;
    let phi_k = g.tape.elu_plus_one(kh)?;
    let rq = tape_rope_2d(g, phi_q, h, wdt)?;
    let rk = tape_rope_2d(g, phi_k, h, wdt)?;

    // numerator: rotated pairing against the value stream
    let kt = g.tape.transpose_last2(rk)?;
    let s = g.tape.matmul(kt, vh)?; // [B, H, d, d_v]
    let num = g.tape.matmul(rq, s)?; // [B, H, L, d_v]

    // denominator: unrotated positive maps
    let rank = g.tape.shape(phi_k).len();
    let z = g.tape.sum_axis(phi_k, rank - 2)?; // [B, H, d]
    let mut zshape = g.tape.shape(z).to_vec();
    zshape.push(1);
    let zc = g.tape.reshape(z, zshape)?;
    let den = g.tape.matmul(phi_q, zc)?; // [B, H, L, 1]
    let den = g.tape.add_scalar(den, E::from_f64(DENOM_EPS))?;

    let y = g.tape.div(num, den)?;
    merge_heads(g, y)
}

/// The combined encoding with an externally supplied value stream:
/// CPE1(x) + Attn(RoPE(phi(x W_Q)), RoPE(phi(x W_K)), V + LePE(V)) + CPE2(x).
pub fn positional_compose_parts<E: Element>(
    g: &mut Graph<E>,
    x_pe: Var,
    v_stream: Var,
    pe: &PeWeights,
    attn: &AttentionParams,
    h: usize,
    wdt: usize,
) -> Result<Var> {
    let c1 = cpe(g, x_pe, pe.cpe1, pe.cpe1_b, h, wdt)?;
    let wq = g.p(attn.w_q)?;
    let bq = g.p(attn.b_q)?;
    let wk = g.p(attn.w_k)?;
    let bk = g.p(attn.b_k)?;
    let q_proj = g.tape.linear(x_pe, wq, Some(bq))?;
    let k_proj = g.tape.linear(x_pe, wk, Some(bk))?;
    let le = lepe(g, v_stream, pe, h, wdt)?;
    let v_aug = g.tape.add(v_stream, le)?;
    let attn_out = rope_linear_attention(g, q_proj, k_proj, v_aug, attn.heads, h, wdt)?;
    let c2 = cpe(g, x_pe, pe.cpe2, pe.cpe2_b, h, wdt)?;
    let partial = g.tape.add(c1, attn_out)?;
    g.tape.add(partial, c2)
}

/// Standalone composition: the value stream is x W_V.
pub fn positional_compose<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    pe: &PeWeights,
    attn: &AttentionParams,
    h: usize,
    wdt: usize,
) -> Result<Var> {
    let (wv, bv) = attn.w_v.ok_or_else(|| {
        Error::config("positional_compose requires a value projection (w_v)")
    })?;
    let w = g.p(wv)?;
    let b = g.p(bv)?;
    let v = g.tape.linear(x, w, Some(b))?;
    positional_compose_parts(g, x, v, pe, attn, h, wdt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn theta_strictly_decreasing() {
        let p = RopeParams::new(16).unwrap();
        for i in 1..8 {
            assert!(p.theta(i) < p.theta(i - 1));
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let p = RopeParams::new(8).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 8], |i| i as f64 - 3.0);
        let y = rope(&x, &[0], &p).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rope_preserves_norms() {
        let p = RopeParams::new(16).unwrap();
        let x = Tensor::<f64>::from_fn(&[6, 16], |i| ((i * 37) as f64 * 0.11).sin());
        let positions: Vec<usize> = (0..6).map(|i| i * 3).collect();
        let y = rope(&x, &positions, &p).unwrap();
        for n in 0..6 {
            let nx: f64 = x.data()[n * 16..(n + 1) * 16].iter().map(|v| v * v).sum();
            let ny: f64 = y.data()[n * 16..(n + 1) * 16].iter().map(|v| v * v).sum();
            assert!((nx.sqrt() - ny.sqrt()).abs() / nx.sqrt() < 1e-12);
        }
    }

    #[test]
    fn rope_relative_phase() {
        // <rope(q, m), rope(k, n)> depends only on m - n
        let p = RopeParams::new(8).unwrap();
        let q = Tensor::<f64>::from_fn(&[1, 8], |i| (i as f64 * 0.9).cos());
        let k = Tensor::<f64>::from_fn(&[1, 8], |i| (i as f64 * 1.7).sin());
        let dot = |m: usize, n: usize| -> f64 {
            let rq = rope(&q, &[m], &p).unwrap();
            let rk = rope(&k, &[n], &p).unwrap();
            rq.data().iter().zip(rk.data()).map(|(a, b)| a * b).sum()
        };
        for m in 0..8usize {
            for n in 0..8usize {
                let shifted = dot(m + 1, n + 1);
                let base = dot(m, n);
                assert!(
                    (shifted - base).abs() < 1e-10,
                    "({m},{n}): {base} vs {shifted}"
                );
            }
        }
    }

    #[test]
    fn rope_2d_on_1x1_grid_is_identity() {
        for dim in [4usize, 8, 16, 32] {
            let (cos, sin) = rope_tables_2d(dim, 1, 1, 10_000.0).unwrap();
            assert!(cos.iter().all(|&c| c == 1.0));
            assert!(sin.iter().all(|&s| s == 0.0));
        }
    }

    #[test]
    fn lepe_and_cpe_zero_weights_are_identities() {
        let mut params = Params::<f64>::new();
        let mut rng = stream_rng(3, 0);
        let pe = PeWeights::init(&mut params, "pe", 4, &mut rng).unwrap();
        // zero the conv weights (and projection) but keep bias zeros
        for name in ["pe.lepe_dw.w", "pe.lepe_proj.w", "pe.cpe1.w", "pe.cpe2.w"] {
            let id = params.by_name(name).unwrap();
            let shape = params.get(id).shape().to_vec();
            *params.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new(&params);
        let x = g
            .tape
            .constant(Tensor::from_fn(&[1, 4, 4], |i| (i as f64 * 0.3).sin()))
            .unwrap();
        let l = lepe(&mut g, x, &pe, 2, 2).unwrap();
        assert_eq!(g.tape.value(l).data(), g.tape.value(x).data());
        let c = cpe(&mut g, x, pe.cpe1, pe.cpe1_b, 2, 2).unwrap();
        assert_eq!(g.tape.value(c).data(), g.tape.value(x).data());
    }

    #[test]
    fn compose_single_position_returns_value_plus_cpes() {
        let mut params = Params::<f64>::new();
        let mut rng = stream_rng(11, 0);
        let pe = PeWeights::init(&mut params, "pe", 8, &mut rng).unwrap();
        let attn = AttentionParams::init(&mut params, "attn", 8, 2, true, &mut rng).unwrap();
        let mut g = Graph::new(&params);
        let x = g
            .tape
            .constant(Tensor::from_fn(&[1, 1, 8], |i| (i as f64 * 0.7).cos()))
            .unwrap();
        let out = positional_compose(&mut g, x, &pe, &attn, 1, 1).unwrap();

        // hand-assemble CPE1(x) + (V + LePE(V)) + CPE2(x)
        let c1 = cpe(&mut g, x, pe.cpe1, pe.cpe1_b, 1, 1).unwrap();
        let (wv, bv) = attn.w_v.unwrap();
        let w = g.p(wv).unwrap();
        let b = g.p(bv).unwrap();
        let v = g.tape.linear(x, w, Some(b)).unwrap();
        let le = lepe(&mut g, v, &pe, 1, 1).unwrap();
        let v_aug = g.tape.add(v, le).unwrap();
        let c2 = cpe(&mut g, x, pe.cpe2, pe.cpe2_b, 1, 1).unwrap();
        let t = g.tape.add(c1, v_aug).unwrap();
        let expect = g.tape.add(t, c2).unwrap();

        for (a, b) in g
            .tape
            .value(out)
            .data()
            .iter()
            .zip(g.tape.value(expect).data())
        {
            // single-position attention returns its value row up to the
            // denominator guard
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-5, "{a} vs {b}");
        }
    }
}

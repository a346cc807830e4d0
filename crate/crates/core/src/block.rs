//! The MLLA mixer, its pre-norm residual block, and the convolutional stem.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::kernels::conv::ConvSpec;
use crate::params::{Graph, PId, Params};
use crate::pe::{self, AttentionParams, PeWeights};
use crate::tape::Var;
use crate::tensor::Element;

/// MLP hidden width multiplier.
pub const MLP_RATIO: usize = 4;
/// LayerNorm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-5;

/// All weights of one MLLA block.
#[derive(Debug, Clone)]
pub struct MllaBlockWeights {
    pub norm1: (PId, PId),
    pub f1_dw: (PId, PId),
    pub f1_lin: (PId, PId),
    pub f2_lin: (PId, PId),
    pub f3_lin: (PId, PId),
    pub pe: PeWeights,
    pub attn: AttentionParams,
    pub out_lin: (PId, PId),
    pub norm2: (PId, PId),
    pub mlp_fc1: (PId, PId),
    pub mlp_fc2: (PId, PId),
    pub channels: usize,
}

impl MllaBlockWeights {
    pub fn init<E: Element>(
        params: &mut Params<E>,
        prefix: &str,
        channels: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let norm1 = init::norm_affine(params, &format!("{prefix}.norm1"), channels)?;
        let f1_dw = init::conv(params, &format!("{prefix}.f1_dw"), channels, 1, 3, rng)?;
        let f1_lin = init::dense(params, &format!("{prefix}.f1_lin"), channels, channels, rng)?;
        let f2_lin = init::dense(params, &format!("{prefix}.f2_lin"), channels, channels, rng)?;
        let f3_lin = init::dense(params, &format!("{prefix}.f3_lin"), channels, channels, rng)?;
        let pe = PeWeights::init(params, &format!("{prefix}.pe"), channels, rng)?;
        // the value stream is F3; no extra value projection inside blocks
        let attn = AttentionParams::init(
            params,
            &format!("{prefix}.attn"),
            channels,
            heads,
            false,
            rng,
        )?;
        let out_lin = init::dense(params, &format!("{prefix}.out"), channels, channels, rng)?;
        let norm2 = init::norm_affine(params, &format!("{prefix}.norm2"), channels)?;
        let hidden = MLP_RATIO * channels;
        let mlp_fc1 = init::dense(params, &format!("{prefix}.mlp_fc1"), channels, hidden, rng)?;
        let mlp_fc2 = init::dense(params, &format!("{prefix}.mlp_fc2"), hidden, channels, rng)?;
        Ok(MllaBlockWeights {
            norm1,
            f1_dw,
            f1_lin,
            f2_lin,
            f3_lin,
            pe,
            attn,
            out_lin,
            norm2,
            mlp_fc1,
            mlp_fc2,
            channels,
        })
    }
}

/// The mixer: F1 = L(Conv(x)), F2 = L(x) * F1, F3 = L(x), attention over
/// the combined position encoding, then the output projection.
/// The gate-branch Conv is a depthwise 3x3 followed by SiLU.
pub fn mlla_mixer<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    w: &MllaBlockWeights,
    h: usize,
    wdt: usize,
) -> Result<Var> {
    let shape = g.tape.shape(x);
    if shape.len() != 3 || shape[1] != h * wdt {
        return Err(Error::shape(format!(
            "mlla_mixer: expected [B, {}, C], got {:?}",
            h * wdt,
            shape
        )));
    }
    let dw = pe::dwconv_on_grid(g, x, w.f1_dw.0, w.f1_dw.1, h, wdt)?;
    let act = g.tape.silu(dw)?;
    let w1 = g.p(w.f1_lin.0)?;
    let b1 = g.p(w.f1_lin.1)?;
    let f1 = g.tape.linear(act, w1, Some(b1))?;

    let w2 = g.p(w.f2_lin.0)?;
    let b2 = g.p(w.f2_lin.1)?;
    let lx = g.tape.linear(x, w2, Some(b2))?;
    let f2 = g.tape.mul(lx, f1)?;

    let w3 = g.p(w.f3_lin.0)?;
    let b3 = g.p(w.f3_lin.1)?;
    let f3 = g.tape.linear(x, w3, Some(b3))?;

    let attn_out = pe::positional_compose_parts(g, f2, f3, &w.pe, &w.attn, h, wdt)?;

    let wo = g.p(w.out_lin.0)?;
    let bo = g.p(w.out_lin.1)?;
    g.tape.linear(attn_out, wo, Some(bo))
}

/// Pre-norm residual block: z_hat = mixer(LN(z)) + z, out = MLP(LN(z_hat)) + z_hat.
pub fn mlla_block<E: Element>(
    g: &mut Graph<E>,
    z: Var,
    w: &MllaBlockWeights,
    h: usize,
    wdt: usize,
) -> Result<Var> {
    let eps = E::from_f64(LN_EPS);
    let g1 = g.p(w.norm1.0)?;
    let b1 = g.p(w.norm1.1)?;
    let n1 = g.tape.layer_norm(z, g1, b1, eps)?;
    let mixed = mlla_mixer(g, n1, w, h, wdt)?;
    let zhat = g.tape.add(mixed, z)?;

    let g2 = g.p(w.norm2.0)?;
    let b2 = g.p(w.norm2.1)?;
    let n2 = g.tape.layer_norm(zhat, g2, b2, eps)?;
    let wf1 = g.p(w.mlp_fc1.0)?;
    let bf1 = g.p(w.mlp_fc1.1)?;
    let hidden = g.tape.linear(n2, wf1, Some(bf1))?;
    let act = g.tape.gelu(hidden)?;
    let wf2 = g.p(w.mlp_fc2.0)?;
    let bf2 = g.p(w.mlp_fc2.1)?;
    let mlp = g.tape.linear(act, wf2, Some(bf2))?;
    g.tape.add(mlp, zhat)
}

/// Three-conv stem reducing each spatial axis 4x into C_0 channels.
#[derive(Debug, Clone)]
pub struct StemWeights {
    pub conv1: (PId, PId),
    pub conv2: (PId, PId),
    pub conv3: (PId, PId),
    pub in_channels: usize,
    pub embed_dim: usize,
}

impl StemWeights {
    pub fn init<E: Element>(
        params: &mut Params<E>,
        prefix: &str,
        in_channels: usize,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if embed_dim % 2 != 0 {
            return Err(Error::config(format!(
                "stem embed dim {embed_dim} must be even"
            )));
        }
        let half = embed_dim / 2;
        let conv1 = init::conv(params, &format!("{prefix}.conv1"), half, in_channels, 3, rng)?;
        let conv2 = init::conv(params, &format!("{prefix}.conv2"), half, half, 3, rng)?;
        let conv3 = init::conv(params, &format!("{prefix}.conv3"), embed_dim, half, 3, rng)?;
        Ok(StemWeights {
            conv1,
            conv2,
            conv3,
            in_channels,
            embed_dim,
        })
    }
}

/// x_0 = conv3(conv2(conv1(x)) + conv1(x)), with conv1 computed once and
/// shared by both terms. Returns the flattened sequence and its grid size.
pub fn stem<E: Element>(
    g: &mut Graph<E>,
    image: Var,
    w: &StemWeights,
) -> Result<(Var, usize, usize)> {
    let shape = g.tape.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != w.in_channels {
        return Err(Error::shape(format!(
            "stem: expected [B, {}, H, W], got {:?}",
            w.in_channels, shape
        )));
    }
    let (h, wd) = (shape[2], shape[3]);
    if h % 4 != 0 || wd % 4 != 0 {
        return Err(Error::shape(format!(
            "stem: spatial dims must be divisible by 4, got {h}x{wd}"
        )));
    }
    let s2 = ConvSpec::new(3, 2, 1, 1);
    let s1 = ConvSpec::new(3, 1, 1, 1);

    let w1 = g.p(w.conv1.0)?;
    let b1 = g.p(w.conv1.1)?;
    let c1 = g.tape.conv2d(image, w1, Some(b1), s2)?;
    let a = g.tape.gelu(c1)?; // f_conv1(x), shared

    let w2 = g.p(w.conv2.0)?;
    let b2 = g.p(w.conv2.1)?;
    let c2 = g.tape.conv2d(a, w2, Some(b2), s1)?;
    let b = g.tape.gelu(c2)?;
    let summed = g.tape.add(b, a)?;

    let w3 = g.p(w.conv3.0)?;
    let b3 = g.p(w.conv3.1)?;
    let c3 = g.tape.conv2d(summed, w3, Some(b3), s2)?;
    let seq = g.tape.grid_to_seq(c3)?;
    Ok((seq, h / 4, wd / 4))
}

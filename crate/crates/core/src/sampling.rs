//! Symmetric sampling: EDSM halves the grid while doubling channels,
//! EUSM does the reverse, and the final patch expansion restores full
//! resolution ahead of the prediction head.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::kernels::conv::ConvSpec;
use crate::params::{Graph, PId, Params};
use crate::rng::trunc_normal;
use crate::tape::Var;
use crate::tensor::{Element, Tensor};

fn one_by_one() -> ConvSpec {
    ConvSpec::new(1, 1, 0, 1)
}

/// Efficient downsampling: 1x1 (C -> 2C), depthwise 3x3 stride 2, 1x1.
#[derive(Debug, Clone)]
pub struct EdsmWeights {
    pub expand: (PId, PId),
    pub dw: (PId, PId),
    pub mix: (PId, PId),
    pub in_channels: usize,
}

impl EdsmWeights {
    pub fn init<E: Element>(
        params: &mut Params<E>,
        prefix: &str,
        in_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let doubled = 2 * in_channels;
        let expand = init::conv(params, &format!("{prefix}.expand"), doubled, in_channels, 1, rng)?;
        let dw = init::conv(params, &format!("{prefix}.dw"), doubled, 1, 3, rng)?;
        let mix = init::conv(params, &format!("{prefix}.mix"), doubled, doubled, 1, rng)?;
        Ok(EdsmWeights {
            expand,
            dw,
            mix,
            in_channels,
        })
    }
}

/// (H*W, C) -> (H/2 * W/2, 2C). H and W must be even.
pub fn edsm<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    w: &EdsmWeights,
    h: usize,
    wdt: usize,
) -> Result<(Var, usize, usize)> {
    if h % 2 != 0 || wdt % 2 != 0 {
        return Err(Error::shape(format!(
            "edsm: spatial extents must be even, got {h}x{wdt}"
        )));
    }
    let doubled = 2 * w.in_channels;
    let grid = g.tape.seq_to_grid(x, h, wdt)?;
    let (ew, eb) = (g.p(w.expand.0)?, g.p(w.expand.1)?);
    let e = g.tape.conv2d(grid, ew, Some(eb), one_by_one())?;
    let (dww, dwb) = (g.p(w.dw.0)?, g.p(w.dw.1)?);
    let mut dspec = ConvSpec::new(3, 2, 1, 1);
    dspec.groups = doubled;
    let d = g.tape.conv2d(e, dww, Some(dwb), dspec)?;
    let (mw, mb) = (g.p(w.mix.0)?, g.p(w.mix.1)?);
    let m = g.tape.conv2d(d, mw, Some(mb), one_by_one())?;
    let seq = g.tape.grid_to_seq(m)?;
    Ok((seq, h / 2, wdt / 2))
}

/// Efficient upsampling: 1x1, depthwise transposed 3x3 stride 2 (doubling
/// both extents), 1x1 (C -> C/2), then LayerNorm.
#[derive(Debug, Clone)]
pub struct EusmWeights {
    pub conv_in: (PId, PId),
    pub tdw: (PId, PId),
    pub reduce: (PId, PId),
    pub norm: (PId, PId),
    pub in_channels: usize,
}

impl EusmWeights {
    pub fn init<E: Element>(
        params: &mut Params<E>,
        prefix: &str,
        in_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if in_channels % 2 != 0 {
            return Err(Error::config(format!(
                "eusm: channel count {in_channels} must be even"
            )));
        }
        let conv_in = init::conv(params, &format!("{prefix}.conv_in"), in_channels, in_channels, 1, rng)?;
        let tdw = init::conv_transposed(
            params,
            &format!("{prefix}.tdw"),
            in_channels,
            1,
            in_channels,
            3,
            rng,
        )?;
        let reduce = init::conv(
            params,
            &format!("{prefix}.reduce"),
            in_channels / 2,
            in_channels,
            1,
            rng,
        )?;
        let norm = init::norm_affine(params, &format!("{prefix}.norm"), in_channels / 2)?;
        Ok(EusmWeights {
            conv_in,
            tdw,
            reduce,
            norm,
            in_channels,
        })
    }
}

/// (H*W, C) -> (2H * 2W, C/2). C must be even.
pub fn eusm<E: Element>(
    g: &mut Graph<E>,
    y: Var,
    w: &EusmWeights,
    h: usize,
    wdt: usize,
) -> Result<(Var, usize, usize)> {
    let c = w.in_channels;
    let grid = g.tape.seq_to_grid(y, h, wdt)?;
    let (iw, ib) = (g.p(w.conv_in.0)?, g.p(w.conv_in.1)?);
    let a = g.tape.conv2d(grid, iw, Some(ib), one_by_one())?;
    let (tw, tb) = (g.p(w.tdw.0)?, g.p(w.tdw.1)?);
    let mut tspec = ConvSpec::new(3, 2, 1, 1).with_output_padding(1);
    tspec.groups = c;
    let t = g.tape.conv_transpose2d(a, tw, Some(tb), tspec)?;
    let (rw, rb) = (g.p(w.reduce.0)?, g.p(w.reduce.1)?);
    let r = g.tape.conv2d(t, rw, Some(rb), one_by_one())?;
    let seq = g.tape.grid_to_seq(r)?;
    let (gamma, beta) = (g.p(w.norm.0)?, g.p(w.norm.1)?);
    let out = g.tape.layer_norm(seq, gamma, beta, E::from_f64(crate::block::LN_EPS))?;
    Ok((out, 2 * h, 2 * wdt))
}

/// Final head: a C -> 16C expansion regrouped into 4x4 patches, then a
/// 1x1 convolution onto class logits.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub expand: (PId, PId),
    pub classifier: (PId, PId),
    pub channels: usize,
    pub classes: usize,
}

impl HeadWeights {
    pub fn init<E: Element>(
        params: &mut Params<E>,
        prefix: &str,
        channels: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        // expansion starts out as nearest-neighbor replication (identity
        // into each of the 16 sub-pixel groups) plus small noise, so the
        // initial upsampling is artifact-free
        let mut w: Tensor<E> = trunc_normal(rng, &[channels, 16 * channels], init::INIT_STD);
        for cin in 0..channels {
            for grp in 0..16 {
                let idx = cin * 16 * channels + grp * channels + cin;
                let v = w.data()[idx];
                w.data_mut()[idx] = v + E::one();
            }
        }
        let expand_w = params.add(format!("{prefix}.expand.w"), w)?;
        let expand_b = params.add(format!("{prefix}.expand.b"), Tensor::zeros(&[16 * channels]))?;
        let classifier = init::conv(params, &format!("{prefix}.classifier"), classes, channels, 1, rng)?;
        Ok(HeadWeights {
            expand: (expand_w, expand_b),
            classifier,
            channels,
            classes,
        })
    }
}

/// (H*W, C) -> (4H * 4W, C): learned projection to 16C, then pixel regroup.
pub fn final_patch_expand<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    expand: (PId, PId),
    h: usize,
    wdt: usize,
) -> Result<(Var, usize, usize)> {
    let (ew, eb) = (g.p(expand.0)?, g.p(expand.1)?);
    let wide = g.tape.linear(x, ew, Some(eb))?;
    let out = g.tape.patch_regroup(wide, h, wdt, 4)?;
    Ok((out, 4 * h, 4 * wdt))
}

/// (H*W, C) -> per-pixel class logits [B, classes, H, W].
pub fn predict_head<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    classifier: (PId, PId),
    h: usize,
    wdt: usize,
) -> Result<Var> {
    let grid = g.tape.seq_to_grid(x, h, wdt)?;
    let (cw, cb) = (g.p(classifier.0)?, g.p(classifier.1)?);
    g.tape.conv2d(grid, cw, Some(cb), one_by_one())
}

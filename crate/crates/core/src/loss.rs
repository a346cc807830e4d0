//! The combined Cross-Entropy + Dice training loss, differentiable
//! through the tape.

use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Clamp floor inside the cross-entropy logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Loss weights and the Dice smoothing guard.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.4,
            beta: 0.6,
            smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.smooth < 0.0 {
            return Err(Error::config(format!(
                "loss weights must be nonnegative: {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// Flatten [B, C, H, W] logits into per-pixel rows [B*H*W, C] and build
/// the matching one-hot target. Validates label range and geometry.
fn prepare<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    masks: &[LabelMask],
) -> Result<(Var, Var, usize, usize)> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "loss expects [B, classes, H, W] logits, got {:?}",
            shape
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if masks.len() != b {
        return Err(Error::Validation(format!(
            "{} masks for a batch of {}",
            masks.len(),
            b
        )));
    }
    let mut onehot = Tensor::<E>::zeros(&[b * h * w, c]);
    for (bi, mask) in masks.iter().enumerate() {
        if mask.height() != h || mask.width() != w {
            return Err(Error::Validation(format!(
                "mask {} is {}x{}, logits are {}x{}",
                bi,
                mask.height(),
                mask.width(),
                h,
                w
            )));
        }
        for (p, &label) in mask.labels().iter().enumerate() {
            if label as usize >= c {
                return Err(Error::Validation(format!(
                    "label {} out of range for {} classes",
                    label, c
                )));
            }
            onehot.data_mut()[(bi * h * w + p) * c + label as usize] = E::one();
        }
    }
    let perm = tape.permute(logits, &[0, 2, 3, 1])?;
    let rows = tape.reshape(perm, vec![b * h * w, c])?;
    let target = tape.constant(onehot)?;
    Ok((rows, target, b * h * w, c))
}

/// Mean over pixels of -log(softmax probability at the true class),
/// with the logarithm clamped below at 1e-12.
pub fn cross_entropy<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    masks: &[LabelMask],
) -> Result<Var> {
    let (rows, target, pixels, _) = prepare(tape, logits, masks)?;
    let probs = tape.softmax(rows)?;
    let logp = tape.ln_clamped(probs, E::from_f64(LOG_FLOOR))?;
    let picked = tape.mul(logp, target)?;
    let sum = tape.sum_all(picked)?;
    tape.mul_scalar(sum, E::from_f64(-1.0 / pixels as f64))
}

/// Soft Dice over softmax probabilities against the one-hot target,
/// one term per class, averaged; the smooth guard pads both numerator
/// and denominator.
pub fn dice_loss<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    masks: &[LabelMask],
    smooth: f64,
) -> Result<Var> {
    let (rows, target, _, _) = prepare(tape, logits, masks)?;
    let probs = tape.softmax(rows)?;
    let inter = tape.mul(probs, target)?;
    let inter_c = tape.sum_axis(inter, 0)?; // [classes]
    let psq = tape.mul(probs, probs)?;
    let psq_c = tape.sum_axis(psq, 0)?;
    let ysum_c = tape.sum_axis(target, 0)?; // one-hot squares are themselves

    let num = tape.mul_scalar(inter_c, E::from_f64(2.0))?;
    let num = tape.add_scalar(num, E::from_f64(smooth))?;
    let den = tape.add(psq_c, ysum_c)?;
    let den = tape.add_scalar(den, E::from_f64(smooth))?;
    let dice = tape.div(num, den)?;
    let mean = tape.mean_all(dice)?;
    let neg = tape.mul_scalar(mean, E::from_f64(-1.0))?;
    tape.add_scalar(neg, E::one())
}

/// alpha * CE + beta * Dice.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    masks: &[LabelMask],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let ce = cross_entropy(tape, logits, masks)?;
    let dl = dice_loss(tape, logits, masks, cfg.smooth)?;
    let wce = tape.mul_scalar(ce, E::from_f64(cfg.alpha))?;
    let wdl = tape.mul_scalar(dl, E::from_f64(cfg.beta))?;
    tape.add(wce, wdl)
}

/// Per-term values for logging: (total, ce, dice).
pub fn total_loss_terms<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    masks: &[LabelMask],
    cfg: &LossConfig,
) -> Result<(Var, E, E)> {
    cfg.validate()?;
    let ce = cross_entropy(tape, logits, masks)?;
    let dl = dice_loss(tape, logits, masks, cfg.smooth)?;
    let ce_val = tape.value(ce).item()?;
    let dl_val = tape.value(dl).item()?;
    let wce = tape.mul_scalar(ce, E::from_f64(cfg.alpha))?;
    let wdl = tape.mul_scalar(dl, E::from_f64(cfg.beta))?;
    let total = tape.add(wce, wdl)?;
    Ok((total, ce_val, dl_val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(labels: Vec<u16>, h: usize, w: usize) -> LabelMask {
        LabelMask::new(labels, h, w, (1.0, 1.0)).unwrap()
    }

    fn logits_for(labels: &LabelMask, classes: usize, margin: f64) -> Tensor<f64> {
        // strongly peaked logits at the true class
        let (h, w) = (labels.height(), labels.width());
        let mut t = Tensor::zeros(&[1, classes, h, w]);
        for (p, &l) in labels.labels().iter().enumerate() {
            t.data_mut()[l as usize * h * w + p] = margin;
        }
        t
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let m = mask(vec![0, 1, 2, 3], 2, 2);
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4, 2, 2])).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[m]).unwrap();
        let v = tape.value(ce).item().unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn strong_margin_drives_ce_to_zero() {
        let m = mask(vec![0, 1, 1, 0], 2, 2);
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(logits_for(&m, 3, 80.0)).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[m]).unwrap();
        assert!(tape.value(ce).item().unwrap() < 1e-10);
    }

    #[test]
    fn perfect_onehot_probs_zero_dice_loss() {
        // margin large enough that softmax is numerically one-hot
        let m = mask(vec![0, 1, 2, 0], 2, 2);
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(logits_for(&m, 3, 200.0)).unwrap();
        let dl = dice_loss(&mut tape, logits, &[m], 1.0).unwrap();
        assert!(tape.value(dl).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn disjoint_onehot_probs_full_dice_loss_without_smooth() {
        // prediction says class 1 everywhere, truth is class 0 everywhere
        let truth = mask(vec![0, 0, 0, 0], 2, 2);
        let wrong = mask(vec![1, 1, 1, 1], 2, 2);
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(logits_for(&wrong, 2, 200.0)).unwrap();
        let dl = dice_loss(&mut tape, logits, &[truth], 0.0).unwrap();
        assert!((tape.value(dl).item().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weight_projections() {
        let m = mask(vec![0, 1, 1, 2], 2, 2);
        let raw = Tensor::<f64>::from_fn(&[1, 3, 2, 2], |i| (i as f64 * 0.37).sin());

        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(raw.clone()).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[m.clone()]).unwrap();
        let dl = dice_loss(&mut tape, logits, &[m.clone()], 1.0).unwrap();
        let ce_only = total_loss(
            &mut tape,
            logits,
            &[m.clone()],
            &LossConfig { alpha: 1.0, beta: 0.0, smooth: 1.0 },
        )
        .unwrap();
        let dice_only = total_loss(
            &mut tape,
            logits,
            &[m],
            &LossConfig { alpha: 0.0, beta: 1.0, smooth: 1.0 },
        )
        .unwrap();
        assert_eq!(
            tape.value(ce_only).item().unwrap(),
            tape.value(ce).item().unwrap()
        );
        assert_eq!(
            tape.value(dice_only).item().unwrap(),
            tape.value(dl).item().unwrap()
        );
    }

    #[test]
    fn out_of_range_label_rejected() {
        let m = mask(vec![0, 5, 0, 0], 2, 2);
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3, 2, 2])).unwrap();
        assert!(matches!(
            cross_entropy(&mut tape, logits, &[m]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn ce_matches_naive_oracle() {
        let m = mask(vec![0, 2, 1, 2, 0, 1], 2, 3);
        let raw = Tensor::<f64>::from_fn(&[1, 3, 2, 3], |i| ((i * 7) as f64 * 0.13).cos());
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(raw.clone()).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[m.clone()]).unwrap();

        // naive per-pixel softmax + log
        let (h, w, c) = (2, 3, 3);
        let mut acc = 0.0;
        for p in 0..h * w {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(raw.data()[ci * h * w + p]);
            }
            let mut denom = 0.0;
            for ci in 0..c {
                denom += (raw.data()[ci * h * w + p] - mx).exp();
            }
            let true_c = m.labels()[p] as usize;
            let prob = (raw.data()[true_c * h * w + p] - mx).exp() / denom;
            acc -= prob.max(LOG_FLOOR).ln();
        }
        let expect = acc / (h * w) as f64;
        let got = tape.value(ce).item().unwrap();
        assert!((got - expect).abs() / expect.abs().max(1e-12) < 1e-12);
    }

    #[test]
    fn dice_matches_naive_oracle() {
        let m = mask(
            (0..64).map(|i| ((i * 5) % 3) as u16).collect(),
            8,
            8,
        );
        let raw = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |i| ((i * 11) as f64 * 0.057).sin());
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(raw.clone()).unwrap();
        let dl = dice_loss(&mut tape, logits, &[m.clone()], 1.0).unwrap();

        let (hw, c) = (64usize, 3usize);
        let mut probs = vec![0.0f64; hw * c];
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(raw.data()[ci * hw + p]);
            }
            let mut denom = 0.0;
            for ci in 0..c {
                denom += (raw.data()[ci * hw + p] - mx).exp();
            }
            for ci in 0..c {
                probs[p * c + ci] = (raw.data()[ci * hw + p] - mx).exp() / denom;
            }
        }
        let mut dice_sum = 0.0;
        for ci in 0..c {
            let mut inter = 0.0;
            let mut psq = 0.0;
            let mut ysq = 0.0;
            for p in 0..hw {
                let y = (m.labels()[p] as usize == ci) as u8 as f64;
                let pr = probs[p * c + ci];
                inter += pr * y;
                psq += pr * pr;
                ysq += y * y;
            }
            dice_sum += (2.0 * inter + 1.0) / (psq + ysq + 1.0);
        }
        let expect = 1.0 - dice_sum / c as f64;
        let got = tape.value(dl).item().unwrap();
        assert!((got - expect).abs() / expect.abs().max(1e-12) < 1e-10);
    }
}

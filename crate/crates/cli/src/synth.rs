//! Synthetic segmentation data: noisy background plus non-overlapping
//! filled ellipses and rectangles with per-class intensities. Stands in
//! for medical scans while exercising the same code paths.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mlla_core::metrics::LabelMask;
use mlla_core::rng::stream_rng;
use mlla_core::Tensor;

use crate::error::{CliError, Result};
use crate::stf::{mask_to_stf, read_stf, write_stf, StfData};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    pub classes: u16,
    /// Minimum intensity separation between a class region and background.
    pub contrast: f64,
    pub noise_std: f64,
}

impl SynthSpec {
    pub fn new(size: usize, classes: u16) -> Result<Self> {
        if size % 32 != 0 {
            return Err(CliError::Validation(format!(
                "size {size} must be divisible by 32"
            )));
        }
        if classes < 2 {
            return Err(CliError::Validation("need at least 2 classes".into()));
        }
        Ok(SynthSpec {
            size,
            classes,
            contrast: 0.2,
            noise_std: 0.04,
        })
    }
}

const BACKGROUND: f64 = 0.15;
const PLACEMENT_RETRIES: usize = 100;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Intensity of class c, spread over [BACKGROUND + contrast + margin, 1].
fn class_intensity(c: u16, classes: u16, contrast: f64) -> f64 {
    let lo = BACKGROUND + contrast + 0.15;
    let hi = 0.95;
    if classes <= 2 {
        return hi;
    }
    lo + (hi - lo) * ((c - 1) as f64) / ((classes - 2) as f64)
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
}

impl Shape {
    fn covers(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

/// One deterministic sample: (image [1, size, size], mask).
pub fn synth_sample(seed: u64, index: u64, spec: &SynthSpec) -> Result<(Tensor<f32>, LabelMask)> {
    let mut rng = stream_rng(seed, index.wrapping_mul(2) + 1);
    let s = spec.size;
    let mut labels = vec![0u16; s * s];
    let mut intensity = vec![BACKGROUND; s * s];

    for c in 1..spec.classes {
        let mut placed = false;
        'retry: for _ in 0..PLACEMENT_RETRIES {
            let shape = if rng.gen_bool(0.5) {
                let ry = rng.gen_range(s as f64 / 10.0..s as f64 / 4.0);
                let rx = rng.gen_range(s as f64 / 10.0..s as f64 / 4.0);
                let cy = rng.gen_range(ry + 1.0..s as f64 - ry - 1.0);
                let cx = rng.gen_range(rx + 1.0..s as f64 - rx - 1.0);
                Shape::Ellipse { cy, cx, ry, rx }
            } else {
                let hh = rng.gen_range(s / 10..s / 4);
                let hw = rng.gen_range(s / 10..s / 4);
                let cy = rng.gen_range(hh + 1..s - hh - 1);
                let cx = rng.gen_range(hw + 1..s - hw - 1);
                Shape::Rect {
                    y0: cy - hh,
                    x0: cx - hw,
                    y1: cy + hh,
                    x1: cx + hw,
                }
            };
            // reject overlap with previously placed classes
            for y in 0..s {
                for x in 0..s {
                    if shape.covers(y, x) && labels[y * s + x] != 0 {
                        continue 'retry;
                    }
                }
            }
            let level = class_intensity(c, spec.classes, spec.contrast);
            for y in 0..s {
                for x in 0..s {
                    if shape.covers(y, x) {
                        labels[y * s + x] = c;
                        intensity[y * s + x] = level;
                    }
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(CliError::Validation(format!(
                "generation error: class {c} unplaceable after {PLACEMENT_RETRIES} retries"
            )));
        }
    }

    let mut pixels = vec![0f32; s * s];
    for (i, px) in pixels.iter_mut().enumerate() {
        *px = (intensity[i] + spec.noise_std * gaussian(&mut rng)) as f32;
    }
    let image = Tensor::new(vec![1, s, s], pixels)?;
    let mask = LabelMask::new(labels, s, s, (1.0, 1.0))?;
    Ok((image, mask))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub count: usize,
    pub spec: SynthSpec,
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("img_{index:04}.stf"))
}

pub fn mask_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("mask_{index:04}.stf"))
}

/// Generate `count` samples into `dir`, with a manifest.
pub fn gen_dataset(dir: &Path, seed: u64, count: usize, spec: &SynthSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display().to_string(), e))?;
    for i in 0..count {
        let (image, mask) = synth_sample(seed, i as u64, spec)?;
        write_stf(image_path(dir, i), &StfData::F32(image))?;
        write_stf(mask_path(dir, i), &mask_to_stf(&mask))?;
    }
    let manifest = DatasetManifest {
        seed,
        count,
        spec: spec.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::format("manifest", e.to_string()))?;
    fs::write(dir.join("dataset.json"), text)
        .map_err(|e| CliError::io(dir.display().to_string(), e))?;
    Ok(())
}

/// Load every (image, mask) pair under `dir` in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Tensor<f32>, LabelMask)>> {
    let manifest_path = dir.join("dataset.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CliError::format("manifest", e.to_string()))?;
    let mut out = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let image = read_stf(image_path(dir, i))?.as_f32()?.clone();
        let mask = read_stf(mask_path(dir, i))?.into_mask()?;
        out.push((image, mask));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_deterministic_per_seed() {
        let spec = SynthSpec::new(32, 3).unwrap();
        let (i1, m1) = synth_sample(7, 0, &spec).unwrap();
        let (i2, m2) = synth_sample(7, 0, &spec).unwrap();
        assert_eq!(i1.data(), i2.data());
        assert_eq!(m1, m2);
        let (i3, _) = synth_sample(8, 0, &spec).unwrap();
        assert_ne!(i1.data(), i3.data());
    }

    #[test]
    fn masks_stay_in_class_range() {
        let spec = SynthSpec::new(32, 4).unwrap();
        for idx in 0..20 {
            let (_, mask) = synth_sample(3, idx, &spec).unwrap();
            assert!(mask.labels().iter().all(|&l| l < 4));
            // every foreground class is present
            for c in 1..4u16 {
                assert!(mask.labels().iter().any(|&l| l == c), "class {c} missing");
            }
        }
    }

    #[test]
    fn class_regions_separate_from_background() {
        // mean inside each class region differs from background mean by
        // at least the configured contrast, for >= 95% of samples
        let spec = SynthSpec::new(32, 3).unwrap();
        let mut ok = 0;
        let total = 100;
        for idx in 0..total {
            let (img, mask) = synth_sample(11, idx as u64, &spec).unwrap();
            let mut all_classes_ok = true;
            let bg_mean = {
                let (mut s, mut n) = (0.0, 0);
                for (v, &l) in img.data().iter().zip(mask.labels()) {
                    if l == 0 {
                        s += *v as f64;
                        n += 1;
                    }
                }
                s / n as f64
            };
            for c in 1..3u16 {
                let (mut s, mut n) = (0.0, 0);
                for (v, &l) in img.data().iter().zip(mask.labels()) {
                    if l == c {
                        s += *v as f64;
                        n += 1;
                    }
                }
                if n == 0 || (s / n as f64 - bg_mean).abs() < spec.contrast {
                    all_classes_ok = false;
                }
            }
            ok += all_classes_ok as usize;
        }
        assert!(ok * 100 >= 95 * total, "only {ok}/{total} samples pass");
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(SynthSpec::new(33, 3).is_err());
        assert!(SynthSpec::new(32, 1).is_err());
    }
}

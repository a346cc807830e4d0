//! Training-time augmentation: random scaling (0.9-1.1) and rotation
//! (+-15 degrees) about the image center. Images sample bilinearly with
//! edge clamping, masks use nearest neighbor under the same transform.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mlla_core::metrics::LabelMask;
use mlla_core::Tensor;

use crate::error::Result;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);

/// Apply one random scale + rotation to an image [1, H, W] and its mask.
pub fn random_affine(
    image: &Tensor<f32>,
    mask: &LabelMask,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, LabelMask)> {
    let theta = rng.gen_range(-MAX_ROTATION_DEG..MAX_ROTATION_DEG).to_radians();
    let scale = rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1);
    affine(image, mask, theta, scale)
}

fn affine(
    image: &Tensor<f32>,
    mask: &LabelMask,
    theta: f64,
    scale: f64,
) -> Result<(Tensor<f32>, LabelMask)> {
    let (h, w) = (mask.height(), mask.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let plane = h * w;
    let img = image.data();

    let mut out_img = vec![0f32; plane];
    let mut out_lab = vec![0u16; plane];
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate by -theta and unscale around the center
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = (cos * dy + sin * dx) / scale + cy;
            let sx = (-sin * dy + cos * dx) / scale + cx;

            // bilinear with edge clamping
            let sy_c = sy.clamp(0.0, h as f64 - 1.0);
            let sx_c = sx.clamp(0.0, w as f64 - 1.0);
            let y0 = sy_c.floor() as usize;
            let x0 = sx_c.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = (sy_c - y0 as f64) as f32;
            let fx = (sx_c - x0 as f64) as f32;
            let v00 = img[y0 * w + x0];
            let v01 = img[y0 * w + x1];
            let v10 = img[y1 * w + x0];
            let v11 = img[y1 * w + x1];
            out_img[y * w + x] =
                v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;

            let ny = sy_c.round() as usize;
            let nx = sx_c.round() as usize;
            out_lab[y * w + x] = mask.labels()[ny.min(h - 1) * w + nx.min(w - 1)];
        }
    }
    Ok((
        Tensor::new(vec![1, h, w], out_img)?,
        LabelMask::new(out_lab, h, w, mask.spacing())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlla_core::rng::stream_rng;

    #[test]
    fn identity_transform_is_exact() {
        let img = Tensor::<f32>::from_fn(&[1, 8, 8], |i| i as f32 * 0.01);
        let mask = LabelMask::new((0..64).map(|i| (i % 3) as u16).collect(), 8, 8, (1.0, 1.0))
            .unwrap();
        let (i2, m2) = affine(&img, &mask, 0.0, 1.0).unwrap();
        assert_eq!(i2.data(), img.data());
        assert_eq!(m2.labels(), mask.labels());
    }

    #[test]
    fn augmentation_is_seeded_deterministic() {
        let img = Tensor::<f32>::from_fn(&[1, 16, 16], |i| (i as f32 * 0.1).sin());
        let mask =
            LabelMask::new((0..256).map(|i| (i % 2) as u16).collect(), 16, 16, (1.0, 1.0)).unwrap();
        let (a1, m1) = random_affine(&img, &mask, &mut stream_rng(5, 9)).unwrap();
        let (a2, m2) = random_affine(&img, &mask, &mut stream_rng(5, 9)).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(m1.labels(), m2.labels());
    }

    #[test]
    fn labels_remain_valid_after_warp() {
        let img = Tensor::<f32>::zeros(&[1, 16, 16]);
        let mask =
            LabelMask::new((0..256).map(|i| (i % 3) as u16).collect(), 16, 16, (1.0, 1.0)).unwrap();
        let (_, m) = random_affine(&img, &mask, &mut stream_rng(6, 9)).unwrap();
        assert!(m.labels().iter().all(|&l| l < 3));
    }
}

//! Independent brute-force oracles for convolution, attention, and the
//! boundary metrics. Each oracle is written as plainly as possible and
//! shares no code with the implementation path it checks.

use mlla_core::attention::{
    feature_map_phi, linear_attention_global, linear_attention_recurrent, softmax_attention,
    DENOM_EPS,
};
use mlla_core::kernels::conv::{
    conv2d_fwd, conv_transpose2d_fwd, ConvSpec,
};
use mlla_core::metrics::{dsc, hd95, percentile_nearest_rank, LabelMask};
use mlla_core::rng::{stream_rng, uniform};
use mlla_core::{Tape, Tensor};
use rand::Rng;

// ── convolution ─────────────────────────────────────────────────────

/// Six nested loops, bounds checked inline, no index precomputation.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    spec: ConvSpec,
) -> Vec<f64> {
    let oh = (h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map(|bb| bb[co]).unwrap_or(0.0);
                    for ci_l in 0..cin_g {
                        let ci = (co / cout_g) * cin_g + ci_l;
                        for ky in 0..spec.kernel {
                            for kx in 0..spec.kernel {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((ni * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((co * cin_g + ci_l) * spec.kernel + ky) * spec.kernel + kx];
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn rel_err_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    let mut rng = stream_rng(100, 0);
    let (n, cin, h, wd, cout) = (1, 2, 5, 5, 3);
    let spec = ConvSpec::new(3, 1, 1, 1);
    let x: Tensor<f64> = uniform(&mut rng, &[n, cin, h, wd], -1.0, 1.0);
    let w: Tensor<f64> = uniform(&mut rng, &[cout, cin, 3, 3], -1.0, 1.0);
    let b: Tensor<f64> = uniform(&mut rng, &[cout], -0.5, 0.5);

    let mut got = vec![0.0; n * cout * h * wd];
    conv2d_fwd(
        x.data(), w.data(), Some(b.data()), n, cin, h, wd, cout, spec, h, wd, &mut got,
    );
    let expect = conv_oracle(x.data(), w.data(), Some(b.data()), n, cin, h, wd, cout, spec);
    assert!(rel_err_slices(&got, &expect) < 1e-6);
}

#[test]
fn conv2d_strided_grouped_matches_oracle() {
    let mut rng = stream_rng(101, 0);
    for &(cin, cout, groups, stride, pad, k) in &[
        (4usize, 4usize, 4usize, 2usize, 1usize, 3usize), // depthwise stride 2
        (4, 8, 2, 1, 0, 1),                               // grouped 1x1
        (2, 6, 1, 2, 2, 3),
    ] {
        let (n, h, wd) = (2, 6, 6);
        let spec = ConvSpec::new(k, stride, pad, groups);
        let oh = spec.out_extent(h).unwrap();
        let ow = spec.out_extent(wd).unwrap();
        let x: Tensor<f64> = uniform(&mut rng, &[n, cin, h, wd], -1.0, 1.0);
        let w: Tensor<f64> = uniform(&mut rng, &[cout, cin / groups, k, k], -1.0, 1.0);
        let mut got = vec![0.0; n * cout * oh * ow];
        conv2d_fwd(
            x.data(), w.data(), None, n, cin, h, wd, cout, spec, oh, ow, &mut got,
        );
        let expect = conv_oracle(x.data(), w.data(), None, n, cin, h, wd, cout, spec);
        assert!(
            rel_err_slices(&got, &expect) < 1e-6,
            "cin {cin} cout {cout} g {groups} s {stride}"
        );
    }
}

#[test]
fn conv2d_identity_kernel_passes_input_through() {
    let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.3 - 2.0);
    let w = Tensor::<f64>::ones(&[1, 1, 1, 1]);
    let spec = ConvSpec::new(1, 1, 0, 1);
    let mut out = vec![0.0; 16];
    conv2d_fwd(x.data(), w.data(), None, 1, 1, 4, 4, 1, spec, 4, 4, &mut out);
    assert_eq!(out.as_slice(), x.data());
}

/// Scatter-accumulate oracle for the transposed convolution: walk the
/// input, add its kernel-weighted footprint into the output.
#[allow(clippy::too_many_arguments)]
fn tconv_oracle(
    x: &[f64],
    w: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for ci in 0..cin {
            for co_l in 0..cout_g {
                let co = (ci / cin_g) * cout_g + co_l;
                for iy in 0..h {
                    for ix in 0..wd {
                        for ky in 0..spec.kernel {
                            for kx in 0..spec.kernel {
                                let oy = (iy * spec.stride + ky) as isize - spec.padding as isize;
                                let ox = (ix * spec.stride + kx) as isize - spec.padding as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((ni * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                    x[((ni * cin + ci) * h + iy) * wd + ix]
                                        * w[((ci * cout_g + co_l) * spec.kernel + ky)
                                            * spec.kernel
                                            + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn transposed_conv_matches_scatter_oracle() {
    // 1x1x1x1 input [2.0] with a 3x3 kernel of ones lands a 2x2 footprint
    let spec = ConvSpec::new(3, 2, 1, 1).with_output_padding(1);
    let x = [2.0f64];
    let w = [1.0f64; 9];
    let oh = spec.transposed_out_extent(1).unwrap();
    assert_eq!(oh, 2);
    let mut got = vec![0.0; 4];
    conv_transpose2d_fwd(&x, &w, None, 1, 1, 1, 1, 1, spec, 2, 2, &mut got);
    let expect = tconv_oracle(&x, &w, 1, 1, 1, 1, 1, spec, 2, 2);
    assert_eq!(got, expect);
    assert!(got.iter().all(|&v| v == 2.0));

    // random depthwise case
    let mut rng = stream_rng(102, 0);
    let (n, c, h, wd) = (1, 4, 3, 5);
    let mut dspec = ConvSpec::new(3, 2, 1, 1).with_output_padding(1);
    dspec.groups = c;
    let oh = dspec.transposed_out_extent(h).unwrap();
    let ow = dspec.transposed_out_extent(wd).unwrap();
    let x: Tensor<f64> = uniform(&mut rng, &[n, c, h, wd], -1.0, 1.0);
    let w: Tensor<f64> = uniform(&mut rng, &[c, 1, 3, 3], -1.0, 1.0);
    let mut got = vec![0.0; n * c * oh * ow];
    conv_transpose2d_fwd(
        x.data(), w.data(), None, n, c, h, wd, c, dspec, oh, ow, &mut got,
    );
    let expect = tconv_oracle(x.data(), w.data(), n, c, h, wd, c, dspec, oh, ow);
    assert!(rel_err_slices(&got, &expect) < 1e-12);
}

#[test]
fn transposed_conv_zero_input_gives_bias() {
    let spec = ConvSpec::new(3, 2, 1, 1).with_output_padding(1);
    let x = [0.0f64; 4]; // 1x1x2x2
    let w: Vec<f64> = (0..9).map(|i| i as f64).collect();
    let b = [0.25f64];
    let mut out = vec![0.0; 16];
    conv_transpose2d_fwd(&x, &w, Some(&b), 1, 1, 2, 2, 1, spec, 4, 4, &mut out);
    assert!(out.iter().all(|&v| v == 0.25));
}

/// Inner-product adjoint identity over 100 random spec-consistent draws:
/// <conv2d(x), y> == <x, transposed_conv2d(y)> with the shared kernel.
#[test]
fn conv_transposed_conv_adjoint_identity_100_draws() {
    let mut rng = stream_rng(103, 0);
    for draw in 0..100 {
        let k = *[1usize, 2, 3].get(rng.gen_range(0..3)).unwrap();
        let stride = rng.gen_range(1..=2usize);
        let pad = rng.gen_range(0..=k.min(2));
        let groups_options = [1usize, 2];
        let groups = groups_options[rng.gen_range(0..2)];
        let cin = groups * rng.gen_range(1..=3usize);
        let cout = groups * rng.gen_range(1..=3usize);
        let h = rng.gen_range(k.max(2)..=8usize);
        let wd = rng.gen_range(k.max(2)..=8usize);
        let spec_fwd = ConvSpec::new(k, stride, pad, groups);
        let Ok(oh) = spec_fwd.out_extent(h) else { continue };
        let Ok(ow) = spec_fwd.out_extent(wd) else { continue };

        // output padding that makes the transpose land exactly on h, wd
        let opad_h = h + 2 * pad - k - (oh - 1) * stride;
        let opad_w = wd + 2 * pad - k - (ow - 1) * stride;
        if opad_h != opad_w || opad_h >= stride {
            continue; // the shared ConvSpec carries a single output padding
        }
        let spec_t = spec_fwd.with_output_padding(opad_h);

        let n = 1usize;
        let x: Tensor<f64> = uniform(&mut rng, &[n, cin, h, wd], -1.0, 1.0);
        let w: Tensor<f64> = uniform(&mut rng, &[cout, cin / groups, k, k], -1.0, 1.0);
        let y: Tensor<f64> = uniform(&mut rng, &[n, cout, oh, ow], -1.0, 1.0);

        let mut cx = vec![0.0; n * cout * oh * ow];
        conv2d_fwd(
            x.data(), w.data(), None, n, cin, h, wd, cout, spec_fwd, oh, ow, &mut cx,
        );
        let lhs: f64 = cx.iter().zip(y.data()).map(|(a, b)| a * b).sum();

        let th = spec_t.transposed_out_extent(oh).unwrap();
        let tw = spec_t.transposed_out_extent(ow).unwrap();
        assert_eq!((th, tw), (h, wd), "draw {draw}");
        let mut ty = vec![0.0; n * cin * h * wd];
        conv_transpose2d_fwd(
            y.data(), w.data(), None, n, cout, oh, ow, cin, spec_t, h, wd, &mut ty,
        );
        let rhs: f64 = ty.iter().zip(x.data()).map(|(a, b)| a * b).sum();

        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        assert!(rel < 1e-6, "draw {draw}: {lhs} vs {rhs}");
    }
}

// ── layer norm hand case ────────────────────────────────────────────

#[test]
fn layer_norm_hand_computation() {
    let mut tape = Tape::<f64>::new();
    let x = tape
        .constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap())
        .unwrap();
    let gamma = tape.constant(Tensor::ones(&[3])).unwrap();
    let beta = tape.constant(Tensor::zeros(&[3])).unwrap();
    let y = tape.layer_norm(x, gamma, beta, 0.0).unwrap();
    // mean 2, biased variance 2/3, so the row maps to +- sqrt(1.5)
    let s = 1.5f64.sqrt();
    let d = tape.value(y).data();
    assert!((d[0] + s).abs() < 1e-12);
    assert!(d[1].abs() < 1e-12);
    assert!((d[2] - s).abs() < 1e-12);

    // constant row collapses to beta
    let c = tape.constant(Tensor::full(&[1, 3], 5.0)).unwrap();
    let y2 = tape.layer_norm(c, gamma, beta, 1e-5).unwrap();
    assert!(tape.value(y2).data().iter().all(|&v| v == 0.0));

    // gamma = 0 collapses to beta everywhere
    let g0 = tape.constant(Tensor::zeros(&[3])).unwrap();
    let b1 = tape
        .constant(Tensor::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap())
        .unwrap();
    let x2 = tape
        .constant(Tensor::new(vec![1, 3], vec![0.3, -0.1, 4.0]).unwrap())
        .unwrap();
    let y3 = tape.layer_norm(x2, g0, b1, 1e-5).unwrap();
    assert_eq!(tape.value(y3).data(), &[7.0, 8.0, 9.0]);
}

// ── attention oracles ───────────────────────────────────────────────

/// Double-loop evaluation of the guarded global formula.
fn linear_attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let dv = v.shape()[1];
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut num = vec![0.0; dv];
        let mut den = 0.0;
        for j in 0..n {
            let mut qk = 0.0;
            for a in 0..d {
                qk += q.data()[i * d + a] * k.data()[j * d + a];
            }
            den += qk;
            for b in 0..dv {
                num[b] += qk * v.data()[j * dv + b];
            }
        }
        for b in 0..dv {
            out[i * dv + b] = num[b] / (den + DENOM_EPS);
        }
    }
    out
}

#[test]
fn linear_attention_global_matches_double_loop() {
    let mut rng = stream_rng(104, 0);
    let (n, d) = (64, 16);
    let q = feature_map_phi(&uniform::<f64>(&mut rng, &[n, d], -2.0, 2.0));
    let k = feature_map_phi(&uniform::<f64>(&mut rng, &[n, d], -2.0, 2.0));
    let v: Tensor<f64> = uniform(&mut rng, &[n, d], -1.5, 1.5);
    let got = linear_attention_global(&q, &k, &v).unwrap();
    let expect = linear_attention_oracle(&q, &k, &v);
    assert!(rel_err_slices(got.data(), &expect) < 1e-6);
}

#[test]
fn recurrent_matches_fresh_prefix_sums_at_f32() {
    let mut rng = stream_rng(105, 0);
    let (n, d) = (128, 8);
    let q32 = feature_map_phi(&uniform::<f32>(&mut rng, &[n, d], -2.0, 2.0));
    let k32 = feature_map_phi(&uniform::<f32>(&mut rng, &[n, d], -2.0, 2.0));
    let v32: Tensor<f32> = uniform(&mut rng, &[n, d], -1.0, 1.0);
    let got = linear_attention_recurrent(&q32, &k32, &v32).unwrap();

    // oracle: recompute every prefix from scratch at f64
    let q = q32.cast::<f64>();
    let k = k32.cast::<f64>();
    let v = v32.cast::<f64>();
    for i in 0..n {
        let mut s = vec![0.0f64; d * d];
        let mut z = vec![0.0f64; d];
        for j in 0..=i {
            for a in 0..d {
                z[a] += k.data()[j * d + a];
                for b in 0..d {
                    s[a * d + b] += k.data()[j * d + a] * v.data()[j * d + b];
                }
            }
        }
        let mut den = 0.0;
        let mut y = vec![0.0f64; d];
        for a in 0..d {
            den += q.data()[i * d + a] * z[a];
            for b in 0..d {
                y[b] += q.data()[i * d + a] * s[a * d + b];
            }
        }
        for b in 0..d {
            let expect = y[b] / (den + DENOM_EPS);
            let gotv = got.data()[i * d + b] as f64;
            let rel = (gotv - expect).abs() / expect.abs().max(gotv.abs()).max(1e-12);
            assert!(rel < 1e-5, "position {i} channel {b}: {gotv} vs {expect}");
        }
    }
}

#[test]
fn global_and_recurrent_agree_at_final_position_100_draws() {
    let mut rng = stream_rng(106, 0);
    for draw in 0..100 {
        let n = rng.gen_range(1..=512usize);
        let d = 2 * rng.gen_range(1..=8usize);
        let q = feature_map_phi(&uniform::<f64>(&mut rng, &[n, d], -3.0, 3.0));
        let k = feature_map_phi(&uniform::<f64>(&mut rng, &[n, d], -3.0, 3.0));
        let v: Tensor<f64> = uniform(&mut rng, &[n, d], -1.0, 1.0);
        let g = linear_attention_global(&q, &k, &v).unwrap();
        let r = linear_attention_recurrent(&q, &k, &v).unwrap();
        let last = (n - 1) * d;
        for b in 0..d {
            let rel = (g.data()[last + b] - r.data()[last + b]).abs()
                / g.data()[last + b].abs().max(1e-12);
            assert!(rel < 1e-10, "draw {draw} channel {b}");
        }
    }
}

#[test]
fn softmax_attention_matches_naive_oracle() {
    let mut rng = stream_rng(107, 0);
    let (n, d, dv) = (32, 8, 6);
    let q: Tensor<f64> = uniform(&mut rng, &[n, d], -1.0, 1.0);
    let k: Tensor<f64> = uniform(&mut rng, &[n, d], -1.0, 1.0);
    let v: Tensor<f64> = uniform(&mut rng, &[n, dv], -1.0, 1.0);
    let scale = 1.0 / (d as f64).sqrt();
    let got = softmax_attention(&q, &k, &v, scale).unwrap();

    // naive exponent-normalize
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                (0..d)
                    .map(|a| q.data()[i * d + a] * k.data()[j * d + a])
                    .sum::<f64>()
                    * scale
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mut row_sum = 0.0;
        for b in 0..dv {
            let expect: f64 = (0..n)
                .map(|j| logits[j].exp() / z * v.data()[j * dv + b])
                .sum();
            let rel = (got.data()[i * dv + b] - expect).abs() / expect.abs().max(1e-12);
            assert!(rel < 1e-6, "row {i} col {b}");
        }
        for l in &logits {
            row_sum += l.exp() / z;
        }
        assert!((row_sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_attention_uniform_logits_average_values() {
    // Q orthogonal to all K: zero logits, uniform attention
    let n = 5;
    let q = Tensor::<f64>::zeros(&[n, 4]);
    let k = Tensor::<f64>::from_fn(&[n, 4], |i| (i as f64).sin());
    let v = Tensor::<f64>::from_fn(&[n, 3], |i| i as f64);
    let y = softmax_attention(&q, &k, &v, 0.5).unwrap();
    for i in 0..n {
        for b in 0..3 {
            let mean: f64 = (0..n).map(|j| v.data()[j * 3 + b]).sum::<f64>() / n as f64;
            assert!((y.data()[i * 3 + b] - mean).abs() < 1e-12);
        }
    }
}

// ── metric oracles ──────────────────────────────────────────────────

fn random_mask(rng: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, classes: u16) -> LabelMask {
    // blobby random masks: a few seeded discs per class
    let mut labels = vec![0u16; h * w];
    for c in 1..classes {
        for _ in 0..rng.gen_range(1..=3) {
            let cy = rng.gen_range(0..h) as f64;
            let cx = rng.gen_range(0..w) as f64;
            let r = rng.gen_range(1.0..6.0);
            for y in 0..h {
                for x in 0..w {
                    let d = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    if d <= r * r {
                        labels[y * w + x] = c;
                    }
                }
            }
        }
    }
    LabelMask::new(labels, h, w, (1.0, 1.0)).unwrap()
}

/// All-pairs directed boundary distances with an exact percentile.
fn hd95_oracle(pred: &LabelMask, gt: &LabelMask, class: u16) -> Option<f64> {
    let bp = pred.boundary(class);
    let bg = gt.boundary(class);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let (sy, sx) = pred.spacing();
    let dist = |a: &(usize, usize), b: &(usize, usize)| -> f64 {
        let dy = (a.0 as f64 - b.0 as f64) * sy;
        let dx = (a.1 as f64 - b.1 as f64) * sx;
        (dy * dy + dx * dx).sqrt()
    };
    let mut pooled = Vec::new();
    for p in &bp {
        pooled.push(
            bg.iter()
                .map(|q| dist(p, q))
                .fold(f64::INFINITY, f64::min),
        );
    }
    for q in &bg {
        pooled.push(
            bp.iter()
                .map(|p| dist(q, p))
                .fold(f64::INFINITY, f64::min),
        );
    }
    Some(percentile_nearest_rank(&mut pooled, 0.95))
}

#[test]
fn metrics_match_all_pairs_oracle_on_random_masks() {
    let mut rng = stream_rng(108, 0);
    let classes = 3u16;
    let mut checked = 0;
    for _ in 0..60 {
        let pred = random_mask(&mut rng, 32, 32, classes);
        let gt = random_mask(&mut rng, 32, 32, classes);
        for c in 1..classes {
            // DSC via direct set counting
            let px: u64 = pred.labels().iter().filter(|&&l| l == c).count() as u64;
            let gx: u64 = gt.labels().iter().filter(|&&l| l == c).count() as u64;
            let inter: u64 = pred
                .labels()
                .iter()
                .zip(gt.labels())
                .filter(|(&a, &b)| a == c && b == c)
                .count() as u64;
            let expect_dsc = if px == 0 && gx == 0 {
                1.0
            } else if px == 0 || gx == 0 {
                0.0
            } else {
                2.0 * inter as f64 / (px + gx) as f64
            };
            assert_eq!(dsc(&pred, &gt, c).unwrap(), expect_dsc);

            match hd95_oracle(&pred, &gt, c) {
                Some(expect) => {
                    let got = hd95(&pred, &gt, c).unwrap();
                    assert!(
                        (got - expect).abs() < 1e-9,
                        "class {c}: {got} vs {expect}"
                    );
                    checked += 1;
                }
                None => {
                    assert!(hd95(&pred, &gt, c).is_err());
                }
            }
        }
    }
    assert!(checked > 50, "only {checked} non-degenerate pairs checked");
}

#[test]
fn hd95_symmetry_under_argument_swap() {
    let mut rng = stream_rng(109, 0);
    for _ in 0..10 {
        let a = random_mask(&mut rng, 24, 24, 2);
        let b = random_mask(&mut rng, 24, 24, 2);
        match (hd95(&a, &b, 1), hd95(&b, &a, 1)) {
            (Ok(x), Ok(y)) => assert!((x - y).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            other => panic!("asymmetric definedness: {other:?}"),
        }
    }
}

//! In-process verification suite behind `mlla selftest`: gradient checks,
//! attention equivalences, composition and identity degeneracies, metric
//! oracles, format round-trips, and the complexity counters. Exits
//! nonzero on any failure.

use rand::Rng;

use mlla_core::attention::{
    attention_flops, feature_map_phi, fit_loglog_slope, linear_attention_global,
    linear_attention_recurrent, AttentionKind, DENOM_EPS,
};
use mlla_core::block::{mlla_block, MllaBlockWeights};
use mlla_core::gradcheck::finite_difference_check_multi;
use mlla_core::kernels::conv::ConvSpec;
use mlla_core::loss::{cross_entropy, dice_loss, total_loss, LossConfig};
use mlla_core::metrics::{dsc, hd95, percentile_nearest_rank, LabelMask};
use mlla_core::network::{build_model, ModelConfig};
use mlla_core::pe::{rope, RopeParams};
use mlla_core::rng::{stream_rng, uniform};
use mlla_core::{Graph, Params, Tape, Tensor};

use crate::stf;

type Check = (&'static str, fn() -> Result<(), String>);

fn fail(msg: impl Into<String>) -> Result<(), String> {
    Err(msg.into())
}

fn gradients_core_ops() -> Result<(), String> {
    let step = 1e-5;
    let tol = 1e-4;
    let mut rng = stream_rng(1, 0);

    let x: Tensor<f64> = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let w: Tensor<f64> = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let b: Tensor<f64> = uniform(&mut rng, &[5], -0.5, 0.5);
    let err = finite_difference_check_multi(
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let sq = t.mul(y, y)?;
            t.sum_all(sq)
        },
        &[x, w, b],
        step,
    )
    .map_err(|e| e.to_string())?;
    if err > tol {
        return fail(format!("linear gradient err {err:.2e}"));
    }

    let x: Tensor<f64> = uniform(&mut rng, &[1, 3, 5, 5], -1.0, 1.0);
    let w: Tensor<f64> = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let err = finite_difference_check_multi(
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, ConvSpec::new(3, 2, 1, 1))?;
            let sq = t.mul(y, y)?;
            t.sum_all(sq)
        },
        &[x, w],
        step,
    )
    .map_err(|e| e.to_string())?;
    if err > tol {
        return fail(format!("conv2d gradient err {err:.2e}"));
    }

    let x: Tensor<f64> = uniform(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
    let w: Tensor<f64> = uniform(&mut rng, &[3, 1, 3, 3], -1.0, 1.0);
    let mut spec = ConvSpec::new(3, 2, 1, 1).with_output_padding(1);
    spec.groups = 3;
    let err = finite_difference_check_multi(
        |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], None, spec)?;
            let sq = t.mul(y, y)?;
            t.sum_all(sq)
        },
        &[x, w],
        step,
    )
    .map_err(|e| e.to_string())?;
    if err > tol {
        return fail(format!("conv_transpose2d gradient err {err:.2e}"));
    }

    let x: Tensor<f64> = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    let gamma: Tensor<f64> = uniform(&mut rng, &[6], 0.5, 1.5);
    let beta: Tensor<f64> = uniform(&mut rng, &[6], -0.5, 0.5);
    let err = finite_difference_check_multi(
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let sm = t.softmax(y)?;
            let ge = t.gelu(sm)?;
            let si = t.silu(ge)?;
            let ph = t.elu_plus_one(si)?;
            t.sum_all(ph)
        },
        &[x, gamma, beta],
        step,
    )
    .map_err(|e| e.to_string())?;
    if err > tol {
        return fail(format!("norm/activation chain gradient err {err:.2e}"));
    }
    Ok(())
}

fn attention_equivalences() -> Result<(), String> {
    let mut rng = stream_rng(2, 0);
    for draw in 0..20 {
        let n = 1 + rng.gen_range(0..200usize);
        let d = 8;
        let q = feature_map_phi(&uniform::<f64>(&mut rng, &[n, d], -3.0, 3.0));
        let k = feature_map_phi(&uniform::<f64>(&mut rng, &[n, d], -3.0, 3.0));
        let v: Tensor<f64> = uniform(&mut rng, &[n, d], -1.0, 1.0);
        let g = linear_attention_global(&q, &k, &v).map_err(|e| e.to_string())?;
        let r = linear_attention_recurrent(&q, &k, &v).map_err(|e| e.to_string())?;
        for b in 0..d {
            let gd = g.data()[(n - 1) * d + b];
            let rd = r.data()[(n - 1) * d + b];
            if (gd - rd).abs() / gd.abs().max(1e-12) > 1e-10 {
                return fail(format!("draw {draw}: global/recurrent mismatch at final position"));
            }
        }
        // double-loop oracle at the first position
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for j in 0..n {
            let mut qk = 0.0;
            for a in 0..d {
                qk += q.data()[a] * k.data()[j * d + a];
            }
            den += qk;
            for b in 0..d {
                num[b] += qk * v.data()[j * d + b];
            }
        }
        for b in 0..d {
            let expect = num[b] / (den + DENOM_EPS);
            if (g.data()[b] - expect).abs() / expect.abs().max(1e-12) > 1e-6 {
                return fail(format!("draw {draw}: double-loop oracle mismatch"));
            }
        }
    }
    Ok(())
}

fn rope_properties() -> Result<(), String> {
    let p = RopeParams::new(16).map_err(|e| e.to_string())?;
    let x: Tensor<f64> = uniform(&mut stream_rng(3, 0), &[6, 16], -2.0, 2.0);
    let positions: Vec<usize> = (0..6).collect();
    let y = rope(&x, &positions, &p).map_err(|e| e.to_string())?;
    for r in 0..6 {
        let nx: f64 = x.data()[r * 16..(r + 1) * 16].iter().map(|v| v * v).sum();
        let ny: f64 = y.data()[r * 16..(r + 1) * 16].iter().map(|v| v * v).sum();
        if (nx.sqrt() - ny.sqrt()).abs() / nx.sqrt() > 1e-6 {
            return fail("rope did not preserve norms");
        }
    }
    let q: Tensor<f64> = uniform(&mut stream_rng(3, 1), &[1, 8], -1.0, 1.0);
    let k: Tensor<f64> = uniform(&mut stream_rng(3, 2), &[1, 8], -1.0, 1.0);
    let p8 = RopeParams::new(8).map_err(|e| e.to_string())?;
    let dot = |m: usize, n: usize| -> f64 {
        let rq = rope(&q, &[m], &p8).unwrap();
        let rk = rope(&k, &[n], &p8).unwrap();
        rq.data().iter().zip(rk.data()).map(|(a, b)| a * b).sum()
    };
    for m in 0..6 {
        for n in 0..6 {
            if (dot(m + 2, n + 2) - dot(m, n)).abs() > 1e-10 {
                return fail("rope relative-phase property violated");
            }
        }
    }
    Ok(())
}

fn identity_degeneracies() -> Result<(), String> {
    // zeroed non-residual weights make a block stack the identity
    let mut params = Params::<f64>::new();
    let mut rng = stream_rng(4, 0);
    let w1 = MllaBlockWeights::init(&mut params, "a", 8, 2, &mut rng).map_err(|e| e.to_string())?;
    let w2 = MllaBlockWeights::init(&mut params, "b", 8, 2, &mut rng).map_err(|e| e.to_string())?;
    for name in ["a.out.w", "a.out.b", "a.mlp_fc2.w", "a.mlp_fc2.b", "b.out.w", "b.out.b",
                 "b.mlp_fc2.w", "b.mlp_fc2.b"] {
        let id = params.by_name(name).ok_or("missing param")?;
        let shape = params.get(id).shape().to_vec();
        *params.get_mut(id) = Tensor::zeros(&shape);
    }
    let mut g = Graph::new(&params);
    let z = g
        .tape
        .constant(Tensor::from_fn(&[1, 16, 8], |i| (i as f64 * 0.19).sin()))
        .map_err(|e| e.to_string())?;
    let z1 = mlla_block(&mut g, z, &w1, 4, 4).map_err(|e| e.to_string())?;
    let z2 = mlla_block(&mut g, z1, &w2, 4, 4).map_err(|e| e.to_string())?;
    if g.tape.value(z2).data() != g.tape.value(z).data() {
        return fail("zeroed block stack is not the identity");
    }

    // loss weight projections
    let mask = LabelMask::new(vec![0, 1, 1, 0], 2, 2, (1.0, 1.0)).map_err(|e| e.to_string())?;
    let mut tape = Tape::<f64>::new();
    let logits = tape
        .constant(Tensor::from_fn(&[1, 2, 2, 2], |i| (i as f64 * 0.31).cos()))
        .map_err(|e| e.to_string())?;
    let ce = cross_entropy(&mut tape, logits, &[mask.clone()]).map_err(|e| e.to_string())?;
    let dl = dice_loss(&mut tape, logits, &[mask.clone()], 1.0).map_err(|e| e.to_string())?;
    let ce_only = total_loss(&mut tape, logits, &[mask.clone()],
        &LossConfig { alpha: 1.0, beta: 0.0, smooth: 1.0 }).map_err(|e| e.to_string())?;
    let dl_only = total_loss(&mut tape, logits, &[mask],
        &LossConfig { alpha: 0.0, beta: 1.0, smooth: 1.0 }).map_err(|e| e.to_string())?;
    if tape.value(ce_only).item().unwrap() != tape.value(ce).item().unwrap()
        || tape.value(dl_only).item().unwrap() != tape.value(dl).item().unwrap()
    {
        return fail("loss weight projections are not exact");
    }
    Ok(())
}

fn metric_oracles() -> Result<(), String> {
    // hand cases
    let single = |y: usize, x: usize| -> LabelMask {
        let mut l = vec![0u16; 64];
        l[y * 8 + x] = 1;
        LabelMask::new(l, 8, 8, (1.0, 1.0)).unwrap()
    };
    let a = single(2, 1);
    let b = single(2, 6);
    if hd95(&a, &b, 1).map_err(|e| e.to_string())? != 5.0 {
        return fail("singleton pair distance is not 5.0 mm");
    }
    if hd95(&a, &a, 1).map_err(|e| e.to_string())? != 0.0 || dsc(&a, &a, 1).unwrap() != 1.0 {
        return fail("identical-mask metrics wrong");
    }

    // random masks against an all-pairs oracle
    let mut rng = stream_rng(5, 0);
    for _ in 0..20 {
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| -> LabelMask {
            let mut l = vec![0u16; 256];
            let (cy, cx, r) = (
                rng.gen_range(2..14) as f64,
                rng.gen_range(2..14) as f64,
                rng.gen_range(1.0..4.0),
            );
            for y in 0..16 {
                for x in 0..16 {
                    if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
                        l[y * 16 + x] = 1;
                    }
                }
            }
            LabelMask::new(l, 16, 16, (1.0, 1.0)).unwrap()
        };
        let p = mk(&mut rng);
        let g = mk(&mut rng);
        let (bp, bg) = (p.boundary(1), g.boundary(1));
        if bp.is_empty() || bg.is_empty() {
            continue;
        }
        let mut pooled = Vec::new();
        for a in &bp {
            pooled.push(
                bg.iter()
                    .map(|b| {
                        (((a.0 as f64 - b.0 as f64).powi(2)) + ((a.1 as f64 - b.1 as f64).powi(2)))
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min),
            );
        }
        for b in &bg {
            pooled.push(
                bp.iter()
                    .map(|a| {
                        (((a.0 as f64 - b.0 as f64).powi(2)) + ((a.1 as f64 - b.1 as f64).powi(2)))
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min),
            );
        }
        let expect = percentile_nearest_rank(&mut pooled, 0.95);
        let got = hd95(&p, &g, 1).map_err(|e| e.to_string())?;
        if (got - expect).abs() > 1e-9 {
            return fail(format!("hd95 {got} vs all-pairs {expect}"));
        }
    }
    Ok(())
}

fn stf_roundtrips() -> Result<(), String> {
    let f32t: Tensor<f32> = uniform(&mut stream_rng(6, 0), &[3, 4, 5], -2.0, 2.0);
    let b = stf::encode(&stf::StfData::F32(f32t.clone())).map_err(|e| e.to_string())?;
    if stf::decode(&b).map_err(|e| e.to_string())? != stf::StfData::F32(f32t) {
        return fail("f32 round trip not bitwise");
    }
    let f64t: Tensor<f64> = uniform(&mut stream_rng(6, 1), &[7], -2.0, 2.0);
    let b = stf::encode(&stf::StfData::F64(f64t.clone())).map_err(|e| e.to_string())?;
    if stf::decode(&b).map_err(|e| e.to_string())? != stf::StfData::F64(f64t) {
        return fail("f64 round trip not bitwise");
    }
    let u = stf::StfData::U16 {
        shape: vec![2, 3],
        data: vec![0, 1, 2, 3, 4, 65535],
        spacing: Some((0.5, 0.25)),
    };
    let b = stf::encode(&u).map_err(|e| e.to_string())?;
    if stf::decode(&b).map_err(|e| e.to_string())? != u {
        return fail("u16 round trip not exact");
    }
    Ok(())
}

fn flop_slopes() -> Result<(), String> {
    let ns: Vec<f64> = [256., 512., 1024., 2048., 4096., 8192., 16384.].to_vec();
    for (kind, expect) in [(AttentionKind::Linear, 1.0), (AttentionKind::Softmax, 2.0)] {
        let ys: Vec<f64> = ns
            .iter()
            .map(|&n| attention_flops(kind, n as u64, 64, 64) as f64)
            .collect();
        let (slope, _, _) = fit_loglog_slope(&ns, &ys).map_err(|e| e.to_string())?;
        if (slope - expect).abs() > 0.01 {
            return fail(format!("{} flop slope {slope}", kind.name()));
        }
    }
    Ok(())
}

fn determinism() -> Result<(), String> {
    let m1 = build_model::<f32>(&ModelConfig::micro(), 9).map_err(|e| e.to_string())?;
    let m2 = build_model::<f32>(&ModelConfig::micro(), 9).map_err(|e| e.to_string())?;
    for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
        if a.data() != b.data() {
            return fail("same-seed builds differ");
        }
    }
    let mut tape = Tape::<f32>::new();
    let x = tape
        .leaf(Tensor::from_fn(&[4, 4], |i| (i as f32 * 0.7).sin()))
        .map_err(|e| e.to_string())?;
    let y = tape.gelu(x).map_err(|e| e.to_string())?;
    let s = tape.sum_all(y).map_err(|e| e.to_string())?;
    let g1 = tape.backward(s).map_err(|e| e.to_string())?;
    let g2 = tape.backward(s).map_err(|e| e.to_string())?;
    if g1.get(x).unwrap().data() != g2.get(x).unwrap().data() {
        return fail("backward is not bitwise deterministic");
    }
    Ok(())
}

/// Run every check; returns the number of failures.
pub fn run() -> usize {
    let checks: Vec<Check> = vec![
        ("gradients/core-ops", gradients_core_ops),
        ("attention/equivalences", attention_equivalences),
        ("rope/properties", rope_properties),
        ("identities/degeneracies", identity_degeneracies),
        ("metrics/oracles", metric_oracles),
        ("format/stf-roundtrips", stf_roundtrips),
        ("complexity/flop-slopes", flop_slopes),
        ("determinism/build-and-backward", determinism),
    ];
    let mut failures = 0;
    for (name, f) in checks {
        match f() {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if failures == 0 {
        println!("selftest: all checks passed");
    } else {
        println!("selftest: {failures} check(s) failed");
    }
    failures
}

//! Attention-complexity benchmark: counted multiply-adds and measured
//! wall time across sequence lengths, with fitted log-log slopes.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use mlla_core::attention::{
    attention_flops, feature_map_phi, fit_loglog_slope, linear_attention_global,
    softmax_attention, AttentionKind,
};
use mlla_core::rng::{stream_rng, uniform};
use mlla_core::Tensor;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub kernels: Vec<AttentionKind>,
    pub ns: Vec<usize>,
    pub dim: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            kernels: vec![AttentionKind::Linear, AttentionKind::Softmax],
            ns: vec![1024, 2048, 4096, 8192, 16384],
            dim: 64,
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSample {
    pub n: usize,
    pub flops: u64,
    pub seconds_median: f64,
    pub seconds_min: f64,
    pub seconds_max: f64,
    /// Spread (max - min) exceeded half the median.
    pub unreliable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub kernel: String,
    pub dim: usize,
    pub reps: usize,
    pub samples: Vec<BenchSample>,
    pub flop_slope: f64,
    pub flop_residual: f64,
    pub time_slope: f64,
    pub time_residual: f64,
}

fn validate(opts: &BenchOptions) -> Result<()> {
    if opts.ns.len() < 5 {
        return Err(CliError::Validation(format!(
            "need at least 5 sequence lengths, got {}",
            opts.ns.len()
        )));
    }
    if !opts.ns.windows(2).all(|w| w[0] < w[1]) {
        return Err(CliError::Validation(
            "sequence lengths must be strictly increasing".into(),
        ));
    }
    if opts.reps < 5 {
        return Err(CliError::Validation(format!(
            "need at least 5 repetitions, got {}",
            opts.reps
        )));
    }
    if opts.kernels.is_empty() {
        return Err(CliError::Validation("no kernels selected".into()));
    }
    Ok(())
}

/// Run the benchmark; one report per kernel.
pub fn run_bench(opts: &BenchOptions) -> Result<Vec<BenchReport>> {
    validate(opts)?;
    let mut reports = Vec::with_capacity(opts.kernels.len());
    for &kind in &opts.kernels {
        let mut samples = Vec::with_capacity(opts.ns.len());
        for (i, &n) in opts.ns.iter().enumerate() {
            let mut rng = stream_rng(opts.seed, i as u64);
            let d = opts.dim;
            // the feature map runs outside the timed region so measured
            // work matches the counted kernel arithmetic
            let q_raw: Tensor<f32> = uniform(&mut rng, &[n, d], -2.0, 2.0);
            let k_raw: Tensor<f32> = uniform(&mut rng, &[n, d], -2.0, 2.0);
            let v: Tensor<f32> = uniform(&mut rng, &[n, d], -1.0, 1.0);
            let (q, k) = match kind {
                AttentionKind::Linear => (feature_map_phi(&q_raw), feature_map_phi(&k_raw)),
                AttentionKind::Softmax => (q_raw, k_raw),
            };
            let scale = 1.0 / (d as f32).sqrt();

            let mut times = Vec::with_capacity(opts.reps);
            for _ in 0..opts.reps {
                let start = Instant::now();
                let out = match kind {
                    AttentionKind::Linear => linear_attention_global(&q, &k, &v)?,
                    AttentionKind::Softmax => softmax_attention(&q, &k, &v, scale)?,
                };
                black_box(out.data()[0]);
                times.push(start.elapsed().as_secs_f64());
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = times[times.len() / 2];
            let (min, max) = (times[0], times[times.len() - 1]);
            samples.push(BenchSample {
                n,
                flops: attention_flops(kind, n as u64, d as u64, d as u64),
                seconds_median: median,
                seconds_min: min,
                seconds_max: max,
                unreliable: (max - min) > 0.5 * median,
            });
        }
        let ns: Vec<f64> = samples.iter().map(|s| s.n as f64).collect();
        let flops: Vec<f64> = samples.iter().map(|s| s.flops as f64).collect();
        let times: Vec<f64> = samples.iter().map(|s| s.seconds_median).collect();
        let (flop_slope, _, flop_residual) = fit_loglog_slope(&ns, &flops)?;
        let (time_slope, _, time_residual) = fit_loglog_slope(&ns, &times)?;
        reports.push(BenchReport {
            kernel: kind.name().to_string(),
            dim: opts.dim,
            reps: opts.reps,
            samples,
            flop_slope,
            flop_residual,
            time_slope,
            time_residual,
        });
    }
    Ok(reports)
}

/// Aligned-column rendering with the same numbers as the JSON.
pub fn render_text(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "kernel: {}   dim: {}   reps: {}\n",
        report.kernel, report.dim, report.reps
    ));
    out.push_str(&format!(
        "{:>8} {:>16} {:>14} {:>14} {:>14} {:>11}\n",
        "N", "flops", "median_s", "min_s", "max_s", "unreliable"
    ));
    for s in &report.samples {
        out.push_str(&format!(
            "{:>8} {:>16} {:>14.6} {:>14.6} {:>14.6} {:>11}\n",
            s.n, s.flops, s.seconds_median, s.seconds_min, s.seconds_max, s.unreliable
        ));
    }
    out.push_str(&format!(
        "flop slope {:.4} (rms residual {:.2e})   time slope {:.4} (rms residual {:.2e})\n",
        report.flop_slope, report.flop_residual, report.time_slope, report.time_residual
    ));
    out
}

//! Reference implementations the library is checked against. Each one is
//! written directly from its definition, favouring clarity over speed, and
//! shares no code with the crate under test.

#![allow(dead_code)]

use std::path::Path;

use neural_scoring::config::RunConfig;

/// `[n, k] × [k, m]` by the triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

pub struct DenseLinear {
    /// `[in, out]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLinear {
    pub fn apply(&self, x: &[f64], rows: usize, fan_in: usize) -> Vec<f64> {
        let fan_out = self.bias.len();
        let mut y = naive_matmul(x, &self.weight, rows, fan_in, fan_out);
        for r in 0..rows {
            for c in 0..fan_out {
                y[r * fan_out + c] += self.bias[c];
            }
        }
        y
    }
}

/// Multi-head self-attention where disallowed keys are left out of the
/// softmax altogether instead of being pushed down by a bias.
#[allow(clippy::too_many_arguments)]
pub fn dense_masked_attention(
    x: &[f64],
    s: usize,
    d: usize,
    allow: &[bool],
    heads: usize,
    q: &DenseLinear,
    k: &DenseLinear,
    v: &DenseLinear,
    o: &DenseLinear,
) -> Vec<f64> {
    let (qx, kx, vx) = (q.apply(x, s, d), k.apply(x, s, d), v.apply(x, s, d));
    let dh = d / heads;
    let mut cat = vec![0.0; s * d];
    for h in 0..heads {
        for i in 0..s {
            let keys: Vec<usize> = (0..s).filter(|&j| allow[i * s + j]).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    (0..dh)
                        .map(|c| qx[i * d + h * dh + c] * kx[j * d + h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..dh {
                cat[i * d + h * dh + c] = keys
                    .iter()
                    .zip(&w)
                    .map(|(&j, wj)| wj / z * vx[j * d + h * dh + c])
                    .sum();
            }
        }
    }
    o.apply(&cat, s, d)
}

pub fn layer_norm_rows(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for (j, v) in row.iter().enumerate() {
            out.push(gamma[j] * (v - mean) / (var + eps).sqrt() + beta[j]);
        }
    }
    out
}

/// Miss and false-alarm rates at threshold `theta`, counted directly.
pub fn rates_at(tar: &[f64], non: &[f64], theta: f64) -> (f64, f64) {
    let miss = tar.iter().filter(|&&s| s < theta).count() as f64 / tar.len() as f64;
    let fa = non.iter().filter(|&&s| s >= theta).count() as f64 / non.len() as f64;
    (miss, fa)
}

/// Every distinct score plus `+∞`, ascending.
pub fn all_thresholds(tar: &[f64], non: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = tar.iter().chain(non).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.push(f64::INFINITY);
    t
}

/// EER by brute force: rates recounted at each threshold, then the first
/// exact crossing or the linear interpolation across the first sign change
/// of `p_fa - p_miss`.
pub fn oracle_eer(tar: &[f64], non: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = all_thresholds(tar, non)
        .iter()
        .map(|&t| rates_at(tar, non, t))
        .collect();
    for w in 0..pts.len() {
        let (ma, fa) = pts[w];
        if fa == ma {
            return ma;
        }
        if w + 1 < pts.len() {
            let (mb, fb) = pts[w + 1];
            let (da, db) = (fa - ma, fb - mb);
            if da > 0.0 && db < 0.0 {
                let alpha = da / (da - db);
                return ma + alpha * (mb - ma);
            }
        }
    }
    panic!("no crossing");
}

pub fn oracle_mindcf(tar: &[f64], non: &[f64], p_tar: f64, c_miss: f64, c_fa: f64) -> f64 {
    let norm = (c_miss * p_tar).min(c_fa * (1.0 - p_tar));
    all_thresholds(tar, non)
        .iter()
        .map(|&t| {
            let (m, f) = rates_at(tar, non, t);
            c_miss * p_tar * m + c_fa * (1.0 - p_tar) * f
        })
        .fold(f64::INFINITY, f64::min)
        / norm
}

/// Weighted cross-entropy of `r` against `y`, normalized by `r.len()`.
pub fn oracle_bce(r: &[f64], y: &[f64], lambda: f64) -> f64 {
    let c = 1e-7;
    -r.iter()
        .zip(y)
        .map(|(&r, &y)| {
            let r = r.clamp(c, 1.0 - c);
            lambda * y * r.ln() + (1.0 - lambda) * (1.0 - y) * (1.0 - r).ln()
        })
        .sum::<f64>()
        / r.len() as f64
}

/// Its derivative with respect to each `r` away from the clamp.
pub fn oracle_bce_grad(r: &[f64], y: &[f64], lambda: f64, norm: f64) -> Vec<f64> {
    r.iter()
        .zip(y)
        .map(|(&r, &y)| -(lambda * y / r - (1.0 - lambda) * (1.0 - y) / (1.0 - r)) / norm)
        .collect()
}

/// A run small enough to go through every stage in seconds.
pub fn tiny_run_config(output_dir: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 3
output_dir = "{}"

[corpus]
train_speakers = 4
heldout_speakers = 3
babble_speakers = 4
train_utts_per_speaker = 10
enroll_utts_per_speaker = 2
source_utts_per_speaker = 10
min_duration_s = 1.0
max_duration_s = 1.2
eval_tests_per_condition = 6
eval_targets = 6
eval_nontargets = 12

[model]
embed_dim = 16
model_dim = 16
heads = 2
ff_dim = 32
frame_dim = 16
conv_channels = [4, 8]

[pretrain]
epochs = 2

[train]
batch_tests = 4
enrollments = 3
epochs = 2
batches_per_epoch = 2
avg_last_k = 2

[probe]
pairs = 3
"#,
        output_dir.display()
    );
    RunConfig::from_toml(&text).expect("tiny config is valid")
}

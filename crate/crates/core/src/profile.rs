//! Latency profiling: full-model forward timing, an attention-only
//! microbenchmark with naive and blocked kernels, and log-log fitting.
//!
//! Timings are medians over repetitions after one discarded warm-up run.
//! Everything runs on the calling thread.

use crate::error::{bail, Result};
use crate::model::{InferenceModel, PackedContext};
use crate::tensor::kernels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineDescriptor {
    pub os: String,
    pub arch: String,
    pub cpu_model: String,
    pub logical_cpus: usize,
}

impl MachineDescriptor {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
            .unwrap_or_else(|| "unknown".into());
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpu_model,
            logical_cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }

    /// `#`-prefixed header lines for CSV outputs.
    pub fn comment_lines(&self) -> String {
        format!("# machine os={} arch={} cpus={}\n# cpu {}\n", self.os, self.arch, self.logical_cpus, self.cpu_model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub length: usize,
    /// Median seconds per forward.
    pub seconds: f64,
    pub tokens_per_second: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in natural-log units.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub variant: String,
    pub points: Vec<LatencyPoint>,
    pub fit: LogLogFit,
    pub machine: MachineDescriptor,
}

/// Least-squares line through `(ln x, ln y)`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        bail!(Input, "log-log fit needs at least two positive points");
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        bail!(Input, "log-log fit needs distinct lengths");
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(LogLogFit { slope, intercept, residual: (rss / n).sqrt() })
}

fn check_lengths(lengths: &[usize], repetitions: usize) -> Result<()> {
    if lengths.len() < 2 || repetitions < 3 {
        bail!(Input, "need at least 2 lengths and 3 repetitions");
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        bail!(Input, "lengths must be positive and strictly increasing");
    }
    Ok(())
}

fn median_seconds(repetitions: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..repetitions)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

fn build_profile(variant: &str, lengths: &[usize], secs: Vec<f64>) -> Result<LatencyProfile> {
    let points: Vec<LatencyPoint> =
        lengths.iter().zip(&secs).map(|(&length, &seconds)| LatencyPoint { length, seconds, tokens_per_second: length as f64 / seconds }).collect();
    let xs: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    let fit = fit_loglog(&xs, &secs)?;
    Ok(LatencyProfile { variant: variant.into(), points, fit, machine: MachineDescriptor::detect() })
}

/// Full forward latency of the model at each context length.
pub fn latency_profile(model: &InferenceModel, lengths: &[usize], repetitions: usize, seed: u64) -> Result<LatencyProfile> {
    check_lengths(lengths, repetitions)?;
    let cfg = &model.cfg;
    if let Some(&too_long) = lengths.iter().find(|&&l| l > cfg.max_context) {
        bail!(Input, "length {too_long} exceeds max_context {}", cfg.max_context);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut secs = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let ctx = PackedContext::single(tokens, 0, crate::corpus::Domain::Land);
        let mut failure = None;
        let s = median_seconds(repetitions, || {
            if let Err(e) = model.logits(&ctx) {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        secs.push(s);
    }
    build_profile(if model.is_quantized() { "model-int8" } else { "model-dense" }, lengths, secs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKernel {
    /// One query row at a time over a full score row.
    Naive,
    /// Query and key tiles with a running (online) softmax.
    Blocked,
}

impl AttentionKernel {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKernel::Naive => "attention-naive",
            AttentionKernel::Blocked => "attention-blocked",
        }
    }
}

const QUERY_TILE: usize = 32;
const KEY_TILE: usize = 64;

/// Causal single-head attention over row-major `t × d` inputs.
pub fn causal_attention(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize, kernel: AttentionKernel) -> Result<Vec<f64>> {
    if q.len() != t * d || k.len() != t * d || v.len() != t * d {
        bail!(Dimension, "attention inputs must all be {t}x{d}");
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; t * d];
    match kernel {
        AttentionKernel::Naive => {
            let mut scores = vec![0.0; t];
            for i in 0..t {
                let qi = &q[i * d..(i + 1) * d];
                for j in 0..=i {
                    scores[j] = kernels::dot(qi, &k[j * d..(j + 1) * d]) * scale;
                }
                kernels::softmax_in_place(&mut scores[..=i]);
                let oi = &mut out[i * d..(i + 1) * d];
                for j in 0..=i {
                    let w = scores[j];
                    oi.iter_mut().zip(&v[j * d..(j + 1) * d]).for_each(|(o, x)| *o += w * x);
                }
            }
        }
        AttentionKernel::Blocked => {
            let mut row_max = vec![0.0; QUERY_TILE];
            let mut row_sum = vec![0.0; QUERY_TILE];
            let mut s = vec![0.0; QUERY_TILE * KEY_TILE];
            for qs in (0..t).step_by(QUERY_TILE) {
                let qe = (qs + QUERY_TILE).min(t);
                row_max.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
                row_sum.iter_mut().for_each(|x| *x = 0.0);
                for ks in (0..qe).step_by(KEY_TILE) {
                    let ke = (ks + KEY_TILE).min(qe);
                    for i in qs..qe {
                        let r = i - qs;
                        let last = ke.min(i + 1);
                        if last <= ks {
                            continue;
                        }
                        let qi = &q[i * d..(i + 1) * d];
                        let srow = &mut s[r * KEY_TILE..r * KEY_TILE + (last - ks)];
                        let mut tile_max = f64::NEG_INFINITY;
                        for (c, j) in (ks..last).enumerate() {
                            srow[c] = kernels::dot(qi, &k[j * d..(j + 1) * d]) * scale;
                            tile_max = tile_max.max(srow[c]);
                        }
                        let new_max = row_max[r].max(tile_max);
                        let rescale = (row_max[r] - new_max).exp();
                        let oi = &mut out[i * d..(i + 1) * d];
                        if rescale != 1.0 {
                            oi.iter_mut().for_each(|o| *o *= rescale);
                        }
                        row_sum[r] *= rescale;
                        for (c, j) in (ks..last).enumerate() {
                            let w = (srow[c] - new_max).exp();
                            row_sum[r] += w;
                            oi.iter_mut().zip(&v[j * d..(j + 1) * d]).for_each(|(o, x)| *o += w * x);
                        }
                        row_max[r] = new_max;
                    }
                }
                for i in qs..qe {
                    let inv = 1.0 / row_sum[i - qs];
                    out[i * d..(i + 1) * d].iter_mut().for_each(|o| *o *= inv);
                }
            }
        }
    }
    Ok(out)
}

/// Attention-only latency for each length with random `t × d_head` inputs.
pub fn attention_profile(lengths: &[usize], d_head: usize, repetitions: usize, kernel: AttentionKernel, seed: u64) -> Result<LatencyProfile> {
    check_lengths(lengths, repetitions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut secs = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let mut draw = || (0..t * d_head).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (q, k, v) = (draw(), draw(), draw());
        let mut sink = 0.0;
        let s = median_seconds(repetitions, || {
            let o = causal_attention(&q, &k, &v, t, d_head, kernel).expect("shapes checked");
            sink += o[o.len() - 1];
        });
        std::hint::black_box(sink);
        secs.push(s);
    }
    build_profile(kernel.name(), lengths, secs)
}

/// Writes `length,seconds,tok_per_s,variant` rows under comment headers.
pub fn write_profile_csv(path: &Path, comment: &str, profiles: &[LatencyProfile]) -> Result<()> {
    let mut text = String::from(comment);
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    if let Some(p) = profiles.first() {
        text.push_str(&p.machine.comment_lines());
    }
    for p in profiles {
        text.push_str(&format!("# fit variant={} slope={:.4} intercept={:.4} residual={:.4}\n", p.variant, p.fit.slope, p.fit.intercept, p.fit.residual));
    }
    text.push_str("length,seconds,tok_per_s,variant\n");
    for p in profiles {
        for pt in &p.points {
            text.push_str(&format!("{},{:.9},{:.3},{}\n", pt.length, pt.seconds, pt.tokens_per_second, p.variant));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    #[test]
    fn exact_power_law_fit() {
        let xs = [256.0, 512.0, 1024.0, 2048.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3e-9 * x.powi(2)).collect();
        let f = fit_loglog(&xs, &ys).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 3e-9f64.ln()).abs() < 1e-9);
        assert!(f.residual < 1e-12);
        assert!(fit_loglog(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn kernels_agree() {
        let (t, d) = (150, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut draw = || (0..t * d).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (q, k, v) = (draw(), draw(), draw());
        let a = causal_attention(&q, &k, &v, t, d, AttentionKernel::Naive).unwrap();
        let b = causal_attention(&q, &k, &v, t, d, AttentionKernel::Blocked).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
        // first row attends only to itself
        assert_eq!(&a[..d], &v[..d]);
    }

    #[test]
    fn precondition_errors() {
        let m = InferenceModel::new(&Model::init(ModelConfig::tiny(30)).unwrap()).unwrap();
        assert!(latency_profile(&m, &[4, 8], 2, 0).is_err());
        assert!(latency_profile(&m, &[8, 4], 3, 0).is_err());
        assert!(latency_profile(&m, &[8, 32], 3, 0).is_err());
        let p = latency_profile(&m, &[4, 8, 16], 3, 0).unwrap();
        assert_eq!(p.points.len(), 3);
        assert_eq!(p.variant, "model-dense");
    }

    #[test]
    fn csv_has_headers() {
        let p = attention_profile(&[16, 32], 4, 3, AttentionKernel::Naive, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_profile_csv(&path, "# seed=0 config_hash=abc", &[p]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# seed=0"));
        assert!(text.contains("# machine"));
        assert!(text.contains("length,seconds,tok_per_s,variant\n16,"));
    }
}

//! Tape-free forward pass for decoding, perplexity and latency work, with
//! optional INT8 weights.
//!
//! The arithmetic mirrors the recorded forward operation for operation, so
//! full-precision logits agree with the tape to rounding.

use super::forward::{phase_table, position_table};
use super::{block_name, fusion_name, Model, PackedContext};
use crate::attention::{causal_mask, same_doc_indicator, NEG_INF};
use crate::corpus::Domain;
use crate::error::{bail, Result};
use crate::quant::{quantize_int8, quantized_matmul_rows, QuantizedMatrix};
use crate::tensor::{kernels, Tensor};
use crate::tokenizer::EOS;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A weight matrix applied as `x·W`.
#[derive(Clone, Debug)]
pub enum Linear {
    /// `W` stored `in×out`.
    Dense(Tensor),
    /// `Wᵀ` quantized per output feature (`out×in`).
    Int8(QuantizedMatrix),
}

impl Linear {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Linear::Dense(w) => x.matmul(w),
            Linear::Int8(q) => quantized_matmul_rows(x, q),
        }
    }

    fn quantize(w: &Tensor) -> Result<Self> {
        Ok(Linear::Int8(quantize_int8(&w.transpose())?))
    }

    pub fn storage_bytes(&self) -> usize {
        match self {
            Linear::Dense(w) => 8 * w.len(),
            Linear::Int8(q) => q.storage_bytes(),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm_attn: Vec<f64>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm_mlp: Vec<f64>,
    w_in: Linear,
    b_in: Vec<f64>,
    w_out: Linear,
    b_out: Vec<f64>,
}

#[derive(Clone, Debug)]
struct FusionWeights {
    gate: f64,
    wq: Linear,
    wk: Linear,
    wv: Linear,
}

/// Read-only weights prepared for repeated tape-free evaluation.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub cfg: super::ModelConfig,
    embed: Tensor,
    output: Linear,
    alpha: f64,
    b_same: f64,
    b_cross: f64,
    blocks: Vec<Block>,
    fusion: BTreeMap<Domain, FusionWeights>,
    final_norm: Vec<f64>,
    quantized: bool,
}

impl InferenceModel {
    pub fn new(model: &Model) -> Result<Self> {
        Self::build(model, false)
    }

    /// Weight-only INT8: every projection, the fusion maps and the tied
    /// embedding are quantized; norms, biases and scalars stay `f64`.
    pub fn quantized(model: &Model) -> Result<Self> {
        Self::build(model, true)
    }

    fn build(model: &Model, int8: bool) -> Result<Self> {
        let p = &model.params;
        let lin = |name: &str| -> Result<Linear> {
            let w = p.get(name)?;
            if int8 {
                Linear::quantize(w)
            } else {
                Ok(Linear::Dense(w.clone()))
            }
        };
        let vec_of = |name: &str| -> Result<Vec<f64>> { Ok(p.get(name)?.data().to_vec()) };
        let table = p.get("embed.tokens")?;
        let (embed, output) = if int8 {
            let q = quantize_int8(table)?;
            (q.dequantize(), Linear::Int8(q))
        } else {
            (table.clone(), Linear::Dense(table.transpose()))
        };
        let mut blocks = Vec::new();
        for l in 0..model.cfg.n_layers {
            blocks.push(Block {
                norm_attn: vec_of(&block_name(l, "norm_attn"))?,
                wq: lin(&block_name(l, "wq"))?,
                wk: lin(&block_name(l, "wk"))?,
                wv: lin(&block_name(l, "wv"))?,
                wo: lin(&block_name(l, "wo"))?,
                norm_mlp: vec_of(&block_name(l, "norm_mlp"))?,
                w_in: lin(&block_name(l, "w_in"))?,
                b_in: vec_of(&block_name(l, "b_in"))?,
                w_out: lin(&block_name(l, "w_out"))?,
                b_out: vec_of(&block_name(l, "b_out"))?,
            });
        }
        let mut fusion = BTreeMap::new();
        if model.cfg.fusion_enabled {
            for d in Domain::ALL {
                fusion.insert(
                    d,
                    FusionWeights {
                        gate: p.get(&fusion_name(d, "gate"))?.item(),
                        wq: lin(&fusion_name(d, "wq"))?,
                        wk: lin(&fusion_name(d, "wk"))?,
                        wv: lin(&fusion_name(d, "wv"))?,
                    },
                );
            }
        }
        Ok(Self {
            cfg: model.cfg.clone(),
            embed,
            output,
            alpha: p.get("embed.alpha")?.item(),
            b_same: p.get("attn.b_same")?.item(),
            b_cross: p.get("attn.b_cross")?.item(),
            blocks,
            fusion,
            final_norm: vec_of("final_norm")?,
            quantized: int8,
        })
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized
    }

    /// Bytes held by matrix weights.
    pub fn weight_bytes(&self) -> usize {
        let mut n = self.output.storage_bytes();
        for b in &self.blocks {
            n += [&b.wq, &b.wk, &b.wv, &b.wo, &b.w_in, &b.w_out].iter().map(|l| l.storage_bytes()).sum::<usize>();
        }
        n + self.fusion.values().map(|f| f.wq.storage_bytes() + f.wk.storage_bytes() + f.wv.storage_bytes()).sum::<usize>()
    }

    /// `T×V` logits for a packed context.
    pub fn logits(&self, ctx: &PackedContext) -> Result<Tensor> {
        let cfg = &self.cfg;
        ctx.validate(cfg.max_context)?;
        let t = ctx.len();
        let d = cfg.d_model;
        let mut rows = Vec::with_capacity(t * d);
        for &tok in &ctx.tokens {
            if tok >= cfg.vocab_size {
                bail!(Index, "token {tok} outside vocabulary of {}", cfg.vocab_size);
            }
            rows.extend_from_slice(self.embed.row(tok));
        }
        let scale = (d as f64).sqrt();
        rows.iter_mut().for_each(|v| *v *= scale);
        let pos = position_table(t, d)?;
        rows.iter_mut().zip(pos.data()).for_each(|(v, p)| *v += p);
        if cfg.temporal_enabled {
            let phase = phase_table(&ctx.temporal, d, cfg.temporal_period_days)?;
            rows.iter_mut().zip(phase.data()).for_each(|(v, p)| *v += p * self.alpha);
        }
        let mut x = Tensor::matrix(t, d, rows)?;
        let bias = if cfg.doc_mask_enabled {
            let same = same_doc_indicator(&ctx.doc_index);
            let mut m = same.clone();
            // same form as the recorded mask: b_same·S + b_cross·(1 − S)
            m.data_mut().iter_mut().for_each(|s| *s = *s * self.b_same + (1.0 - *s) * self.b_cross);
            Some(m)
        } else {
            None
        };
        let causal = causal_mask(t)?;
        for b in &self.blocks {
            let h = rms_norm(&x, &b.norm_attn, cfg.norm_eps);
            let q = b.wq.apply(&h)?;
            let k = b.wk.apply(&h)?;
            let v = b.wv.apply(&h)?;
            let mut cat = vec![0.0; t * d];
            for head in 0..cfg.n_heads {
                let s = head * cfg.d_head;
                let qh = cols(&q, s, cfg.d_head);
                let kh = cols(&k, s, cfg.d_head);
                let vh = cols(&v, s, cfg.d_head);
                let out = attention(&qh, &kh, &vh, t, t, cfg.d_head, bias.as_ref(), Some(&causal));
                for i in 0..t {
                    cat[i * d + s..i * d + s + cfg.d_head].copy_from_slice(&out[i * cfg.d_head..(i + 1) * cfg.d_head]);
                }
            }
            let proj = b.wo.apply(&Tensor::matrix(t, d, cat)?)?;
            add_in_place(&mut x, &proj);
            let h2 = rms_norm(&x, &b.norm_mlp, cfg.norm_eps);
            let mut up = b.w_in.apply(&h2)?;
            add_row(&mut up, &b.b_in);
            up.data_mut().iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let mut down = b.w_out.apply(&up)?;
            add_row(&mut down, &b.b_out);
            add_in_place(&mut x, &down);
        }
        if cfg.fusion_enabled {
            let fused = self.fuse(&x, &ctx.domains)?;
            add_in_place(&mut x, &fused);
        }
        let h = rms_norm(&x, &self.final_norm, cfg.norm_eps);
        self.output.apply(&h)
    }

    fn fuse(&self, x: &Tensor, tags: &[Domain]) -> Result<Tensor> {
        let (t, d) = x.dims2();
        let mut present: Vec<Domain> = tags.to_vec();
        present.sort();
        present.dedup();
        if present.len() == 1 {
            let g = self.fusion[&present[0]].gate;
            let mut out = x.clone();
            out.data_mut().iter_mut().for_each(|v| *v *= g);
            return Ok(out);
        }
        let mut total = vec![0.0; t * d];
        for dom in present {
            let f = &self.fusion[&dom];
            let own: Vec<usize> = (0..t).filter(|&i| tags[i] == dom).collect();
            let other: Vec<usize> = (0..t).filter(|&i| tags[i] != dom).collect();
            let q = f.wq.apply(&gather(x, &own))?;
            let kv_in = gather(x, &other);
            let k = f.wk.apply(&kv_in)?;
            let v = f.wv.apply(&kv_in)?;
            let mut bias = Tensor::zeros(&[own.len(), other.len()]);
            for (r, &qi) in own.iter().enumerate() {
                for (c, &kj) in other.iter().enumerate() {
                    if kj > qi {
                        bias.data_mut()[r * other.len() + c] = NEG_INF;
                    }
                }
            }
            let out = attention(q.data(), k.data(), v.data(), own.len(), other.len(), d, Some(&bias), None);
            for (r, &qi) in own.iter().enumerate() {
                if !other.iter().any(|&kj| kj <= qi) {
                    continue;
                }
                for c in 0..d {
                    total[qi * d + c] += out[r * d + c] * f.gate;
                }
            }
        }
        Tensor::matrix(t, d, total)
    }

    /// Summed next-token NLL and the number of scored positions.
    pub fn nll(&self, ctx: &PackedContext) -> Result<(f64, usize)> {
        let logits = self.logits(ctx)?;
        let mut total = 0.0;
        let mut n = 0;
        for (i, tgt) in ctx.targets.iter().enumerate() {
            if let Some(y) = *tgt {
                let row = logits.row(i);
                total += kernels::log_sum_exp(row) - row[y];
                n += 1;
            }
        }
        Ok((total, n))
    }
}

fn rms_norm(x: &Tensor, gain: &[f64], eps: f64) -> Tensor {
    let (m, n) = x.dims2();
    let mut out = x.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        row.iter_mut().zip(gain).for_each(|(v, g)| *v = (*v * inv) * g);
    }
    out
}

fn cols(x: &Tensor, start: usize, len: usize) -> Vec<f64> {
    let (m, n) = x.dims2();
    let mut out = Vec::with_capacity(m * len);
    for i in 0..m {
        out.extend_from_slice(&x.data()[i * n + start..i * n + start + len]);
    }
    out
}

fn gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let n = x.cols();
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), n, data).expect("non-empty gather")
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    x.data_mut().iter_mut().zip(y.data()).for_each(|(a, b)| *a += b);
}

fn add_row(x: &mut Tensor, row: &[f64]) {
    let n = row.len();
    for chunk in x.data_mut().chunks_mut(n) {
        chunk.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

/// `softmax(QKᵀ/√d_k + bias + mask)·V` on row-major slices.
#[allow(clippy::too_many_arguments)]
fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    d_k: usize,
    bias: Option<&Tensor>,
    mask: Option<&Tensor>,
) -> Vec<f64> {
    let kt = kernels::transpose(k, tk, d_k);
    let mut scores = vec![0.0; tq * tk];
    kernels::matmul(q, &kt, &mut scores, tq, d_k, tk);
    let c = 1.0 / (d_k as f64).sqrt();
    scores.iter_mut().for_each(|s| *s *= c);
    if let Some(b) = bias {
        scores.iter_mut().zip(b.data()).for_each(|(s, b)| *s += b);
    }
    if let Some(m) = mask {
        scores.iter_mut().zip(m.data()).for_each(|(s, b)| *s += b);
    }
    scores.chunks_mut(tk).for_each(kernels::softmax_in_place);
    let dv = v.len() / tk;
    let mut out = vec![0.0; tq * dv];
    kernels::matmul(&scores, v, &mut out, tq, tk, dv);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    /// Sampling from `softmax(logits / τ)`.
    Temperature(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub mode: DecodeMode,
    pub max_new: usize,
    pub seed: u64,
    /// Date and domain tags applied to every position.
    pub temporal_index: u32,
    pub domain: Domain,
    pub stop_at_eos: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, max_new: 16, seed: 0, temporal_index: 0, domain: Domain::Land, stop_at_eos: false }
    }
}

/// Appends up to `max_new` tokens to `prompt`; returns the whole sequence.
pub fn generate(model: &InferenceModel, prompt: &[usize], opts: &GenerateOptions) -> Result<Vec<usize>> {
    if opts.max_new == 0 {
        bail!(Input, "max_new must be at least 1");
    }
    if prompt.is_empty() {
        bail!(Input, "generation needs a non-empty prompt");
    }
    if let DecodeMode::Temperature(tau) = opts.mode {
        if !(tau > 0.0) {
            bail!(Input, "temperature must be positive, got {tau}");
        }
    }
    if prompt.len() + opts.max_new > model.cfg.max_context {
        bail!(
            Truncation,
            "prompt of {} plus {} new tokens exceeds context {}",
            prompt.len(),
            opts.max_new,
            model.cfg.max_context
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut seq = prompt.to_vec();
    for _ in 0..opts.max_new {
        let ctx = PackedContext::single(seq.clone(), opts.temporal_index, opts.domain);
        let logits = model.logits(&ctx)?;
        let last = logits.row(seq.len() - 1);
        let next = match opts.mode {
            DecodeMode::Greedy => argmax_lowest(last),
            DecodeMode::Temperature(tau) => {
                let mut probs: Vec<f64> = last.iter().map(|l| l / tau).collect();
                kernels::softmax_in_place(&mut probs);
                let dist = WeightedIndex::new(&probs).map_err(|e| crate::Error::Numeric(e.to_string()))?;
                dist.sample(&mut rng)
            }
        };
        seq.push(next);
        if opts.stop_at_eos && next == EOS {
            break;
        }
    }
    Ok(seq)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

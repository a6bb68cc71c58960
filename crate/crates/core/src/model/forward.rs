//! Differentiable forward pass and the composite training loss.

use super::{block_name, fusion_name, Model, PackedContext};
use crate::attention::{attend, cross_doc_mass_on_tape, doc_mask_on_tape, same_doc_indicator, sinusoidal_pe, temporal_phase, AttentionOutput};
use crate::corpus::Domain;
use crate::error::{bail, Result};
use crate::strategic::{doctrine_loss_on_tape, fuse_on_tape, pool_on_tape, CrossAttentionVars, FusionVars};
use crate::tensor::{Tape, Tensor, Var};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Tape handles for every parameter, keyed like the store.
pub type ParamVars = IndexMap<String, Var>;

/// Tape handles produced by one forward evaluation.
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: Var,
    /// Final normalised hidden states, `T×d_model`.
    pub hidden: Var,
    /// Pooled and projected output embedding, `1×d_doc`.
    pub pooled: Var,
    /// Attention weights per layer, then per head.
    pub weights: Vec<Vec<Var>>,
    /// Per-head attention outputs, indexed like `weights`.
    pub head_values: Vec<Vec<Var>>,
}

/// Concrete forward results.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub pooled_embedding: Vec<f64>,
    /// Per layer, per head.
    pub attention: Vec<Vec<AttentionOutput>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_clm: f64,
    pub l_doctrine: f64,
    pub l_temporal: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.l_clm += b.l_clm / n;
            out.l_doctrine += b.l_doctrine / n;
            out.l_temporal += b.l_temporal / n;
            out.total += b.total / n;
        }
        out
    }
}

/// Tape handles for the loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub clm: Var,
    pub doctrine: Var,
    pub temporal: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            l_clm: tape.scalar_value(self.clm),
            l_doctrine: tape.scalar_value(self.doctrine),
            l_temporal: tape.scalar_value(self.temporal),
            total: tape.scalar_value(self.total),
        }
    }
}

/// Places parameters on the tape: active ones as differentiable leaves when
/// `trainable`, everything else as constants.
pub fn param_vars(tape: &mut Tape, model: &Model, trainable: bool) -> ParamVars {
    model
        .params
        .iter()
        .map(|(name, t)| {
            let v = if trainable && model.is_active(name) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            (name.to_string(), v)
        })
        .collect()
}

fn pv(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name).copied().ok_or_else(|| crate::Error::Index(format!("no parameter named '{name}'")))
}

/// Sinusoidal position rows for `0..t`.
pub(crate) fn position_table(t: usize, d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        data.extend(sinusoidal_pe(pos, d)?);
    }
    Tensor::matrix(t, d, data)
}

/// `sin(2πt/T)` for each position, broadcast across the row.
pub(crate) fn phase_table(temporal: &[u32], d: usize, period: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(temporal.len() * d);
    for &t in temporal {
        let p = temporal_phase(t as f64, period);
        data.extend(std::iter::repeat(p).take(d));
    }
    Tensor::matrix(temporal.len(), d, data)
}

/// `1` where key `j` is dated strictly later than query `i`.
pub(crate) fn later_indicator(temporal: &[u32]) -> Option<Tensor> {
    let t = temporal.len();
    let mut m = Tensor::zeros(&[t, t]);
    let mut any = false;
    for i in 0..t {
        for j in 0..t {
            if temporal[j] > temporal[i] {
                m.data_mut()[i * t + j] = 1.0;
                any = true;
            }
        }
    }
    any.then_some(m)
}

fn fusion_vars(vars: &ParamVars) -> Result<FusionVars> {
    let mut domains = BTreeMap::new();
    for d in Domain::ALL {
        domains.insert(
            d,
            CrossAttentionVars {
                gate: pv(vars, &fusion_name(d, "gate"))?,
                wq: pv(vars, &fusion_name(d, "wq"))?,
                wk: pv(vars, &fusion_name(d, "wk"))?,
                wv: pv(vars, &fusion_name(d, "wv"))?,
            },
        );
    }
    Ok(FusionVars { domains })
}

/// Records the full forward pass for one packed context.
pub fn forward_on_tape(tape: &mut Tape, model: &Model, vars: &ParamVars, ctx: &PackedContext) -> Result<TapeForward> {
    let cfg = &model.cfg;
    ctx.validate(cfg.max_context)?;
    if let Some(&bad) = ctx.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        bail!(Index, "token {bad} outside vocabulary of {}", cfg.vocab_size);
    }
    let d = cfg.d_model;
    let table = pv(vars, "embed.tokens")?;
    let emb = tape.gather_rows(table, &ctx.tokens)?;
    let emb = tape.scale(emb, (d as f64).sqrt());
    let pos = tape.constant(position_table(ctx.len(), d)?);
    let mut x = tape.add(emb, pos)?;
    if cfg.temporal_enabled {
        let phase = tape.constant(phase_table(&ctx.temporal, d, cfg.temporal_period_days)?);
        let offset = tape.mul_scalar(phase, pv(vars, "embed.alpha")?)?;
        x = tape.add(x, offset)?;
    }
    let doc_bias = if cfg.doc_mask_enabled {
        let same = same_doc_indicator(&ctx.doc_index);
        Some(doc_mask_on_tape(tape, &same, pv(vars, "attn.b_same")?, pv(vars, "attn.b_cross")?)?)
    } else {
        None
    };
    let mut weights = Vec::with_capacity(cfg.n_layers);
    let mut head_values = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let h = tape.rms_norm(x, pv(vars, &block_name(l, "norm_attn"))?, cfg.norm_eps)?;
        let q = tape.matmul(h, pv(vars, &block_name(l, "wq"))?)?;
        let k = tape.matmul(h, pv(vars, &block_name(l, "wk"))?)?;
        let v = tape.matmul(h, pv(vars, &block_name(l, "wv"))?)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut layer_w = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let s = head * cfg.d_head;
            let qh = tape.cols(q, s, cfg.d_head)?;
            let kh = tape.cols(k, s, cfg.d_head)?;
            let vh = tape.cols(v, s, cfg.d_head)?;
            let a = attend(tape, qh, kh, vh, cfg.d_head, doc_bias, true)?;
            heads.push(a.values);
            layer_w.push(a.weights);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        head_values.push(heads);
        let proj = tape.matmul(cat, pv(vars, &block_name(l, "wo"))?)?;
        x = tape.add(x, proj)?;
        let h2 = tape.rms_norm(x, pv(vars, &block_name(l, "norm_mlp"))?, cfg.norm_eps)?;
        let up = tape.matmul(h2, pv(vars, &block_name(l, "w_in"))?)?;
        let up = tape.add_row(up, pv(vars, &block_name(l, "b_in"))?)?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, pv(vars, &block_name(l, "w_out"))?)?;
        let down = tape.add_row(down, pv(vars, &block_name(l, "b_out"))?)?;
        x = tape.add(x, down)?;
        weights.push(layer_w);
    }
    if cfg.fusion_enabled {
        let fv = fusion_vars(vars)?;
        let fused = fuse_on_tape(tape, x, &ctx.domains, &fv, true)?;
        x = tape.add(x, fused)?;
    }
    let hidden = tape.rms_norm(x, pv(vars, "final_norm")?, cfg.norm_eps)?;
    let et = tape.transpose(table);
    let logits = tape.matmul(hidden, et)?;
    let pooled = pool_on_tape(tape, hidden, pv(vars, "doctrine.proj")?)?;
    Ok(TapeForward { logits, hidden, pooled, weights, head_values })
}

/// Mean over layers, heads and queries of the attention mass placed on
/// strictly later-dated keys.
pub fn temporal_loss_on_tape(tape: &mut Tape, weights: &[Vec<Var>], temporal: &[u32]) -> Result<Var> {
    let n: usize = weights.iter().map(|l| l.len()).sum();
    let Some(later) = later_indicator(temporal) else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let later = tape.constant(later);
    let mut acc: Option<Var> = None;
    for &w in weights.iter().flatten() {
        let masked = tape.mul(w, later)?;
        let m = tape.row_sum(masked);
        let m = tape.mean(m);
        acc = Some(match acc {
            None => m,
            Some(a) => tape.add(a, m)?,
        });
    }
    Ok(tape.scale(acc.expect("n > 0"), 1.0 / n as f64))
}

/// Mean over layers, heads and queries of attention mass on other documents.
pub fn cross_mass_on_tape(tape: &mut Tape, weights: &[Vec<Var>], doc_index: &[usize]) -> Result<Var> {
    let same = same_doc_indicator(doc_index);
    let n: usize = weights.iter().map(|l| l.len()).sum();
    let mut acc: Option<Var> = None;
    for &w in weights.iter().flatten() {
        let col = cross_doc_mass_on_tape(tape, w, &same)?;
        let m = tape.mean(col);
        acc = Some(match acc {
            None => m,
            Some(a) => tape.add(a, m)?,
        });
    }
    match acc {
        Some(a) => Ok(tape.scale(a, 1.0 / n as f64)),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

/// Records `l_clm + lambda_doc·l_doctrine + lambda_temp·l_temporal`.
pub fn loss_on_tape(tape: &mut Tape, model: &Model, fwd: &TapeForward, ctx: &PackedContext) -> Result<LossVars> {
    let clm = tape.masked_cross_entropy(fwd.logits, &ctx.targets)?;
    let doctrine = match &model.doctrine {
        Some(set) => doctrine_loss_on_tape(tape, fwd.pooled, set, 1.0)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let temporal = temporal_loss_on_tape(tape, &fwd.weights, &ctx.temporal)?;
    let wd = tape.scale(doctrine, model.cfg.lambda_doc);
    let wt = tape.scale(temporal, model.cfg.lambda_temp);
    let partial = tape.add(clm, wd)?;
    let total = tape.add(partial, wt)?;
    Ok(LossVars { clm, doctrine, temporal, total })
}

/// Forward pass on concrete values.
pub fn forward(model: &Model, ctx: &PackedContext) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let vars = param_vars(&mut tape, model, false);
    let fwd = forward_on_tape(&mut tape, model, &vars, ctx)?;
    let logits = tape.value(fwd.logits).clone();
    if !logits.is_finite() {
        bail!(Numeric, "non-finite logits");
    }
    let same = same_doc_indicator(&ctx.doc_index);
    let attention = fwd
        .weights
        .iter()
        .zip(&fwd.head_values)
        .map(|(layer, values)| {
            layer
                .iter()
                .zip(values)
                .map(|(&w, &v)| {
                    let weights = tape.value(w).clone();
                    let t = weights.rows();
                    let cross_doc_mass = (0..t)
                        .map(|i| (0..t).filter(|&j| same.get(i, j) == 0.0).map(|j| weights.get(i, j)).sum())
                        .collect();
                    AttentionOutput { values: tape.value(v).clone(), weights, cross_doc_mass }
                })
                .collect()
        })
        .collect();
    Ok(ForwardOutput { logits, pooled_embedding: tape.value(fwd.pooled).data().to_vec(), attention })
}

/// Anachronism mass from concrete attention weights.
pub fn temporal_coherence_loss(weights: &[Tensor], temporal: &[u32]) -> Result<f64> {
    let t = temporal.len();
    if weights.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for w in weights {
        if w.dims2() != (t, t) {
            bail!(Dimension, "attention weights {:?} for {t} positions", w.shape());
        }
        let mut s = 0.0;
        for i in 0..t {
            for j in 0..t {
                if temporal[j] > temporal[i] {
                    s += w.get(i, j);
                }
            }
        }
        total += s / t as f64;
    }
    Ok(total / weights.len() as f64)
}

/// Loss breakdown for one packed context.
pub fn total_loss(model: &Model, ctx: &PackedContext) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = param_vars(&mut tape, model, false);
    let fwd = forward_on_tape(&mut tape, model, &vars, ctx)?;
    Ok(loss_on_tape(&mut tape, model, &fwd, ctx)?.breakdown(&tape))
}

/// Gradients of every parameter after `backward`; inactive ones are zero.
pub fn collect_grads(tape: &Tape, model: &Model, vars: &ParamVars) -> IndexMap<String, Vec<f64>> {
    model
        .params
        .iter()
        .map(|(name, t)| {
            let g = vars.get(name).and_then(|&v| tape.grad(v)).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            (name.to_string(), g)
        })
        .collect()
}

/// Loss breakdown and parameter gradients for one context.
pub fn loss_and_grads(model: &Model, ctx: &PackedContext) -> Result<(LossBreakdown, IndexMap<String, Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = param_vars(&mut tape, model, true);
    let fwd = forward_on_tape(&mut tape, model, &vars, ctx)?;
    let loss = loss_on_tape(&mut tape, model, &fwd, ctx)?;
    tape.backward(loss.total)?;
    Ok((loss.breakdown(&tape), collect_grads(&tape, model, &vars)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn ctx(tokens: Vec<usize>, docs: Vec<usize>, dates: Vec<u32>) -> PackedContext {
        let t = tokens.len();
        let mut targets: Vec<Option<usize>> = tokens.iter().skip(1).map(|&x| Some(x)).collect();
        targets.push(None);
        PackedContext { tokens, doc_index: docs, temporal: dates, domains: vec![Domain::Land; t], targets }
    }

    #[test]
    fn single_token_shape() {
        let m = Model::init(ModelConfig::tiny(11)).unwrap();
        let out = forward(&m, &ctx(vec![3], vec![0], vec![0])).unwrap();
        assert_eq!(out.logits.shape(), &[1, 11]);
    }

    #[test]
    fn later_tokens_do_not_leak_backwards() {
        let m = Model::init(ModelConfig::tiny(11)).unwrap();
        let a = ctx(vec![3, 4, 5, 6, 7], vec![0, 0, 1, 1, 1], vec![5, 5, 9, 9, 9]);
        let mut b = a.clone();
        b.tokens[3] = 9;
        let la = forward(&m, &a).unwrap().logits;
        let lb = forward(&m, &b).unwrap().logits;
        for i in 0..3 {
            assert_eq!(la.row(i), lb.row(i));
        }
        assert_ne!(la.row(3), lb.row(3));
    }

    #[test]
    fn deterministic_logits() {
        let m = Model::init(ModelConfig::tiny(11)).unwrap();
        let c = ctx(vec![1, 2, 3], vec![0, 0, 0], vec![1, 1, 1]);
        assert_eq!(forward(&m, &c).unwrap().logits, forward(&m, &c).unwrap().logits);
    }

    #[test]
    fn overlong_context_rejected() {
        let m = Model::init(ModelConfig::tiny(11)).unwrap();
        let c = ctx(vec![1; 17], vec![0; 17], vec![0; 17]);
        assert!(matches!(forward(&m, &c), Err(crate::Error::Input(_))));
    }

    #[test]
    fn anachronism_zero_cases_and_hand_count() {
        let w = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(temporal_coherence_loss(&[w.clone()], &[3, 3]).unwrap(), 0.0);
        // 4 tokens: doc A (t=10) at 0,1 and doc B (t=20) at 2,3, uniform causal weights.
        let rows = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![1.0 / 3.0; 3].into_iter().chain([0.0]).collect(),
            vec![0.25; 4],
        ];
        let w = Tensor::from_rows(&rows).unwrap();
        // later-dated keys exist only for queries 0 and 1, and they carry no causal weight
        assert_eq!(temporal_coherence_loss(&[w.clone()], &[10, 10, 20, 20]).unwrap(), 0.0);
        // reversed dates: queries 2 and 3 see earlier-positioned, later-dated keys
        let l = temporal_coherence_loss(&[w], &[20, 20, 10, 10]).unwrap();
        assert!((l - (2.0 / 3.0 + 0.5) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn breakdown_is_additive_and_reduces() {
        let m = Model::init(ModelConfig::tiny(11)).unwrap();
        let c = ctx(vec![3, 4, 5, 6, 7, 8], vec![0, 0, 0, 1, 1, 1], vec![90, 90, 90, 10, 10, 10]);
        let b = total_loss(&m, &c).unwrap();
        assert_eq!(b.total, b.l_clm + 0.15 * b.l_doctrine + 0.08 * b.l_temporal);
        assert!(b.l_temporal > 0.0);
        let m0 = Model { cfg: ModelConfig { lambda_doc: 0.0, lambda_temp: 0.0, ..m.cfg.clone() }, ..m };
        let b0 = total_loss(&m0, &c).unwrap();
        assert_eq!(b0.total, b0.l_clm);
    }
}

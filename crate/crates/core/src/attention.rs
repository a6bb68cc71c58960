//! Position encodings and document-aware scaled dot-product attention.
//!
//! Attention scores are `QKᵀ/√d_k + M_doc` (plus a causal mask), where
//! `M_doc[i, j]` is one of two learned scalars depending on whether query
//! `i` and key `j` come from the same source document.

use crate::error::{bail, Result};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Finite stand-in for `−∞` in additive masks.
pub const NEG_INF: f64 = -1e9;

/// Default temporal period: 7300 days, i.e. twenty years.
pub const DEFAULT_PERIOD_DAYS: f64 = 7300.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalPeConfig {
    pub d_model: usize,
    pub period_days: f64,
    /// Learned scale of the temporal offset.
    pub alpha: f64,
}

impl TemporalPeConfig {
    pub fn new(d_model: usize) -> Self {
        Self { d_model, period_days: DEFAULT_PERIOD_DAYS, alpha: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            bail!(Config, "d_model must be even and positive, got {}", self.d_model);
        }
        if !(self.period_days > 0.0) {
            bail!(Config, "temporal period must be positive, got {}", self.period_days);
        }
        Ok(())
    }
}

/// Interleaved sin/cos encoding with geometric frequencies (base 10000).
pub fn sinusoidal_pe(pos: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || d_model % 2 != 0 {
        bail!(Config, "sinusoidal encoding needs an even width, got {d_model}");
    }
    let mut out = vec![0.0; d_model];
    for i in 0..d_model / 2 {
        let angle = pos as f64 / pair_wavelength_base(i, d_model);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// `10000^(2i/d)`; pair `i` has period `2π` times this.
pub fn pair_wavelength_base(i: usize, d_model: usize) -> f64 {
    10000f64.powf(2.0 * i as f64 / d_model as f64)
}

/// The scalar `sin(2πt/T)` that `alpha` multiplies.
pub fn temporal_phase(t_days: f64, period_days: f64) -> f64 {
    (2.0 * std::f64::consts::PI * t_days / period_days).sin()
}

/// Sinusoidal encoding plus `alpha·sin(2πt/T)` on every coordinate.
pub fn temporal_pe(pos: usize, t_days: f64, cfg: &TemporalPeConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if t_days < 0.0 {
        bail!(Input, "temporal index must be non-negative, got {t_days}");
    }
    let mut pe = sinusoidal_pe(pos, cfg.d_model)?;
    let offset = cfg.alpha * temporal_phase(t_days, cfg.period_days);
    pe.iter_mut().for_each(|x| *x += offset);
    Ok(pe)
}

/// Same-document and cross-document additive biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocMaskParams {
    pub b_same: f64,
    pub b_cross: f64,
}

impl Default for DocMaskParams {
    fn default() -> Self {
        Self { b_same: 0.0, b_cross: 0.0 }
    }
}

/// `1.0` where query and key share a document, else `0.0`.
pub fn same_doc_indicator(doc_ids: &[usize]) -> Tensor {
    let t = doc_ids.len();
    let mut m = Tensor::zeros(&[t.max(1), t.max(1)]);
    for i in 0..t {
        for j in 0..t {
            if doc_ids[i] == doc_ids[j] {
                m.data_mut()[i * t + j] = 1.0;
            }
        }
    }
    m
}

pub fn build_doc_mask(doc_ids: &[usize], params: DocMaskParams) -> Tensor {
    let mut m = same_doc_indicator(doc_ids);
    m.data_mut()
        .iter_mut()
        .for_each(|x| *x = if *x == 1.0 { params.b_same } else { params.b_cross });
    m
}

/// Additive mask with [`NEG_INF`] strictly above the diagonal.
pub fn causal_mask(t: usize) -> Result<Tensor> {
    if t == 0 {
        bail!(Input, "causal mask needs at least one position");
    }
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = NEG_INF;
        }
    }
    Ok(m)
}

/// Result of one attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub values: Tensor,
    pub weights: Tensor,
    /// Per query: total weight on keys from other documents.
    pub cross_doc_mass: Vec<f64>,
}

/// Tape handles for one recorded attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub values: Var,
    pub weights: Var,
}

/// Records `softmax(QKᵀ/√d_k + bias [+ causal])·V` on a tape.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    d_k: usize,
    bias: Option<Var>,
    causal: bool,
) -> Result<AttentionVars> {
    let (tq, wq) = tape.value(q).dims2();
    let (tk, wk) = tape.value(k).dims2();
    let tv = tape.value(v).rows();
    if wq != wk || tk != tv {
        bail!(Dimension, "attention shapes: Q {tq}x{wq}, K {tk}x{wk}, V rows {tv}");
    }
    if d_k != wk || d_k == 0 {
        bail!(Dimension, "d_k = {d_k} but keys have width {wk}");
    }
    let kt = tape.transpose(k);
    let raw = tape.matmul(q, kt)?;
    let mut scores = tape.scale(raw, 1.0 / (d_k as f64).sqrt());
    if let Some(b) = bias {
        if tape.value(b).dims2() != (tq, tk) {
            bail!(Dimension, "bias shape {:?} for {tq}x{tk} scores", tape.value(b).shape());
        }
        scores = tape.add(scores, b)?;
    }
    if causal {
        if tq != tk {
            bail!(Dimension, "causal attention needs square scores, got {tq}x{tk}");
        }
        let cm = tape.constant(causal_mask(tq)?);
        scores = tape.add(scores, cm)?;
    }
    let weights = tape.softmax_rows(scores)?;
    let values = tape.matmul(weights, v)?;
    Ok(AttentionVars { values, weights })
}

/// Records `M_doc = b_same·S + b_cross·(1 − S)` for a constant same-document indicator `S`.
pub fn doc_mask_on_tape(tape: &mut Tape, same: &Tensor, b_same: Var, b_cross: Var) -> Result<Var> {
    let mut cross = same.clone();
    cross.data_mut().iter_mut().for_each(|x| *x = 1.0 - *x);
    let s = tape.constant(same.clone());
    let c = tape.constant(cross);
    let a = tape.mul_scalar(s, b_same)?;
    let b = tape.mul_scalar(c, b_cross)?;
    tape.add(a, b)
}

/// Per-query cross-document attention mass as an `m×1` column.
pub fn cross_doc_mass_on_tape(tape: &mut Tape, weights: Var, same: &Tensor) -> Result<Var> {
    let mut cross = same.clone();
    cross.data_mut().iter_mut().for_each(|x| *x = 1.0 - *x);
    let c = tape.constant(cross);
    let masked = tape.mul(weights, c)?;
    Ok(tape.row_sum(masked))
}

/// Document-aware attention evaluated on concrete tensors.
///
/// `doc_ids` gives the document of each position (queries and keys share
/// one sequence) and is used only to report `cross_doc_mass`.
pub fn multi_doc_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    d_k: usize,
    m_doc: &Tensor,
    doc_ids: &[usize],
    causal: bool,
) -> Result<AttentionOutput> {
    let (tq, tk) = (q.rows(), k.rows());
    if doc_ids.len() != tk || tq != tk {
        bail!(Dimension, "doc_ids length {} for {tq} queries and {tk} keys", doc_ids.len());
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let bias = tape.constant(m_doc.clone());
    let out = attend(&mut tape, qv, kv, vv, d_k, Some(bias), causal)?;
    let same = same_doc_indicator(doc_ids);
    let mass = cross_doc_mass_on_tape(&mut tape, out.weights, &same)?;
    Ok(AttentionOutput {
        values: tape.value(out.values).clone(),
        weights: tape.value(out.weights).clone(),
        cross_doc_mass: tape.value(mass).data().to_vec(),
    })
}

/// `−ln σ(mean_multi − mean_single)` over per-example cross-document masses.
pub fn cross_doc_contrastive_loss_on_tape(tape: &mut Tape, masses: &[Var], is_multi_doc: &[bool]) -> Result<Var> {
    if masses.len() != is_multi_doc.len() {
        bail!(Dimension, "{} masses for {} labels", masses.len(), is_multi_doc.len());
    }
    let multi: Vec<Var> = masses.iter().zip(is_multi_doc).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    let single: Vec<Var> = masses.iter().zip(is_multi_doc).filter(|(_, &m)| !m).map(|(&v, _)| v).collect();
    if multi.is_empty() || single.is_empty() {
        bail!(Input, "contrastive batch needs both multi-document and single-document examples");
    }
    let mean_of = |tape: &mut Tape, vs: &[Var]| -> Result<Var> {
        let mut acc = vs[0];
        for &v in &vs[1..] {
            acc = tape.add(acc, v)?;
        }
        Ok(tape.scale(acc, 1.0 / vs.len() as f64))
    };
    let m = mean_of(tape, &multi)?;
    let s = mean_of(tape, &single)?;
    let gap = tape.sub(m, s)?;
    let neg = tape.scale(gap, -1.0);
    Ok(tape.softplus(neg))
}

/// Contrastive loss over concrete attention outputs; each example's mass
/// is the mean of its per-query cross-document masses.
pub fn cross_doc_contrastive_loss(outputs: &[AttentionOutput], is_multi_doc: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let masses: Vec<Var> = outputs
        .iter()
        .map(|o| {
            let n = o.cross_doc_mass.len().max(1) as f64;
            tape.constant(Tensor::scalar(o.cross_doc_mass.iter().sum::<f64>() / n))
        })
        .collect();
    let l = cross_doc_contrastive_loss_on_tape(&mut tape, &masses, is_multi_doc)?;
    Ok(tape.scalar_value(l))
}

//! Elastic weight consolidation: diagonal Fisher estimates and the
//! quadratic anchor penalty.

use super::optim::Grads;
use crate::error::{bail, Result};
use crate::model::{collect_grads, forward_on_tape, param_vars, Model, PackedContext, ParamStore};
use crate::tensor::Tape;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EwcConfig {
    pub ewc_lambda: f64,
    /// Number of contexts used to estimate the Fisher diagonal.
    pub fisher_samples: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self { ewc_lambda: 10.0, fisher_samples: 256 }
    }
}

impl EwcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ewc_lambda >= 0.0) || self.fisher_samples == 0 {
            bail!(Config, "ewc_lambda must be non-negative and fisher_samples positive");
        }
        Ok(())
    }
}

/// Anchor parameters, their Fisher weights, and the penalty strength.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    pub anchor: Grads,
    pub fisher: Grads,
    pub ewc_lambda: f64,
}

impl EwcState {
    /// Anchors at the current parameters.
    pub fn new(params: &ParamStore, fisher: Grads, ewc_lambda: f64) -> Result<Self> {
        let anchor: Grads = params.iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect();
        for (name, f) in &fisher {
            let Some(a) = anchor.get(name) else { bail!(Dimension, "Fisher entry '{name}' has no parameter") };
            if a.len() != f.len() {
                bail!(Dimension, "Fisher entry '{name}' has {} values for {} parameters", f.len(), a.len());
            }
            if f.iter().any(|x| !(*x >= 0.0)) {
                bail!(Numeric, "Fisher entries must be non-negative");
            }
        }
        Ok(Self { anchor, fisher, ewc_lambda })
    }
}

/// Elementwise mean of squared per-sample gradients.
pub fn fisher_from_sample_grads(samples: &[Grads]) -> Result<Grads> {
    let Some(first) = samples.first() else { bail!(Input, "Fisher estimate needs at least one sample") };
    let n = samples.len() as f64;
    let mut out: Grads = first.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect();
    for s in samples {
        for (name, acc) in out.iter_mut() {
            let g = s.get(name).ok_or_else(|| crate::Error::Dimension(format!("sample lacks '{name}'")))?;
            acc.iter_mut().zip(g).for_each(|(a, x)| *a += x * x / n);
        }
    }
    Ok(out)
}

/// Diagonal Fisher from the next-token log-likelihood gradient of each context.
pub fn fisher_diag(model: &Model, data: &[PackedContext]) -> Result<Grads> {
    if data.is_empty() {
        bail!(Input, "Fisher estimate needs data");
    }
    let samples: Vec<Grads> = data
        .par_iter()
        .map(|ctx| {
            let mut tape = Tape::new();
            let vars = param_vars(&mut tape, model, true);
            let fwd = forward_on_tape(&mut tape, model, &vars, ctx)?;
            let nll = tape.masked_cross_entropy(fwd.logits, &ctx.targets)?;
            tape.backward(nll)?;
            Ok(collect_grads(&tape, model, &vars))
        })
        .collect::<Result<Vec<_>>>()?;
    fisher_from_sample_grads(&samples)
}

fn check_shapes(params: &ParamStore, state: &EwcState) -> Result<()> {
    for (name, a) in &state.anchor {
        let p = params.get(name)?;
        if p.len() != a.len() {
            bail!(Dimension, "parameter '{name}' has {} values, anchor has {}", p.len(), a.len());
        }
    }
    Ok(())
}

/// `Σ_i (λ/2)·F_i·(θ_i − θ*_i)²`.
pub fn ewc_penalty(params: &ParamStore, state: &EwcState) -> Result<f64> {
    check_shapes(params, state)?;
    let mut total = 0.0;
    for (name, f) in &state.fisher {
        let a = &state.anchor[name];
        for ((x, a), f) in params.get(name)?.data().iter().zip(a).zip(f) {
            total += 0.5 * state.ewc_lambda * f * (x - a) * (x - a);
        }
    }
    Ok(total)
}

/// Gradient of [`ewc_penalty`]: `λ·F_i·(θ_i − θ*_i)`.
pub fn ewc_gradient(params: &ParamStore, state: &EwcState) -> Result<Grads> {
    check_shapes(params, state)?;
    let mut out = Grads::new();
    for (name, f) in &state.fisher {
        let a = &state.anchor[name];
        let g = params.get(name)?.data().iter().zip(a).zip(f).map(|((x, a), f)| state.ewc_lambda * f * (x - a)).collect();
        out.insert(name.clone(), g);
    }
    Ok(out)
}

//! Optimisation, pretraining on the composite loss, KL-regularised
//! fine-tuning, pairwise reward modelling and EWC continual updates.
//!
//! Every loop evaluates the contexts of a batch in parallel and reduces the
//! per-context gradients in batch order, so results do not depend on the
//! number of worker threads.

mod align;
mod ewc;
mod optim;

pub use align::{
    kl_divergence_rows, kl_on_tape, planted_preference_fixture, reward_accuracy, reward_pref_loss, train_reward_model,
    PreferenceFixture, PreferencePair, RewardModel, RewardTrainConfig, SftConfig, Side,
};
pub use ewc::{ewc_gradient, ewc_penalty, fisher_diag, EwcConfig, EwcState};
pub use optim::{
    adamw_update, clip_grad_norm, decays, global_norm, lr_schedule, optimizer_step, AdamState, Grads, OptimizerConfig,
};

use crate::corpus::DocumentSegment;
use crate::error::{bail, Result};
use crate::model::{
    collect_grads, cross_mass_on_tape, forward_on_tape, loss_on_tape, param_vars, InferenceModel, LossBreakdown, Model,
    ModelConfig, PackedContext,
};
use crate::tensor::{kernels, Tape};
use crate::tokenizer::Vocabulary;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Tokens per packed training context.
    pub window: usize,
    /// Weight of the cross-document contrastive term during pretraining.
    pub contrastive_weight: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub sft: SftConfig,
    pub ewc: EwcConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            window: 128,
            contrastive_weight: 0.1,
            seed: 0,
            checkpoint_every: 0,
            sft: SftConfig::default(),
            ewc: EwcConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Short-horizon settings for desk-scale runs: same optimiser family and
    /// clipping, with a shorter warmup and a larger peak rate.
    pub fn toy(total_steps: usize) -> Self {
        let mut c = Self::default();
        c.optimizer.total_steps = total_steps;
        c.optimizer.warmup_steps = (total_steps / 20).max(1);
        c.optimizer.peak_lr = 3e-3;
        c.optimizer.floor_lr = 3e-4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.window == 0 {
            bail!(Config, "batch_size and window must be positive");
        }
        if !(self.contrastive_weight >= 0.0) {
            bail!(Config, "contrastive_weight must be non-negative");
        }
        self.sft.validate()?;
        self.ewc.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub l_clm: f64,
    pub l_doctrine: f64,
    pub l_temporal: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Objective-specific extra term: contrastive loss, KL, or EWC penalty.
    #[serde(skip)]
    pub aux: f64,
}

/// Writes the step log as CSV with a provenance comment line.
pub fn write_metrics_csv(path: &Path, comment: Option<&str>, rows: &[StepMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(c) = comment {
        writeln!(f, "{c}")?;
    }
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r).map_err(|e| crate::Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// What a training loop differentiates.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    /// Composite loss plus an optional cross-document contrastive term.
    Pretrain { contrastive_weight: f64 },
    /// Cross-entropy plus `kl_weight · KL(current ‖ reference)`.
    Sft { reference: &'a InferenceModel, kl_weight: f64 },
}

struct ContextOutcome {
    breakdown: LossBreakdown,
    aux: f64,
    grads: Grads,
    /// Cross-document mass and its gradient, for multi-document contexts.
    mass: Option<(f64, Grads)>,
}

fn context_outcome(model: &Model, ctx: &PackedContext, objective: Objective<'_>) -> Result<ContextOutcome> {
    let mut tape = Tape::new();
    let vars = param_vars(&mut tape, model, true);
    let fwd = forward_on_tape(&mut tape, model, &vars, ctx)?;
    match objective {
        Objective::Pretrain { contrastive_weight } => {
            let loss = loss_on_tape(&mut tape, model, &fwd, ctx)?;
            let mass = if contrastive_weight > 0.0 && ctx.n_docs() > 1 {
                Some(cross_mass_on_tape(&mut tape, &fwd.weights, &ctx.doc_index)?)
            } else {
                None
            };
            tape.backward(loss.total)?;
            let grads = collect_grads(&tape, model, &vars);
            let mass = match mass {
                Some(m) => {
                    tape.backward(m)?;
                    Some((tape.scalar_value(m), collect_grads(&tape, model, &vars)))
                }
                None => None,
            };
            Ok(ContextOutcome { breakdown: loss.breakdown(&tape), aux: 0.0, grads, mass })
        }
        Objective::Sft { reference, kl_weight } => {
            if reference.cfg.vocab_size != model.cfg.vocab_size {
                bail!(Config, "reference vocabulary {} differs from {}", reference.cfg.vocab_size, model.cfg.vocab_size);
            }
            let ref_logits = reference.logits(ctx)?;
            let ce = tape.masked_cross_entropy(fwd.logits, &ctx.targets)?;
            let kl = kl_on_tape(&mut tape, fwd.logits, &ref_logits, &ctx.targets)?;
            let wk = tape.scale(kl, kl_weight);
            let total = tape.add(ce, wk)?;
            tape.backward(total)?;
            let breakdown = LossBreakdown {
                l_clm: tape.scalar_value(ce),
                l_doctrine: 0.0,
                l_temporal: 0.0,
                total: tape.scalar_value(total),
            };
            Ok(ContextOutcome { breakdown, aux: tape.scalar_value(kl), grads: collect_grads(&tape, model, &vars), mass: None })
        }
    }
}

fn add_scaled(acc: &mut Grads, g: &Grads, c: f64) {
    for (name, buf) in acc.iter_mut() {
        if let Some(src) = g.get(name) {
            buf.iter_mut().zip(src).for_each(|(a, b)| *a += c * b);
        }
    }
}

fn zero_grads(model: &Model) -> Grads {
    model.params.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.len()])).collect()
}

/// Mean loss and gradient of a batch under `objective`, reduced in batch order.
pub fn batch_gradient(model: &Model, batch: &[&PackedContext], objective: Objective<'_>) -> Result<(LossBreakdown, f64, Grads)> {
    let outcomes: Vec<ContextOutcome> =
        batch.par_iter().map(|ctx| context_outcome(model, ctx, objective)).collect::<Result<Vec<_>>>()?;
    let n = outcomes.len() as f64;
    let mut grads = zero_grads(model);
    let mut parts = Vec::with_capacity(outcomes.len());
    let mut aux = 0.0;
    for o in &outcomes {
        add_scaled(&mut grads, &o.grads, 1.0 / n);
        parts.push(o.breakdown);
        aux += o.aux / n;
    }
    if let Objective::Pretrain { contrastive_weight } = objective {
        let multi: Vec<&(f64, Grads)> = outcomes.iter().filter_map(|o| o.mass.as_ref()).collect();
        let n_single = outcomes.len() - multi.len();
        if contrastive_weight > 0.0 && !multi.is_empty() && n_single > 0 {
            // single-document contexts have no cross-document keys, so their mass is 0
            let mean_multi = multi.iter().map(|(m, _)| m).sum::<f64>() / multi.len() as f64;
            let gap = mean_multi;
            let loss = kernels::softplus(-gap);
            let dgap = -kernels::sigmoid(-gap);
            for (_, g) in &multi {
                add_scaled(&mut grads, g, contrastive_weight * dgap / multi.len() as f64);
            }
            aux = loss;
        }
    }
    Ok((LossBreakdown::mean(&parts), aux, grads))
}

/// Runs `cfg.optimizer.total_steps` updates over `data`, sampling batches
/// from seeded epoch shuffles. `on_step` sees every logged row and the
/// updated model.
pub fn train(
    model: &mut Model,
    data: &[PackedContext],
    cfg: &TrainConfig,
    objective: Objective<'_>,
    ewc: Option<&EwcState>,
    mut on_step: impl FnMut(&StepMetrics, &Model) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        bail!(Input, "training data is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut state = AdamState::default();
    let mut log = Vec::with_capacity(cfg.optimizer.total_steps);
    for step in 1..=cfg.optimizer.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&data[order.pop().expect("refilled")]);
        }
        let (breakdown, mut aux, mut grads) = batch_gradient(model, &batch, objective)?;
        if let Some(e) = ewc {
            let pen = ewc_penalty(&model.params, e)?;
            add_scaled(&mut grads, &ewc_gradient(&model.params, e)?, 1.0);
            aux = pen;
        }
        if !breakdown.total.is_finite() || !aux.is_finite() {
            return Err(crate::Error::Divergence { step, detail: format!("loss {:?}", breakdown) });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.optimizer.clip_norm)?;
        if !grad_norm.is_finite() {
            return Err(crate::Error::Divergence { step, detail: "non-finite gradient norm".into() });
        }
        let lr = optimizer_step(&mut model.params, &grads, &mut state, &cfg.optimizer, step)?;
        let row = StepMetrics {
            step,
            lr,
            l_clm: breakdown.l_clm,
            l_doctrine: breakdown.l_doctrine,
            l_temporal: breakdown.l_temporal,
            total: breakdown.total,
            grad_norm,
            aux,
        };
        on_step(&row, model)?;
        log.push(row);
    }
    Ok(log)
}

/// Initialises a model, freezes doctrine embeddings from `principles`, and
/// pretrains it on windows of the segment stream.
pub fn pretrain(
    segments: &[DocumentSegment],
    vocab: &Vocabulary,
    principles: &[(String, String)],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepMetrics, &Model) -> Result<()>,
) -> Result<(Model, Vec<StepMetrics>)> {
    if segments.is_empty() {
        bail!(Input, "pretraining corpus is empty");
    }
    if model_cfg.vocab_size < vocab.len() {
        bail!(Config, "model vocabulary {} smaller than tokenizer vocabulary {}", model_cfg.vocab_size, vocab.len());
    }
    let mut model = Model::init(model_cfg)?;
    if model.cfg.lambda_doc > 0.0 && !principles.is_empty() {
        model.attach_doctrine(principles, vocab)?;
    }
    let data = PackedContext::pack_stream(segments, cfg.window.min(model.cfg.max_context))?;
    let log = train(
        &mut model,
        &data,
        cfg,
        Objective::Pretrain { contrastive_weight: cfg.contrastive_weight },
        None,
        on_step,
    )?;
    Ok((model, log))
}

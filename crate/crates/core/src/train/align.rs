//! KL-regularised fine-tuning pieces and a pairwise (Bradley–Terry) reward model.

use super::optim::{clip_grad_norm, optimizer_step, AdamState, Grads, OptimizerConfig};
use crate::corpus::Domain;
use crate::error::{bail, Result};
use crate::model::{collect_grads, forward_on_tape, param_vars, Model, ModelConfig, PackedContext};
use crate::tensor::{kernels, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub kl_weight: f64,
    /// Path of the reference checkpoint, when loaded from disk.
    pub reference: Option<String>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { kl_weight: 0.02, reference: None }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_weight >= 0.0) {
            bail!(Config, "kl_weight must be non-negative");
        }
        Ok(())
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = kernels::log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}

/// Mean over scored rows of `KL(softmax(current) ‖ softmax(reference))`.
pub fn kl_divergence_rows(current: &Tensor, reference: &Tensor, scored: &[bool]) -> Result<f64> {
    if current.dims2() != reference.dims2() || scored.len() != current.rows() {
        bail!(Dimension, "KL inputs {:?} vs {:?} with {} flags", current.shape(), reference.shape(), scored.len());
    }
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..current.rows() {
        if !scored[i] {
            continue;
        }
        let lp = log_softmax(current.row(i));
        let lq = log_softmax(reference.row(i));
        total += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
        n += 1;
    }
    if n == 0 {
        bail!(Input, "no scored positions for KL");
    }
    Ok(total / n as f64)
}

/// Records the KL of the current next-token distribution from constant
/// reference logits, averaged over positions with a target.
pub fn kl_on_tape(tape: &mut Tape, logits: Var, reference: &Tensor, targets: &[Option<usize>]) -> Result<Var> {
    let (t, v) = tape.value(logits).dims2();
    if reference.dims2() != (t, v) || targets.len() != t {
        bail!(Dimension, "reference logits {:?} for current {t}x{v}", reference.shape());
    }
    let count = targets.iter().filter(|x| x.is_some()).count();
    if count == 0 {
        bail!(Input, "no scored positions for KL");
    }
    let mut lq = Vec::with_capacity(t * v);
    for i in 0..t {
        lq.extend(log_softmax(reference.row(i)));
    }
    let lq = tape.constant(Tensor::matrix(t, v, lq)?);
    let lp = tape.log_softmax_rows(logits)?;
    let p = tape.softmax_rows(logits)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let rows = tape.row_sum(terms);
    let weights: Vec<f64> = targets.iter().map(|x| if x.is_some() { 1.0 / count as f64 } else { 0.0 }).collect();
    let w = tape.constant(Tensor::matrix(t, 1, weights)?);
    let weighted = tape.mul(rows, w)?;
    Ok(tape.sum(weighted))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub completion_a: Vec<usize>,
    pub completion_b: Vec<usize>,
    pub chosen: Side,
}

impl PreferencePair {
    /// Full chosen and rejected sequences (prompt followed by completion).
    pub fn sequences(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        if self.completion_a.is_empty() || self.completion_b.is_empty() {
            bail!(Input, "preference completions must be non-empty");
        }
        let join = |c: &[usize]| self.prompt.iter().chain(c).copied().collect::<Vec<_>>();
        let (a, b) = (join(&self.completion_a), join(&self.completion_b));
        Ok(match self.chosen {
            Side::A => (a, b),
            Side::B => (b, a),
        })
    }
}

/// `−ln σ(chosen − rejected)`.
pub fn reward_pref_loss(score_chosen: f64, score_rejected: f64) -> f64 {
    kernels::softplus(-(score_chosen - score_rejected))
}

/// Fraction of pairs where the chosen sequence scores higher; ties count 1/2.
pub fn reward_accuracy<F>(scorer: F, pairs: &[PreferencePair]) -> Result<f64>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if pairs.is_empty() {
        bail!(Input, "no held-out pairs");
    }
    let mut hits = 0.0;
    for p in pairs {
        let (c, r) = p.sequences()?;
        let (sc, sr) = (scorer(&c)?, scorer(&r)?);
        hits += if sc > sr {
            1.0
        } else if sc == sr {
            0.5
        } else {
            0.0
        };
    }
    Ok(hits / pairs.len() as f64)
}

/// The toy transformer with a linear scalar head on its pooled embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub model: Model,
}

impl RewardModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        // the reward head reads the pooled embedding only; auxiliary losses are off
        let cfg = ModelConfig { lambda_doc: 0.0, lambda_temp: 0.0, ..cfg };
        let mut model = Model::init(cfg)?;
        model.params.insert("reward.head", Tensor::zeros(&[model.cfg.d_doc, 1]));
        Ok(Self { model })
    }

    fn context(&self, tokens: &[usize]) -> PackedContext {
        PackedContext::single(tokens.to_vec(), 0, Domain::Land)
    }

    fn score_on_tape(&self, tape: &mut Tape, vars: &crate::model::ParamVars, tokens: &[usize]) -> Result<Var> {
        let fwd = forward_on_tape(tape, &self.model, vars, &self.context(tokens))?;
        let head = vars.get("reward.head").copied().ok_or_else(|| crate::Error::Index("reward.head".into()))?;
        tape.matmul(fwd.pooled, head)
    }

    pub fn score(&self, tokens: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = param_vars(&mut tape, &self.model, false);
        let s = self.score_on_tape(&mut tape, &vars, tokens)?;
        Ok(tape.scalar_value(s))
    }

    pub fn accuracy(&self, pairs: &[PreferencePair]) -> Result<f64> {
        reward_accuracy(|t| self.score(t), pairs)
    }

    fn pair_grads(&self, pair: &PreferencePair) -> Result<(f64, Grads)> {
        let (c, r) = pair.sequences()?;
        let mut tape = Tape::new();
        let vars = param_vars(&mut tape, &self.model, true);
        let sc = self.score_on_tape(&mut tape, &vars, &c)?;
        let sr = self.score_on_tape(&mut tape, &vars, &r)?;
        let margin = tape.sub(sc, sr)?;
        let neg = tape.scale(margin, -1.0);
        let loss = tape.softplus(neg);
        tape.backward(loss)?;
        Ok((tape.scalar_value(loss), collect_grads(&tape, &self.model, &vars)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        let optimizer = OptimizerConfig {
            peak_lr: 3e-3,
            floor_lr: 3e-4,
            warmup_steps: 10,
            total_steps: 300,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        Self { optimizer, batch_size: 16, seed: 0 }
    }
}

/// Minimises the mean pairwise loss; returns the per-step batch losses.
pub fn train_reward_model(rm: &mut RewardModel, pairs: &[PreferencePair], cfg: &RewardTrainConfig) -> Result<Vec<f64>> {
    cfg.optimizer.validate()?;
    if pairs.is_empty() || cfg.batch_size == 0 {
        bail!(Input, "reward training needs pairs and a positive batch size");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut state = AdamState::default();
    let mut losses = Vec::new();
    for step in 1..=cfg.optimizer.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&pairs[order.pop().expect("refilled")]);
        }
        let results: Vec<(f64, Grads)> = batch.par_iter().map(|p| rm.pair_grads(p)).collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        let mut grads: Grads = rm.model.params.iter().map(|(k, t)| (k.to_string(), vec![0.0; t.len()])).collect();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l / n;
            for (name, buf) in grads.iter_mut() {
                buf.iter_mut().zip(&g[name]).for_each(|(a, b)| *a += b / n);
            }
        }
        if !loss.is_finite() {
            return Err(crate::Error::Divergence { step, detail: "reward loss not finite".into() });
        }
        clip_grad_norm(&mut grads, cfg.optimizer.clip_norm)?;
        optimizer_step(&mut rm.model.params, &grads, &mut state, &cfg.optimizer, step)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Pairs whose preference follows a hidden per-token utility.
#[derive(Clone, Debug)]
pub struct PreferenceFixture {
    pub train: Vec<PreferencePair>,
    pub test: Vec<PreferencePair>,
    /// Utility of each token id in `token_range`, offset by its start.
    pub utility: Vec<f64>,
    pub token_range: std::ops::Range<usize>,
}

impl PreferenceFixture {
    /// Summed utility of a completion.
    pub fn utility_of(&self, tokens: &[usize]) -> f64 {
        tokens
            .iter()
            .filter(|t| self.token_range.contains(t))
            .map(|&t| self.utility[t - self.token_range.start])
            .sum()
    }
}

/// Completions of `completion_len` tokens drawn from `token_range`; the
/// completion with the larger summed utility is chosen. Pairs of equal
/// utility are redrawn.
pub fn planted_preference_fixture(
    n_train: usize,
    n_test: usize,
    token_range: std::ops::Range<usize>,
    completion_len: usize,
    seed: u64,
) -> Result<PreferenceFixture> {
    if token_range.len() < 2 || completion_len == 0 {
        bail!(Config, "fixture needs at least two tokens and non-empty completions");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let utility: Vec<f64> = token_range.clone().map(|_| normal.sample(&mut rng)).collect();
    let mut fx = PreferenceFixture { train: vec![], test: vec![], utility, token_range: token_range.clone() };
    let draw = |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..completion_len).map(|_| rng.gen_range(token_range.clone())).collect() };
    let prompt = vec![token_range.start];
    let mut pairs = Vec::with_capacity(n_train + n_test);
    while pairs.len() < n_train + n_test {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let (ua, ub) = (fx.utility_of(&a), fx.utility_of(&b));
        if ua == ub {
            continue;
        }
        let chosen = if ua > ub { Side::A } else { Side::B };
        pairs.push(PreferencePair { prompt: prompt.clone(), completion_a: a, completion_b: b, chosen });
    }
    fx.test = pairs.split_off(n_train);
    fx.train = pairs;
    Ok(fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_token_kl() {
        let cur = Tensor::from_rows(&[vec![0.8f64.ln(), 0.2f64.ln()]]).unwrap();
        let refr = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let kl = kl_divergence_rows(&cur, &refr, &[true]).unwrap();
        let expect = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.1927).abs() < 5e-5);
        assert_eq!(kl_divergence_rows(&cur, &cur, &[true]).unwrap(), 0.0);
    }

    #[test]
    fn tape_kl_matches_direct() {
        let cur = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.0, 0.5, 0.1]]).unwrap();
        let refr = Tensor::from_rows(&[vec![1.0, 0.0, -0.5], vec![0.2, 0.2, 0.9]]).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(cur.clone());
        let k = kl_on_tape(&mut tape, l, &refr, &[Some(0), None]).unwrap();
        let direct = kl_divergence_rows(&cur, &refr, &[true, false]).unwrap();
        assert!((tape.scalar_value(k) - direct).abs() < 1e-15);
    }

    #[test]
    fn pref_loss_values() {
        assert!((reward_pref_loss(0.3, 0.3) - 2f64.ln()).abs() < 1e-15);
        assert!((reward_pref_loss(1.0, 0.0) - 0.31326168751822286).abs() < 1e-12);
        assert!(reward_pref_loss(800.0, 0.0) < 1e-300);
        let (a, b) = (0.7, -0.4);
        assert!(reward_pref_loss(a, b) + reward_pref_loss(b, a) > 2.0 * 2f64.ln());
    }

    #[test]
    fn accuracy_edge_scorers() {
        let fx = planted_preference_fixture(0, 30, 10..20, 3, 4).unwrap();
        assert_eq!(reward_accuracy(|_| Ok(1.0), &fx.test).unwrap(), 0.5);
        let oracle = |t: &[usize]| Ok(fx.utility_of(t));
        assert_eq!(reward_accuracy(oracle, &fx.test).unwrap(), 1.0);
        assert!(reward_accuracy(|_| Ok(0.0), &[]).is_err());
    }

    #[test]
    fn fresh_reward_model_ties() {
        let rm = RewardModel::new(ModelConfig::tiny(24)).unwrap();
        let fx = planted_preference_fixture(0, 10, 10..20, 3, 1).unwrap();
        // the head starts at zero, so every score ties
        assert_eq!(rm.accuracy(&fx.test).unwrap(), 0.5);
    }
}

//! The toy transformer: configuration, parameter store, packed inputs,
//! the differentiable forward pass and composite loss, a tape-free
//! inference path with decoding, and the checkpoint container.

mod checkpoint;
mod forward;
mod infer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    collect_grads, cross_mass_on_tape, forward, forward_on_tape, loss_and_grads, loss_on_tape, param_vars,
    temporal_coherence_loss, temporal_loss_on_tape, total_loss, ForwardOutput, LossBreakdown, LossVars, ParamVars,
    TapeForward,
};
pub use infer::{generate, DecodeMode, GenerateOptions, InferenceModel, Linear};

use crate::attention::DEFAULT_PERIOD_DAYS;
use crate::corpus::{Domain, DocumentSegment};
use crate::error::{bail, Result};
use crate::strategic::{embed_sentences, DoctrineEmbeddingSet};
use crate::tensor::Tensor;
use crate::tokenizer::{Vocabulary, EOS};
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub mlp_hidden: usize,
    pub lambda_doc: f64,
    pub lambda_temp: f64,
    /// Document-mask biases in attention; off means `M_doc = 0`.
    pub doc_mask_enabled: bool,
    /// Temporal offset in the position encoding; off means `alpha = 0`.
    pub temporal_enabled: bool,
    pub temporal_period_days: f64,
    pub alpha_init: f64,
    /// Width of the pooled doctrine embedding.
    pub d_doc: usize,
    pub fusion_enabled: bool,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            vocab_size: 512,
            max_context: 256,
            mlp_hidden: 256,
            lambda_doc: 0.15,
            lambda_temp: 0.08,
            doc_mask_enabled: true,
            temporal_enabled: true,
            temporal_period_days: DEFAULT_PERIOD_DAYS,
            alpha_init: 0.1,
            d_doc: 64,
            fusion_enabled: true,
            norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            vocab_size,
            max_context: 16,
            mlp_hidden: 16,
            d_doc: 8,
            ..Self::default()
        }
    }

    /// Every innovation switched off: a plain pre-norm causal transformer.
    pub fn baseline(mut self) -> Self {
        self.doc_mask_enabled = false;
        self.temporal_enabled = false;
        self.fusion_enabled = false;
        self.lambda_doc = 0.0;
        self.lambda_temp = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 {
            bail!(Config, "layers, heads and head width must be positive");
        }
        if self.d_model != self.n_heads * self.d_head {
            bail!(Config, "d_model {} != n_heads {} x d_head {}", self.d_model, self.n_heads, self.d_head);
        }
        if self.d_model % 2 != 0 {
            bail!(Config, "d_model must be even for the sinusoidal encoding");
        }
        if self.vocab_size < 2 || self.max_context == 0 || self.mlp_hidden == 0 || self.d_doc == 0 {
            bail!(Config, "vocab_size >= 2, max_context, mlp_hidden and d_doc >= 1 required");
        }
        if !(self.lambda_doc >= 0.0 && self.lambda_temp >= 0.0) {
            bail!(Config, "loss weights must be non-negative");
        }
        if !(self.temporal_period_days > 0.0) || !(self.norm_eps > 0.0) {
            bail!(Config, "temporal period and norm epsilon must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| crate::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter tensors in a stable insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| crate::Error::Index(format!("no parameter named '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| crate::Error::Index(format!("no parameter named '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Model parameters plus the frozen doctrine embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub doctrine: Option<DoctrineEmbeddingSet>,
}

pub(crate) fn block_name(layer: usize, part: &str) -> String {
    format!("blocks.{layer}.{part}")
}

pub(crate) fn fusion_name(d: Domain, part: &str) -> String {
    format!("fusion.{d}.{part}")
}

impl Model {
    /// Seeded initialisation. Projections are `N(0, 1/fan_in)`, output
    /// projections are further shrunk by `1/sqrt(2·n_layers)`, and the token
    /// table is `N(0, 1/d_model)` because it is scaled by `sqrt(d_model)` on input.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
                .expect("positive dims")
        };
        let d = cfg.d_model;
        let inv = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("embed.tokens", normal(cfg.vocab_size, d, inv(d)));
        p.insert("embed.alpha", Tensor::scalar(cfg.alpha_init));
        p.insert("attn.b_same", Tensor::scalar(0.0));
        p.insert("attn.b_cross", Tensor::scalar(0.0));
        for l in 0..cfg.n_layers {
            p.insert(block_name(l, "norm_attn"), Tensor::filled(&[1, d], 1.0));
            for w in ["wq", "wk", "wv"] {
                p.insert(block_name(l, w), normal(d, d, inv(d)));
            }
            p.insert(block_name(l, "wo"), normal(d, d, inv(d) * resid));
            p.insert(block_name(l, "norm_mlp"), Tensor::filled(&[1, d], 1.0));
            p.insert(block_name(l, "w_in"), normal(d, cfg.mlp_hidden, inv(d)));
            p.insert(block_name(l, "b_in"), Tensor::zeros(&[1, cfg.mlp_hidden]));
            p.insert(block_name(l, "w_out"), normal(cfg.mlp_hidden, d, inv(cfg.mlp_hidden) * resid));
            p.insert(block_name(l, "b_out"), Tensor::zeros(&[1, d]));
        }
        let gate = 1.0 / Domain::ALL.len() as f64;
        for dom in Domain::ALL {
            p.insert(fusion_name(dom, "gate"), Tensor::scalar(gate));
            for w in ["wq", "wk", "wv"] {
                p.insert(fusion_name(dom, w), normal(d, d, inv(d)));
            }
        }
        p.insert("final_norm", Tensor::filled(&[1, d], 1.0));
        p.insert("doctrine.proj", normal(d, cfg.d_doc, inv(d)));
        Ok(Self { cfg, params: p, doctrine: None })
    }

    /// Whether `name` takes part in the forward pass under this configuration.
    pub fn is_active(&self, name: &str) -> bool {
        if name == "embed.alpha" {
            return self.cfg.temporal_enabled;
        }
        if name.starts_with("attn.b_") {
            return self.cfg.doc_mask_enabled;
        }
        if name.starts_with("fusion.") {
            return self.cfg.fusion_enabled;
        }
        if name == "doctrine.proj" {
            // the pooled embedding feeds the doctrine loss or a reward head
            return self.doctrine.is_some() || self.params.get("reward.head").is_ok();
        }
        true
    }

    /// Freezes doctrine embeddings as mean token embeddings of each
    /// principle sentence under the current token table.
    pub fn attach_doctrine(&mut self, principles: &[(String, String)], vocab: &Vocabulary) -> Result<()> {
        if self.cfg.d_doc != self.cfg.d_model {
            bail!(Config, "token-mean doctrine embeddings need d_doc == d_model ({} vs {})", self.cfg.d_doc, self.cfg.d_model);
        }
        let named: Vec<(String, Vec<usize>)> = principles
            .iter()
            .map(|(n, s)| (n.clone(), vocab.encode(s).into_iter().filter(|&t| t < self.cfg.vocab_size).collect()))
            .collect();
        self.doctrine = Some(embed_sentences(&named, self.params.get("embed.tokens")?)?);
        Ok(())
    }
}

/// One packed context: tokens plus per-position document, date and domain tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackedContext {
    pub tokens: Vec<usize>,
    /// Document index within the context.
    pub doc_index: Vec<usize>,
    pub temporal: Vec<u32>,
    pub domains: Vec<Domain>,
    /// Next-token target per position; `None` positions are not scored.
    pub targets: Vec<Option<usize>>,
}

impl PackedContext {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_docs(&self) -> usize {
        let mut ids = self.doc_index.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn validate(&self, max_context: usize) -> Result<()> {
        let t = self.tokens.len();
        if t == 0 {
            bail!(Input, "empty context");
        }
        if t > max_context {
            bail!(Input, "context of {t} tokens exceeds max_context {max_context}");
        }
        if self.doc_index.len() != t || self.temporal.len() != t || self.domains.len() != t || self.targets.len() != t {
            bail!(Dimension, "per-position tags must all have length {t}");
        }
        Ok(())
    }

    /// A single-document context tagged with one date and domain.
    pub fn single(tokens: Vec<usize>, temporal: u32, domain: Domain) -> Self {
        let t = tokens.len();
        let mut targets: Vec<Option<usize>> = tokens.iter().skip(1).map(|&x| Some(x)).collect();
        targets.push(None);
        Self { tokens, doc_index: vec![0; t], temporal: vec![temporal; t], domains: vec![domain; t], targets }
    }

    /// Packs whole segments, each followed by `<eos>`, into one context.
    pub fn pack(segments: &[DocumentSegment], max_context: usize) -> Result<Self> {
        let mut out = Self { tokens: vec![], doc_index: vec![], temporal: vec![], domains: vec![], targets: vec![] };
        for (i, s) in segments.iter().enumerate() {
            for &tok in s.tokens.iter().chain(std::iter::once(&EOS)) {
                out.tokens.push(tok);
                out.doc_index.push(i);
                out.temporal.push(s.temporal_index);
                out.domains.push(s.domain);
            }
        }
        out.targets = out.tokens.iter().skip(1).map(|&x| Some(x)).collect();
        out.targets.push(None);
        out.validate(max_context)?;
        Ok(out)
    }

    /// Cuts the concatenated segment stream into consecutive windows of
    /// `window` tokens; the final position of each window targets the next
    /// token of the stream when there is one.
    pub fn pack_stream(segments: &[DocumentSegment], window: usize) -> Result<Vec<Self>> {
        if window == 0 {
            bail!(Config, "window must be positive");
        }
        let mut tokens = Vec::new();
        let mut doc_index = Vec::new();
        let mut temporal = Vec::new();
        let mut domains = Vec::new();
        for (i, s) in segments.iter().enumerate() {
            for &tok in s.tokens.iter().chain(std::iter::once(&EOS)) {
                tokens.push(tok);
                doc_index.push(i);
                temporal.push(s.temporal_index);
                domains.push(s.domain);
            }
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start + 1 < tokens.len() {
            let end = (start + window).min(tokens.len());
            let targets = (start..end).map(|i| tokens.get(i + 1).copied()).collect();
            let base = doc_index[start];
            out.push(Self {
                tokens: tokens[start..end].to_vec(),
                doc_index: doc_index[start..end].iter().map(|d| d - base).collect(),
                temporal: temporal[start..end].to_vec(),
                domains: domains[start..end].to_vec(),
                targets,
            });
            start = end;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig { d_head: 15, ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
        let neg = ModelConfig { lambda_temp: -0.1, ..ModelConfig::default() };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(ModelConfig::tiny(12)).unwrap();
        let b = Model::init(ModelConfig::tiny(12)).unwrap();
        let c = Model::init(ModelConfig { seed: 1, ..ModelConfig::tiny(12) }).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let cfg = ModelConfig::from_toml("n_layers = 3\nlambda_doc = 0.0\n").unwrap();
        assert_eq!(cfg.n_layers, 3);
        assert_eq!(cfg.lambda_temp, 0.08);
        assert!(ModelConfig::from_toml("n_layer = 3").is_err());
    }

    #[test]
    fn packing_tags_positions() {
        let seg = |id: &str, toks: Vec<usize>, t: u32, d: Domain| DocumentSegment {
            doc_id: id.into(),
            domain: d,
            temporal_index: t,
            tokens: toks,
            raw_text: String::new(),
        };
        let segs = vec![seg("a", vec![5, 6], 10, Domain::Air), seg("b", vec![7], 20, Domain::Sea)];
        let p = PackedContext::pack(&segs, 8).unwrap();
        assert_eq!(p.tokens, vec![5, 6, EOS, 7, EOS]);
        assert_eq!(p.doc_index, vec![0, 0, 0, 1, 1]);
        assert_eq!(p.temporal, vec![10, 10, 10, 20, 20]);
        assert_eq!(p.targets, vec![Some(6), Some(EOS), Some(7), Some(EOS), None]);
        assert!(matches!(PackedContext::pack(&segs, 4), Err(crate::Error::Input(_))));
        let w = PackedContext::pack_stream(&segs, 2).unwrap();
        // the trailing lone <eos> has nothing to predict and is dropped
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].targets, vec![Some(6), Some(EOS)]);
        assert_eq!(w[1].doc_index, vec![0, 1]);
        assert_eq!(w[1].targets, vec![Some(7), Some(EOS)]);
    }
}

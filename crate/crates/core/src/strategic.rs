//! Doctrine-consistency head and multi-domain cross-attention fusion.
//!
//! The doctrine penalty is `λ · min_p ‖pool(H)·P − e_p‖₂` over a frozen set
//! of principle embeddings `e_p`. Fusion sums, over the domains present,
//! a gated cross-attention from one domain's states to the concatenation
//! of every other domain's states.

use crate::attention::{attend, NEG_INF};
use crate::corpus::Domain;
use crate::error::{bail, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Default weight of the doctrine penalty.
pub const DEFAULT_DOCTRINE_LAMBDA: f64 = 0.15;

/// Frozen, named principle embeddings of a common width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoctrineEmbeddingSet {
    principles: Vec<(String, Vec<f64>)>,
    frozen: bool,
}

impl DoctrineEmbeddingSet {
    pub fn new(principles: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let Some(width) = principles.first().map(|p| p.1.len()) else {
            bail!(Input, "doctrine set must contain at least one principle");
        };
        if width == 0 || principles.iter().any(|p| p.1.len() != width) {
            bail!(Dimension, "doctrine embeddings must share one non-zero width");
        }
        Ok(Self { principles, frozen: true })
    }

    pub fn width(&self) -> usize {
        self.principles[0].1.len()
    }

    pub fn len(&self) -> usize {
        self.principles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.principles.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn name(&self, i: usize) -> &str {
        &self.principles[i].0
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.principles[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.principles.iter().map(|(n, e)| (n.as_str(), e.as_slice()))
    }

    /// Index of the nearest principle in Euclidean distance (first on ties).
    pub fn nearest(&self, emb: &[f64]) -> Result<(usize, f64)> {
        if emb.len() != self.width() {
            bail!(Dimension, "embedding width {} vs doctrine width {}", emb.len(), self.width());
        }
        let mut best = (0, f64::INFINITY);
        for (i, (_, p)) in self.principles.iter().enumerate() {
            let d = euclidean(emb, p);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean token embedding of each tokenised principle sentence.
pub fn embed_sentences(
    named_tokens: &[(String, Vec<usize>)],
    token_embedding: &Tensor,
) -> Result<DoctrineEmbeddingSet> {
    let (vocab, width) = token_embedding.dims2();
    let mut out = Vec::with_capacity(named_tokens.len());
    for (name, toks) in named_tokens {
        if toks.is_empty() {
            bail!(Input, "principle '{name}' has no tokens");
        }
        let mut mean = vec![0.0; width];
        for &t in toks {
            if t >= vocab {
                bail!(Index, "token {t} outside embedding table of {vocab} rows");
            }
            mean.iter_mut().zip(token_embedding.row(t)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= toks.len() as f64);
        out.push((name.clone(), mean));
    }
    DoctrineEmbeddingSet::new(out)
}

/// Mean over positions followed by the learned `d_model × d_doc` projection.
pub fn pool_on_tape(tape: &mut Tape, hidden: Var, projection: Var) -> Result<Var> {
    if tape.value(hidden).rows() == 0 {
        bail!(Input, "cannot pool an empty sequence");
    }
    let mean = tape.mean_rows(hidden);
    tape.matmul(mean, projection)
}

pub fn pool_output_embedding(hidden: &Tensor, projection: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let h = tape.constant(hidden.clone());
    let p = tape.constant(projection.clone());
    let e = pool_on_tape(&mut tape, h, p)?;
    Ok(tape.value(e).data().to_vec())
}

/// Records `lambda · min_p ‖emb − e_p‖₂`; the minimising principle is
/// selected on values, so ties resolve to the first index.
pub fn doctrine_loss_on_tape(
    tape: &mut Tape,
    emb: Var,
    doctrine: &DoctrineEmbeddingSet,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        bail!(Config, "doctrine lambda must be non-negative, got {lambda}");
    }
    let (idx, _) = doctrine.nearest(tape.value(emb).data())?;
    let shape = tape.value(emb).shape().to_vec();
    let target = tape.constant(Tensor::new(shape, doctrine.embedding(idx).to_vec())?);
    let diff = tape.sub(emb, target)?;
    let dist = tape.l2_norm(diff);
    Ok(tape.scale(dist, lambda))
}

pub fn doctrine_loss(emb: &[f64], doctrine: &DoctrineEmbeddingSet, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        bail!(Config, "doctrine lambda must be non-negative, got {lambda}");
    }
    Ok(lambda * doctrine.nearest(emb)?.1)
}

/// Cosine similarity.
pub fn doctrine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Dimension, "cosine of vectors with lengths {} and {}", a.len(), b.len());
    }
    let (na, nb) = (kernels::dot(a, a).sqrt(), kernels::dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        bail!(Input, "cosine similarity of a zero vector");
    }
    Ok((kernels::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictKind {
    Consistent,
    Violation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub kind: VerdictKind,
    pub nearest: usize,
    pub nearest_name: String,
    pub similarity: f64,
}

/// Consistent iff the best cosine over principles reaches `threshold`.
pub fn consistency_verdict(
    statement: &[f64],
    doctrine: &DoctrineEmbeddingSet,
    threshold: f64,
) -> Result<ConsistencyVerdict> {
    if !(-1.0..=1.0).contains(&threshold) {
        bail!(Input, "verdict threshold {threshold} outside [-1, 1]");
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (_, p)) in doctrine.principles.iter().enumerate() {
        let s = doctrine_similarity(statement, p)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(ConsistencyVerdict {
        kind: if best.1 >= threshold { VerdictKind::Consistent } else { VerdictKind::Violation },
        nearest: best.0,
        nearest_name: doctrine.name(best.0).to_string(),
        similarity: best.1,
    })
}

/// Gate and cross-attention projections for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionParams {
    pub gate: f64,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainFusionParams {
    pub domains: BTreeMap<Domain, CrossAttentionParams>,
}

impl DomainFusionParams {
    /// Gates start at `1/|domains|`; projections use the supplied initialiser.
    pub fn init(width: usize, mut init: impl FnMut(usize, usize) -> Tensor) -> Self {
        let gate = 1.0 / Domain::ALL.len() as f64;
        let domains = Domain::ALL
            .iter()
            .map(|&d| {
                let p = CrossAttentionParams {
                    gate,
                    wq: init(width, width),
                    wk: init(width, width),
                    wv: init(width, width),
                };
                (d, p)
            })
            .collect();
        Self { domains }
    }

    pub fn to_tape(&self, tape: &mut Tape, differentiable: bool) -> FusionVars {
        let mut leaf = |t: Tensor| if differentiable { tape.param(t) } else { tape.constant(t) };
        let domains = self
            .domains
            .iter()
            .map(|(&d, p)| {
                let v = CrossAttentionVars {
                    gate: leaf(Tensor::scalar(p.gate)),
                    wq: leaf(p.wq.clone()),
                    wk: leaf(p.wk.clone()),
                    wv: leaf(p.wv.clone()),
                };
                (d, v)
            })
            .collect();
        FusionVars { domains }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionVars {
    pub gate: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

#[derive(Clone, Debug)]
pub struct FusionVars {
    pub domains: BTreeMap<Domain, CrossAttentionVars>,
}

/// Fuses a packed `T×d` state matrix whose rows are tagged with domains.
///
/// With `causal`, a query row only sees other-domain rows at earlier or
/// equal positions; a query with no admissible key contributes zero.
/// With a single domain present the result is `W_d · H`.
pub fn fuse_on_tape(
    tape: &mut Tape,
    hidden: Var,
    row_domains: &[Domain],
    params: &FusionVars,
    causal: bool,
) -> Result<Var> {
    let (t, width) = tape.value(hidden).dims2();
    if row_domains.len() != t {
        bail!(Dimension, "{} domain tags for {t} rows", row_domains.len());
    }
    let mut present: Vec<Domain> = row_domains.to_vec();
    present.sort();
    present.dedup();
    for d in &present {
        if !params.domains.contains_key(d) {
            bail!(Config, "no fusion parameters for domain {d}");
        }
    }
    if present.len() == 1 {
        return tape.mul_scalar(hidden, params.domains[&present[0]].gate);
    }
    let mut total: Option<Var> = None;
    for d in present {
        let p = params.domains[&d];
        let own: Vec<usize> = (0..t).filter(|&i| row_domains[i] == d).collect();
        let other: Vec<usize> = (0..t).filter(|&i| row_domains[i] != d).collect();
        let hd = tape.gather_rows(hidden, &own)?;
        let ho = tape.gather_rows(hidden, &other)?;
        let q = tape.matmul(hd, p.wq)?;
        let k = tape.matmul(ho, p.wk)?;
        let v = tape.matmul(ho, p.wv)?;
        let mut bias = Tensor::zeros(&[own.len(), other.len()]);
        let mut live = Tensor::zeros(&[own.len(), width]);
        for (r, &qi) in own.iter().enumerate() {
            let mut any = false;
            for (c, &kj) in other.iter().enumerate() {
                if causal && kj > qi {
                    bias.data_mut()[r * other.len() + c] = NEG_INF;
                } else {
                    any = true;
                }
            }
            if any {
                live.data_mut()[r * width..(r + 1) * width].iter_mut().for_each(|x| *x = 1.0);
            }
        }
        let b = tape.constant(bias);
        let att = attend(tape, q, k, v, width, Some(b), false)?;
        let live = tape.constant(live);
        let gated_rows = tape.mul(att.values, live)?;
        let term = tape.mul_scalar(gated_rows, p.gate)?;
        let placed = tape.scatter_rows(term, &own, t)?;
        total = Some(match total {
            None => placed,
            Some(acc) => tape.add(acc, placed)?,
        });
    }
    Ok(total.expect("at least two domains present"))
}

/// Fuses per-domain state matrices; the output stacks rows in domain order.
pub fn domain_fuse(states: &BTreeMap<Domain, Tensor>, params: &DomainFusionParams) -> Result<Tensor> {
    if states.is_empty() {
        bail!(Input, "domain fusion needs at least one domain");
    }
    let width = states.values().next().map(|s| s.cols()).unwrap_or(0);
    if states.values().any(|s| s.cols() != width) {
        bail!(Dimension, "domain states must share one width");
    }
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    for (&d, s) in states {
        rows.extend_from_slice(s.data());
        tags.extend(std::iter::repeat(d).take(s.rows()));
    }
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::matrix(tags.len(), width, rows)?);
    let vars = params.to_tape(&mut tape, false);
    let out = fuse_on_tape(&mut tape, h, &tags, &vars, false)?;
    Ok(tape.value(out).clone())
}

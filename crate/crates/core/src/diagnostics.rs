//! Self-checks shared by the CLI, the tests and the acceptance runner: a
//! finite-difference gradient suite over every differentiable operation and
//! the composite loss, and the reductions under which each architectural
//! addition collapses to the plain transformer component it extends.

use crate::attention::{
    attend, cross_doc_contrastive_loss_on_tape, cross_doc_mass_on_tape, doc_mask_on_tape, multi_doc_attention, same_doc_indicator,
    sinusoidal_pe, temporal_pe, TemporalPeConfig,
};
use crate::corpus::{doctrine_principles, Domain};
use crate::error::Result;
use crate::model::{
    forward_on_tape, loss_on_tape, temporal_loss_on_tape, total_loss, InferenceModel, Model, ModelConfig, PackedContext, ParamVars,
};
use crate::strategic::{doctrine_loss_on_tape, domain_fuse, fuse_on_tape, pool_on_tape, DoctrineEmbeddingSet, DomainFusionParams};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::tokenizer::Vocabulary;
use crate::train::kl_on_tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Default relative-error tolerance of the suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl GradCase {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn m(&mut self, r: usize, c: usize) -> Tensor {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        Tensor::matrix(r, c, (0..r * c).map(|_| n.sample(&mut self.0)).collect()).expect("shape").with_grad()
    }

    fn s(&mut self) -> Tensor {
        Tensor::scalar(Normal::new(0.0, 1.0).expect("unit normal").sample(&mut self.0)).with_grad()
    }
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A mixed three-document context used by the composite-loss case.
pub fn mixed_context() -> PackedContext {
    PackedContext {
        tokens: vec![40, 41, 70, 1, 52, 66, 80, 33],
        doc_index: vec![0, 0, 0, 0, 1, 1, 2, 2],
        temporal: vec![6000, 6000, 6000, 6000, 900, 900, 3100, 3100],
        domains: vec![Domain::Air, Domain::Air, Domain::Land, Domain::Land, Domain::Sea, Domain::Sea, Domain::Air, Domain::Cyber],
        targets: vec![Some(41), Some(70), Some(1), Some(52), Some(66), Some(80), Some(33), None],
    }
}

/// Checks the composite loss of `model` on `ctx` over every active parameter.
pub fn composite_loss_case(model: &Model, ctx: &PackedContext, h: f64) -> Result<GradCase> {
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = model
        .params
        .iter()
        .map(|(n, t)| if model.is_active(n) { t.clone().with_grad() } else { t.clone() })
        .collect();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let pv: ParamVars = names.iter().cloned().zip(vars.iter().copied()).collect();
        let fwd = forward_on_tape(tape, model, &pv, ctx)?;
        Ok(loss_on_tape(tape, model, &fwd, ctx)?.total)
    };
    let r = grad_check(f, &inputs, h)?;
    Ok(GradCase { name: "composite-loss".into(), coordinates: r.coordinates, max_rel_error: r.max_rel_error })
}

fn op_cases(g: &mut Gen) -> Vec<(&'static str, Vec<Tensor>, CaseFn)> {
    // a weighted sum turns any tensor output into a scalar with a non-trivial gradient
    fn probe(tape: &mut Tape, x: Var) -> Result<Var> {
        let n = tape.value(x).len();
        let shape = tape.value(x).shape().to_vec();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7) % 5) as f64 * 0.41).collect();
        let w = tape.constant(Tensor::new(shape, w)?);
        let p = tape.mul(x, w)?;
        Ok(tape.sum(p))
    }
    let same = same_doc_indicator(&[0, 0, 1, 1, 2]);
    let targets = [Some(2), None, Some(0), Some(4), Some(1)];
    let principles = vec![
        ("a".to_string(), vec![0.5, -0.2, 0.1]),
        ("b".to_string(), vec![-1.0, 0.8, 0.3]),
    ];
    let doctrine = DoctrineEmbeddingSet::new(principles).expect("doctrine");
    let fusion = DomainFusionParams::init(3, |r, c| g.m(r, c));
    let reference = g.m(5, 6);
    let mut cases: Vec<(&'static str, Vec<Tensor>, CaseFn)> = vec![
        ("matmul", vec![g.m(3, 4), g.m(4, 2)], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; probe(t, y) })),
        ("add", vec![g.m(3, 4), g.m(3, 4)], Box::new(|t, v| { let y = t.add(v[0], v[1])?; probe(t, y) })),
        ("sub", vec![g.m(3, 4), g.m(3, 4)], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; probe(t, y) })),
        ("mul", vec![g.m(3, 4), g.m(3, 4)], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; probe(t, y) })),
        ("add_row", vec![g.m(3, 4), g.m(1, 4)], Box::new(|t, v| { let y = t.add_row(v[0], v[1])?; probe(t, y) })),
        ("scale", vec![g.m(3, 4)], Box::new(|t, v| { let y = t.scale(v[0], -1.7); probe(t, y) })),
        ("mul_scalar", vec![g.m(3, 4), g.s()], Box::new(|t, v| { let y = t.mul_scalar(v[0], v[1])?; probe(t, y) })),
        ("add_scalar", vec![g.m(3, 4), g.s()], Box::new(|t, v| { let y = t.add_scalar(v[0], v[1])?; probe(t, y) })),
        ("transpose", vec![g.m(3, 4)], Box::new(|t, v| { let y = t.transpose(v[0]); probe(t, y) })),
        ("softmax_rows", vec![g.m(3, 5)], Box::new(|t, v| { let y = t.softmax_rows(v[0])?; probe(t, y) })),
        ("log_softmax_rows", vec![g.m(3, 5)], Box::new(|t, v| { let y = t.log_softmax_rows(v[0])?; probe(t, y) })),
        ("layer_norm", vec![g.m(3, 5), g.m(1, 5), g.m(1, 5)], Box::new(|t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; probe(t, y) })),
        ("rms_norm", vec![g.m(3, 5), g.m(1, 5)], Box::new(|t, v| { let y = t.rms_norm(v[0], v[1], 1e-5)?; probe(t, y) })),
        ("gelu", vec![g.m(3, 4)], Box::new(|t, v| { let y = t.gelu(v[0]); probe(t, y) })),
        ("softplus", vec![g.m(3, 4)], Box::new(|t, v| { let y = t.softplus(v[0]); probe(t, y) })),
        ("sum", vec![g.m(3, 4)], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; Ok(t.sum(y)) })),
        ("mean", vec![g.m(3, 4)], Box::new(|t, v| { let y = t.mul(v[0], v[0])?; Ok(t.mean(y)) })),
        ("row_sum", vec![g.m(3, 4)], Box::new(|t, v| { let y = t.row_sum(v[0]); probe(t, y) })),
        ("mean_rows", vec![g.m(3, 4)], Box::new(|t, v| { let y = t.mean_rows(v[0]); probe(t, y) })),
        ("l2_norm", vec![g.m(3, 4)], Box::new(|t, v| Ok(t.l2_norm(v[0])))),
        ("cross_entropy", vec![g.m(4, 5)], Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 4, 2]))),
        ("masked_cross_entropy", vec![g.m(5, 5)], Box::new(move |t, v| t.masked_cross_entropy(v[0], &targets))),
        ("gather_rows", vec![g.m(4, 3)], Box::new(|t, v| { let y = t.gather_rows(v[0], &[2, 0, 2, 3])?; probe(t, y) })),
        ("scatter_rows", vec![g.m(3, 3)], Box::new(|t, v| { let y = t.scatter_rows(v[0], &[4, 1, 4], 5)?; probe(t, y) })),
        ("cols", vec![g.m(3, 5)], Box::new(|t, v| { let y = t.cols(v[0], 1, 3)?; probe(t, y) })),
        ("concat_cols", vec![g.m(3, 2), g.m(3, 3)], Box::new(|t, v| { let y = t.concat_cols(&[v[0], v[1]])?; probe(t, y) })),
    ];
    let s1 = same.clone();
    cases.push((
        "causal_attention_with_doc_mask",
        vec![g.m(5, 4), g.m(5, 4), g.m(5, 3), g.s(), g.s()],
        Box::new(move |t, v| {
            let bias = doc_mask_on_tape(t, &s1, v[3], v[4])?;
            let out = attend(t, v[0], v[1], v[2], 4, Some(bias), true)?;
            probe(t, out.values)
        }),
    ));
    let s2 = same.clone();
    cases.push((
        "cross_doc_contrastive",
        vec![g.m(5, 5), g.m(5, 5)],
        Box::new(move |t, v| {
            let mut masses = Vec::new();
            for &x in v {
                let w = t.softmax_rows(x)?;
                let col = cross_doc_mass_on_tape(t, w, &s2)?;
                masses.push(t.mean(col));
            }
            let single = t.constant(Tensor::scalar(0.0));
            masses.push(single);
            cross_doc_contrastive_loss_on_tape(t, &masses, &[true, true, false])
        }),
    ));
    cases.push((
        "temporal_anachronism_mass",
        vec![g.m(5, 5)],
        Box::new(|t, v| {
            let w = t.softmax_rows(v[0])?;
            temporal_loss_on_tape(t, &[vec![w]], &[30, 10, 20, 20, 5])
        }),
    ));
    cases.push((
        "doctrine_pool_and_distance",
        vec![g.m(4, 3), g.m(3, 3)],
        Box::new(move |t, v| {
            let e = pool_on_tape(t, v[0], v[1])?;
            doctrine_loss_on_tape(t, e, &doctrine, 0.15)
        }),
    ));
    cases.push((
        "domain_fusion",
        vec![g.m(5, 3)],
        Box::new(move |t, v| {
            let fv = fusion.to_tape(t, true);
            let doms = [Domain::Land, Domain::Air, Domain::Land, Domain::Sea, Domain::Air];
            let y = fuse_on_tape(t, v[0], &doms, &fv, true)?;
            probe(t, y)
        }),
    ));
    cases.push((
        "kl_to_reference",
        vec![g.m(5, 6)],
        Box::new(move |t, v| kl_on_tape(t, v[0], &reference, &[Some(1), Some(0), None, Some(3), Some(5)])),
    ));
    cases
}

/// Runs every case with step `h`. The composite case uses a two-layer
/// model with doctrine attached and all regularisers active.
pub fn gradient_suite(seed: u64, h: f64) -> Result<Vec<GradCase>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    for (name, inputs, f) in op_cases(&mut g) {
        let r = grad_check(|t: &mut Tape, v: &[Var]| f(t, v), &inputs, h)?;
        out.push(GradCase { name: name.into(), coordinates: r.coordinates, max_rel_error: r.max_rel_error });
    }
    let vocab = Vocabulary::character_level();
    let mut model = Model::init(ModelConfig { seed, ..ModelConfig::tiny(vocab.len()) })?;
    model.attach_doctrine(&doctrine_principles(), &vocab)?;
    out.push(composite_loss_case(&model, &mixed_context(), h)?);
    Ok(out)
}

/// One reduction: the largest absolute deviation observed and the bound it must meet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionCheck {
    pub name: String,
    pub max_abs_diff: f64,
    pub tolerance: f64,
}

impl ReductionCheck {
    pub fn passes(&self) -> bool {
        self.max_abs_diff <= self.tolerance
    }
}

fn plain_attention(q: &Tensor, k: &Tensor, v: &Tensor, d_k: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = attend(&mut tape, qv, kv, vv, d_k, None, true)?;
    Ok(tape.value(out.values).clone())
}

/// Zero document biases, zero temporal scale, zero regulariser weights and
/// a single fusion domain must each reproduce the unextended computation.
pub fn reduction_checks(seed: u64) -> Result<Vec<ReductionCheck>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();

    let (q, k, v) = (g.m(12, 8), g.m(12, 8), g.m(12, 5));
    let docs = [0, 0, 0, 1, 1, 2, 2, 2, 2, 3, 3, 3];
    let masked = multi_doc_attention(&q, &k, &v, 8, &Tensor::zeros(&[12, 12]), &docs, true)?;
    let plain = plain_attention(&q, &k, &v, 8)?;
    let vocab = Vocabulary::character_level();
    let ctx = mixed_context();
    let base = ModelConfig { seed, ..ModelConfig::tiny(vocab.len()) };
    let with_mask = InferenceModel::new(&Model::init(base.clone())?)?.logits(&ctx)?;
    let without = InferenceModel::new(&Model::init(ModelConfig { doc_mask_enabled: false, ..base.clone() })?)?.logits(&ctx)?;
    out.push(ReductionCheck {
        name: "zero document mask is standard attention".into(),
        max_abs_diff: masked.values.max_abs_diff(&plain).max(with_mask.max_abs_diff(&without)),
        tolerance: 1e-12,
    });

    let cfg = TemporalPeConfig { alpha: 0.0, ..TemporalPeConfig::new(16) };
    let mut worst = 0.0f64;
    for pos in [0, 1, 7, 100, 4095] {
        for t in [0.0, 1.0, 1825.0, 7300.0, 14600.0] {
            let a = temporal_pe(pos, t, &cfg)?;
            let b = sinusoidal_pe(pos, 16)?;
            worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    out.push(ReductionCheck { name: "zero temporal scale is sinusoidal encoding".into(), max_abs_diff: worst, tolerance: 0.0 });

    let mut m = Model::init(ModelConfig { lambda_doc: 0.0, lambda_temp: 0.0, ..base })?;
    m.attach_doctrine(&doctrine_principles(), &vocab)?;
    let lb = total_loss(&m, &ctx)?;
    out.push(ReductionCheck { name: "zero loss weights leave the language-model loss".into(), max_abs_diff: (lb.total - lb.l_clm).abs(), tolerance: 1e-12 });

    let mut fusion = DomainFusionParams::init(4, |r, c| g.m(r, c));
    fusion.domains.values_mut().for_each(|p| p.gate = 1.0);
    let h = g.m(6, 4);
    let mut worst = 0.0f64;
    for d in Domain::ALL {
        let mut one = BTreeMap::new();
        one.insert(d, h.clone());
        worst = worst.max(domain_fuse(&one, &fusion)?.max_abs_diff(&h));
    }
    out.push(ReductionCheck { name: "single-domain fusion passes through".into(), max_abs_diff: worst, tolerance: 0.0 });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let cases = gradient_suite(0, 1e-5).unwrap();
        assert!(cases.len() > 30);
        for c in &cases {
            assert!(c.passes(GRAD_TOLERANCE), "{}: {:.3e}", c.name, c.max_rel_error);
            assert!(c.coordinates > 0, "{}", c.name);
        }
    }

    #[test]
    fn reductions_hold() {
        for r in reduction_checks(3).unwrap() {
            assert!(r.passes(), "{}: {:e}", r.name, r.max_abs_diff);
        }
    }
}

//! Cross-document QA probes: each context packs single-fact documents
//! ("unit is at place", "place holds code") plus a question document whose
//! answer is the code reached by chaining two facts from different
//! documents. Distractor fact pairs make a single-hop copy insufficient.

use crate::corpus::{codes, places, units, Domain, DocumentSegment};
use crate::error::{bail, Result};
use crate::model::{InferenceModel, PackedContext};
use crate::tokenizer::EOS;
use crate::tokenizer::Vocabulary;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeItem {
    /// Facts and question; the question document ends with the answer token.
    pub context: PackedContext,
    /// Position whose next-token prediction is the answer.
    pub answer_pos: usize,
    pub answer: usize,
    /// Codes present in the context, sorted by token id.
    pub candidates: Vec<usize>,
}

fn single_token(vocab: &Vocabulary, term: &str) -> Result<usize> {
    match vocab.encode(term).as_slice() {
        [id] => Ok(*id),
        _ => bail!(Input, "'{term}' is not a single lexicon token"),
    }
}

fn segment(vocab: &Vocabulary, text: &str, day: u32, domain: Domain) -> DocumentSegment {
    DocumentSegment { doc_id: String::new(), domain, temporal_index: day, tokens: vocab.encode(text), raw_text: text.into() }
}

/// Probe items with `1 + distractors` fact chains each, in shuffled
/// document order, dated within `[0, max_day]`.
pub fn probe_items(n: usize, distractors: usize, vocab: &Vocabulary, max_day: u32, max_context: usize, seed: u64) -> Result<Vec<ProbeItem>> {
    let (us, ps, cs) = (units(), places(), codes());
    let chains = 1 + distractors;
    if chains > ps.len() || chains > cs.len() {
        bail!(Config, "at most {} fact chains fit the place and code inventories", ps.len().min(cs.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let u: Vec<&String> = us.choose_multiple(&mut rng, chains).collect();
        let p: Vec<&String> = ps.choose_multiple(&mut rng, chains).collect();
        let c: Vec<&String> = cs.choose_multiple(&mut rng, chains).collect();
        let domain = Domain::ALL[rng.gen_range(0..Domain::ALL.len())];
        let mut facts = Vec::with_capacity(2 * chains);
        for k in 0..chains {
            facts.push(segment(vocab, &format!("The {} is at {}.", u[k], p[k]), rng.gen_range(0..=max_day), domain));
            facts.push(segment(vocab, &format!("{} holds {}.", p[k], c[k]), rng.gen_range(0..=max_day), domain));
        }
        facts.shuffle(&mut rng);
        let answer = single_token(vocab, c[0])?;
        let mut question = segment(vocab, &format!("Which signal serves the {}?", u[0]), rng.gen_range(0..=max_day), domain);
        question.tokens.push(answer);
        facts.push(question);
        let context = PackedContext::pack(&facts, max_context)?;
        // the answer sits just before the question's closing EOS
        let answer_pos = context.len() - 3;
        debug_assert_eq!(context.tokens[answer_pos + 1], answer);
        debug_assert_eq!(context.tokens[answer_pos + 2], EOS);
        let mut candidates = c.iter().map(|code| single_token(vocab, code)).collect::<Result<Vec<_>>>()?;
        candidates.sort_unstable();
        items.push(ProbeItem { context, answer_pos, answer, candidates });
    }
    Ok(items)
}

/// Fraction of items where the answer has the highest logit among the
/// candidates (ties go to the lowest token id).
pub fn probe_accuracy(model: &InferenceModel, items: &[ProbeItem]) -> Result<f64> {
    if items.is_empty() {
        bail!(Input, "no probe items");
    }
    let mut hits = 0usize;
    for it in items {
        let logits = model.logits(&it.context)?;
        let row = logits.row(it.answer_pos);
        let mut best = it.candidates[0];
        for &c in &it.candidates[1..] {
            if row[c] > row[best] {
                best = c;
            }
        }
        hits += usize::from(best == it.answer);
    }
    Ok(hits as f64 / items.len() as f64)
}

//! Corpus records, line-delimited I/O, and a seeded synthetic corpus
//! generator with cross-document question-answer probes.
//!
//! Every probe plants two facts in two different documents: `UNIT is at
//! PLACE` and `PLACE holds CODE`. The question names the unit; the answer
//! is the code, a single lexicon token.

use crate::error::{bail, Result};
use crate::tokenizer::Vocabulary;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Land,
    Air,
    Sea,
    Space,
    Cyber,
}

impl Domain {
    pub const ALL: [Domain; 5] = [Domain::Land, Domain::Air, Domain::Sea, Domain::Space, Domain::Cyber];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Land => "land",
            Domain::Air => "air",
            Domain::Sea => "sea",
            Domain::Space => "space",
            Domain::Cyber => "cyber",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| crate::Error::Input(format!("unknown domain '{s}'")))
    }
}

/// One corpus document as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub domain: Domain,
    pub temporal_index: u32,
    pub text: String,
}

/// A tokenised document with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentSegment {
    pub doc_id: String,
    pub domain: Domain,
    /// Days since the corpus epoch.
    pub temporal_index: u32,
    pub tokens: Vec<usize>,
    pub raw_text: String,
}

impl DocumentSegment {
    pub fn from_record(rec: &CorpusRecord, vocab: &Vocabulary) -> Self {
        Self {
            doc_id: rec.doc_id.clone(),
            domain: rec.domain,
            temporal_index: rec.temporal_index,
            tokens: vocab.encode(&rec.text),
            raw_text: rec.text.clone(),
        }
    }

    pub fn to_record(&self) -> CorpusRecord {
        CorpusRecord {
            doc_id: self.doc_id.clone(),
            domain: self.domain,
            temporal_index: self.temporal_index,
            text: self.raw_text.clone(),
        }
    }
}

/// A cross-document probe; token fields are filled once a vocabulary exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaProbe {
    pub question: String,
    pub supporting_doc_ids: [String; 2],
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_token: Option<usize>,
}

impl QaProbe {
    pub fn tokenize(&mut self, vocab: &Vocabulary) -> Result<()> {
        let ans = vocab.encode(&self.answer);
        if ans.len() != 1 {
            bail!(Input, "answer '{}' is not a single token", self.answer);
        }
        self.question_tokens = Some(vocab.encode(&self.question));
        self.answer_token = Some(ans[0]);
        Ok(())
    }
}

/// Provenance header written as the first line of generated files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub seed: u64,
    pub config_hash: String,
}

impl ArtifactMeta {
    pub fn new<T: Serialize>(seed: u64, config: &T) -> Result<Self> {
        Ok(Self { seed, config_hash: config_hash(config)? })
    }

    /// The comment line placed at the top of CSV artifacts.
    pub fn csv_comment(&self) -> String {
        format!("# seed={} config_hash={}", self.seed, self.config_hash)
    }
}

/// First 16 hex digits of the SHA-256 of a configuration's JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    #[serde(rename = "_meta")]
    meta: ArtifactMeta,
}

/// Writes line-delimited JSON records, preceded by an optional `_meta` line.
pub fn write_jsonl<T: Serialize>(path: &Path, meta: Option<&ArtifactMeta>, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(m) = meta {
        serde_json::to_writer(&mut w, &MetaLine { meta: m.clone() })?;
        w.write_all(b"\n")?;
    }
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads line-delimited JSON records, skipping blank and `_meta` lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("{\"_meta\"") {
            continue;
        }
        out.push(serde_json::from_str(trimmed).map_err(|e| {
            crate::Error::Format(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_docs: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Relative weights for land, air, sea, space, cyber.
    pub domain_weights: [f64; 5],
    pub min_day: u32,
    pub max_day: u32,
    pub n_probes: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            min_sentences: 6,
            max_sentences: 14,
            domain_weights: [0.3, 0.25, 0.2, 0.1, 0.15],
            min_day: 0,
            max_day: 14600,
            n_probes: 40,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs == 0 && self.n_probes > 0 {
            bail!(Config, "probes requested from an empty corpus");
        }
        if self.n_probes > 0 && self.n_docs < 2 {
            bail!(Config, "probes need at least two documents");
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            bail!(Config, "sentence range [{}, {}] is invalid", self.min_sentences, self.max_sentences);
        }
        if self.min_day > self.max_day {
            bail!(Config, "temporal range [{}, {}] is invalid", self.min_day, self.max_day);
        }
        if self.domain_weights.iter().any(|w| *w < 0.0 || !w.is_finite())
            || self.domain_weights.iter().sum::<f64>() <= 0.0
        {
            bail!(Config, "domain weights must be non-negative with a positive sum");
        }
        if self.n_probes > units().len() {
            bail!(Config, "at most {} probes can be planted (one per unit)", units().len());
        }
        Ok(())
    }
}

const ORDINALS: [&str; 12] =
    ["1st", "2nd", "3rd", "4th", "5th", "6th", "7th", "8th", "9th", "10th", "11th", "12th"];
const FORMATIONS: [&str; 5] = ["Infantry Division", "Fighter Wing", "Destroyer Squadron", "Space Wing", "Cyber Battalion"];
const GREEK: [&str; 12] =
    ["Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot", "Golf", "Hotel", "India", "Juliet", "Kilo", "Lima"];

/// Unit designations, one lexicon token each.
pub fn units() -> Vec<String> {
    FORMATIONS.iter().flat_map(|f| ORDINALS.iter().map(move |o| format!("{o} {f}"))).collect()
}

pub fn places() -> Vec<String> {
    GREEK.iter().map(|g| format!("Sector {g}")).collect()
}

pub fn codes() -> Vec<String> {
    (1..=16).map(|i| format!("Signal-{i:02}")).collect()
}

/// All single-token domain terms the generator uses.
pub fn lexicon_terms() -> Vec<String> {
    let mut v = units();
    v.extend(places());
    v.extend(codes());
    v.push("F-35A Lightning II".into());
    v.push("38th Parallel".into());
    v
}

fn domain_units(d: Domain) -> Vec<String> {
    ORDINALS.iter().map(|o| format!("{o} {}", FORMATIONS[d.index()])).collect()
}

const VERBS: [&str; 8] = ["moved toward", "secured", "reported contact near", "withdrew from", "held", "screened", "resupplied at", "observed"];
const DOMAIN_NOUNS: [[&str; 4]; 5] = [
    ["the ridge", "the river crossing", "the supply route", "the town"],
    ["the airfield", "the corridor", "the tanker track", "the radar site"],
    ["the strait", "the harbor", "the convoy lane", "the island"],
    ["the orbit", "the ground station", "the launch site", "the relay"],
    ["the network", "the gateway", "the data center", "the relay node"],
];
const ERAS: [&str; 4] = ["in the early period", "during the buildup", "after the ceasefire", "in the late period"];
const PRINCIPLES: [(&str, &str); 6] = [
    ("mission command", "commanders give intent and subordinates act with initiative"),
    ("unity of effort", "all forces work toward a common objective under one plan"),
    ("economy of force", "minimum force is allocated to secondary efforts"),
    ("security", "never permit the enemy to acquire an unexpected advantage"),
    ("surprise", "strike at a time or place the enemy does not expect"),
    ("law of armed conflict", "operations respect distinction and proportionality"),
];

/// Synthetic doctrine principles as (name, sentence).
pub fn doctrine_principles() -> Vec<(String, String)> {
    PRINCIPLES.iter().map(|(n, s)| (n.to_string(), s.to_string())).collect()
}

fn sentence(rng: &mut ChaCha8Rng, domain: Domain, day: u32, span: u32) -> String {
    let us = domain_units(domain);
    let unit = us.choose(rng).expect("non-empty");
    let verb = VERBS.choose(rng).expect("non-empty");
    let noun = DOMAIN_NOUNS[domain.index()].choose(rng).expect("non-empty");
    // era phrase follows the document date so dates carry signal
    let era = ERAS[((day as u64 * ERAS.len() as u64) / (span as u64 + 1)) as usize % ERAS.len()];
    match rng.gen_range(0..3) {
        0 => format!("The {unit} {verb} {noun} {era}."),
        1 => format!("{era}, the {unit} {verb} {noun}."),
        _ => format!("The {unit} {verb} {noun}."),
    }
}

/// Output of [`gen_synthetic_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub records: Vec<CorpusRecord>,
    pub probes: Vec<QaProbe>,
}

/// Deterministic corpus generation from a spec and seed.
pub fn gen_synthetic_corpus(spec: &CorpusSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total_w: f64 = spec.domain_weights.iter().sum();
    let span = spec.max_day - spec.min_day;
    let mut records = Vec::with_capacity(spec.n_docs);
    for i in 0..spec.n_docs {
        let mut r = rng.gen::<f64>() * total_w;
        let mut domain = Domain::Cyber;
        for (d, w) in Domain::ALL.iter().zip(spec.domain_weights) {
            if r < w {
                domain = *d;
                break;
            }
            r -= w;
        }
        let day = rng.gen_range(spec.min_day..=spec.max_day);
        let n = rng.gen_range(spec.min_sentences..=spec.max_sentences);
        let text = (0..n).map(|_| sentence(&mut rng, domain, day - spec.min_day, span)).collect::<Vec<_>>().join(" ");
        records.push(CorpusRecord { doc_id: format!("doc-{i:05}"), domain, temporal_index: day, text });
    }

    let (us, ps, cs) = (units(), places(), codes());
    let mut order: Vec<usize> = (0..us.len()).collect();
    order.shuffle(&mut rng);
    let mut probes = Vec::with_capacity(spec.n_probes);
    // one probe per unit keeps every answer unique for its question
    for &u in order.iter().take(spec.n_probes) {
        let p = rng.gen_range(0..ps.len());
        let code = &cs[rng.gen_range(0..cs.len())];
        let a = rng.gen_range(0..records.len());
        let mut b = rng.gen_range(0..records.len() - 1);
        if b >= a {
            b += 1;
        }
        records[a].text.push_str(&format!(" The {} is at {}.", us[u], ps[p]));
        records[b].text.push_str(&format!(" {} holds {}.", ps[p], code));
        probes.push(QaProbe {
            question: format!("Which signal serves the {}?", us[u]),
            supporting_doc_ids: [records[a].doc_id.clone(), records[b].doc_id.clone()],
            answer: code.clone(),
            question_tokens: None,
            answer_token: None,
        });
    }
    Ok(SyntheticCorpus { records, probes })
}

/// Default raw-text quality predicate: fewer than 5% non-printable characters.
pub fn ocr_quality_ok(text: &str) -> bool {
    let n = text.chars().count();
    if n == 0 {
        return true;
    }
    let bad = text.chars().filter(|c| c.is_control() && !matches!(c, '\n' | '\t' | '\r')).count();
    (bad as f64) / (n as f64) < 0.05
}

/// PII hook; the synthetic corpus carries none, so every text passes.
pub fn pii_free(_text: &str) -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small() -> CorpusSpec {
        CorpusSpec { n_docs: 40, n_probes: 10, ..CorpusSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic_corpus(&small(), 7).unwrap();
        let b = gen_synthetic_corpus(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_corpus(&small(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_probes_and_infeasible_specs() {
        let spec = CorpusSpec { n_probes: 0, ..small() };
        assert!(gen_synthetic_corpus(&spec, 1).unwrap().probes.is_empty());
        let bad = CorpusSpec { n_docs: 0, n_probes: 3, ..small() };
        assert!(matches!(gen_synthetic_corpus(&bad, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn probe_facts_live_in_distinct_documents() {
        let c = gen_synthetic_corpus(&small(), 3).unwrap();
        let by_id: HashMap<&str, &CorpusRecord> = c.records.iter().map(|r| (r.doc_id.as_str(), r)).collect();
        for p in &c.probes {
            let [a, b] = &p.supporting_doc_ids;
            assert_ne!(a, b);
            let unit = p.question.trim_start_matches("Which signal serves the ").trim_end_matches('?');
            let fact_a = &by_id[a.as_str()].text;
            let at = fact_a.find(&format!("The {unit} is at ")).expect("location fact planted");
            let place = fact_a[at..].split(" is at ").nth(1).unwrap().split('.').next().unwrap();
            assert!(by_id[b.as_str()].text.contains(&format!("{place} holds {}.", p.answer)));
        }
    }

    #[test]
    fn temporal_indices_in_range() {
        let spec = CorpusSpec { min_day: 100, max_day: 200, ..small() };
        let c = gen_synthetic_corpus(&spec, 5).unwrap();
        assert!(c.records.iter().all(|r| (100..=200).contains(&r.temporal_index)));
    }

    #[test]
    fn quality_predicate() {
        assert!(ocr_quality_ok("clean text\nwith lines"));
        assert!(!ocr_quality_ok("\u{1}\u{2}ab"));
    }
}

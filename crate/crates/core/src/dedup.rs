//! MinHash signatures, banded LSH near-duplicate removal, and perplexity
//! filtering.
//!
//! Shingles are lowercased character 5-grams by default. Each of the `k`
//! hash functions is a universal hash `(a·x + b) mod (2⁶¹ − 1)` over a
//! 64-bit FNV-1a fingerprint of the shingle.

use crate::corpus::DocumentSegment;
use crate::error::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};

const MERSENNE_61: u64 = (1 << 61) - 1;
pub const DEFAULT_SHINGLE_WIDTH: usize = 5;
pub const DEFAULT_NUM_HASHES: usize = 128;
pub const DEFAULT_BANDS: usize = 32;
pub const DEFAULT_ROWS_PER_BAND: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub k: usize,
    pub shingle_width: usize,
    pub values: Vec<u64>,
}

impl MinHashSignature {
    /// Fraction of coordinates on which two signatures agree.
    pub fn estimate_jaccard(&self, other: &MinHashSignature) -> f64 {
        let same = self.values.iter().zip(&other.values).filter(|(a, b)| a == b).count();
        same as f64 / self.k.max(1) as f64
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Avalanche mixer so structured inputs (e.g. consecutive integers) spread
/// over the field before the linear hash.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mod_mersenne(x: u128) -> u64 {
    let p = MERSENNE_61 as u128;
    let r = (x & p) + (x >> 61);
    let r = (r & p) + (r >> 61);
    (if r >= p { r - p } else { r }) as u64
}

/// A seeded family of `k` universal hash functions.
#[derive(Clone, Debug)]
pub struct MinHasher {
    coeffs: Vec<(u64, u64)>,
    shingle_width: usize,
}

impl MinHasher {
    pub fn new(k: usize, shingle_width: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            bail!(Config, "MinHash needs at least one hash function");
        }
        if shingle_width == 0 {
            bail!(Config, "shingle width must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..k).map(|_| (rng.gen_range(1..MERSENNE_61), rng.gen_range(0..MERSENNE_61))).collect();
        Ok(Self { coeffs, shingle_width })
    }

    pub fn k(&self) -> usize {
        self.coeffs.len()
    }

    /// Signature of an arbitrary set of shingle fingerprints.
    pub fn signature_of(&self, fingerprints: &HashSet<u64>) -> MinHashSignature {
        let mut values = vec![u64::MAX; self.coeffs.len()];
        for &x in fingerprints {
            let x = (mix64(x) % MERSENNE_61) as u128;
            for (v, &(a, b)) in values.iter_mut().zip(&self.coeffs) {
                let h = mod_mersenne(a as u128 * x + b as u128);
                if h < *v {
                    *v = h;
                }
            }
        }
        MinHashSignature { k: self.coeffs.len(), shingle_width: self.shingle_width, values }
    }

    pub fn signature(&self, text: &str) -> Result<MinHashSignature> {
        Ok(self.signature_of(&shingles(text, self.shingle_width)?))
    }
}

/// Fingerprints of the lowercased character `width`-grams of `text`.
pub fn shingles(text: &str, width: usize) -> Result<HashSet<u64>> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    if chars.len() < width {
        bail!(Input, "text of {} characters is shorter than shingle width {width}", chars.len());
    }
    let mut buf = String::new();
    Ok(chars
        .windows(width)
        .map(|w| {
            buf.clear();
            buf.extend(w);
            fnv1a(buf.as_bytes())
        })
        .collect())
}

/// Shingles, treating texts shorter than `width` as a single shingle.
fn shingles_lenient(text: &str, width: usize) -> HashSet<u64> {
    shingles(text, width).unwrap_or_else(|_| std::iter::once(fnv1a(text.to_lowercase().as_bytes())).collect())
}

pub fn jaccard(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

pub fn minhash_signature(seg: &DocumentSegment, k: usize, shingle_width: usize, seed: u64) -> Result<MinHashSignature> {
    MinHasher::new(k, shingle_width, seed)?.signature(&seg.raw_text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DedupLevel {
    Document,
    Paragraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub bands: usize,
    pub rows_per_band: usize,
    pub jaccard_threshold: f64,
    pub shingle_width: usize,
    pub level: DedupLevel,
    pub seed: u64,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            bands: DEFAULT_BANDS,
            rows_per_band: DEFAULT_ROWS_PER_BAND,
            jaccard_threshold: 0.8,
            shingle_width: DEFAULT_SHINGLE_WIDTH,
            level: DedupLevel::Document,
            seed: 0,
        }
    }
}

/// One removal: the dropped unit and the earlier unit it duplicated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub removed: String,
    pub kept: String,
    pub jaccard: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub candidate_pairs: usize,
    pub removals: Vec<Removal>,
}

/// Indices of items to drop: for each LSH candidate pair whose exact
/// Jaccard reaches the threshold, the later item goes unless it is already gone.
/// At threshold 1 the texts must also be byte-identical, since distinct
/// texts (differing in case or shingle multiplicity) can share a shingle set.
fn near_duplicates(
    texts: &[&str],
    sets: &[HashSet<u64>],
    hasher: &MinHasher,
    bands: usize,
    rows: usize,
    threshold: f64,
) -> (usize, Vec<(usize, usize, f64)>) {
    let sigs: Vec<MinHashSignature> = sets.iter().map(|s| hasher.signature_of(s)).collect();
    let mut candidates: BTreeSet<(usize, usize)> = BTreeSet::new();
    for band in 0..bands {
        let mut buckets: HashMap<&[u64], Vec<usize>> = HashMap::new();
        for (i, sig) in sigs.iter().enumerate() {
            buckets.entry(&sig.values[band * rows..(band + 1) * rows]).or_default().push(i);
        }
        for members in buckets.values() {
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    candidates.insert((i.min(j), i.max(j)));
                }
            }
        }
    }
    let mut dropped = vec![false; sets.len()];
    let mut out = Vec::new();
    // ascending (earlier, later) order makes the pass independent of bucket iteration
    for &(i, j) in &candidates {
        if dropped[i] || dropped[j] {
            continue;
        }
        let jac = jaccard(&sets[i], &sets[j]);
        if jac >= threshold && (threshold < 1.0 || texts[i] == texts[j]) {
            dropped[j] = true;
            out.push((j, i, jac));
        }
    }
    (candidates.len(), out)
}

/// Removes near-duplicate documents or paragraphs, keeping the earlier one.
pub fn lsh_dedup(segments: &[DocumentSegment], cfg: &DedupConfig) -> Result<(Vec<DocumentSegment>, DedupReport)> {
    if cfg.bands == 0 || cfg.rows_per_band == 0 {
        bail!(Config, "band geometry must be positive");
    }
    if !(0.0..=1.0).contains(&cfg.jaccard_threshold) {
        bail!(Config, "Jaccard threshold {} outside [0, 1]", cfg.jaccard_threshold);
    }
    let hasher = MinHasher::new(cfg.bands * cfg.rows_per_band, cfg.shingle_width, cfg.seed)?;
    dedup_with(segments, &hasher, cfg)
}

/// As [`lsh_dedup`] with an explicit hasher whose `k` must equal `bands × rows_per_band`.
pub fn dedup_with(
    segments: &[DocumentSegment],
    hasher: &MinHasher,
    cfg: &DedupConfig,
) -> Result<(Vec<DocumentSegment>, DedupReport)> {
    if cfg.bands * cfg.rows_per_band != hasher.k() {
        bail!(Config, "{} bands x {} rows does not match k = {}", cfg.bands, cfg.rows_per_band, hasher.k());
    }
    match cfg.level {
        DedupLevel::Document => {
            let sets: Vec<HashSet<u64>> = segments.iter().map(|s| shingles_lenient(&s.raw_text, cfg.shingle_width)).collect();
            let texts: Vec<&str> = segments.iter().map(|s| s.raw_text.as_str()).collect();
            let (candidate_pairs, found) = near_duplicates(&texts, &sets, hasher, cfg.bands, cfg.rows_per_band, cfg.jaccard_threshold);
            let mut drop = vec![false; segments.len()];
            let mut removals = Vec::new();
            for (j, i, jac) in found {
                drop[j] = true;
                removals.push(Removal { removed: segments[j].doc_id.clone(), kept: segments[i].doc_id.clone(), jaccard: jac });
            }
            let kept = segments.iter().zip(&drop).filter(|(_, d)| !**d).map(|(s, _)| s.clone()).collect();
            Ok((kept, DedupReport { candidate_pairs, removals }))
        }
        DedupLevel::Paragraph => {
            let mut owners = Vec::new();
            let mut texts = Vec::new();
            let mut sets = Vec::new();
            for (si, s) in segments.iter().enumerate() {
                for (pi, para) in s.raw_text.split("\n\n").enumerate() {
                    owners.push((si, pi));
                    texts.push(para);
                    sets.push(shingles_lenient(para, cfg.shingle_width));
                }
            }
            let (candidate_pairs, found) = near_duplicates(&texts, &sets, hasher, cfg.bands, cfg.rows_per_band, cfg.jaccard_threshold);
            let mut drop: HashSet<(usize, usize)> = HashSet::new();
            let mut removals = Vec::new();
            for (j, i, jac) in found {
                drop.insert(owners[j]);
                let name = |(s, p): (usize, usize)| format!("{}#{}", segments[s].doc_id, p);
                removals.push(Removal { removed: name(owners[j]), kept: name(owners[i]), jaccard: jac });
            }
            let mut kept = Vec::new();
            for (si, s) in segments.iter().enumerate() {
                let paras: Vec<&str> = s
                    .raw_text
                    .split("\n\n")
                    .enumerate()
                    .filter(|(pi, _)| !drop.contains(&(si, *pi)))
                    .map(|(_, p)| p)
                    .collect();
                if paras.is_empty() {
                    continue;
                }
                let mut seg = s.clone();
                seg.raw_text = paras.join("\n\n");
                if seg.raw_text != s.raw_text {
                    seg.tokens.clear();
                }
                kept.push(seg);
            }
            Ok((kept, DedupReport { candidate_pairs, removals }))
        }
    }
}

/// Anything that can assign per-token negative log-likelihoods to a sequence.
pub trait TokenScorer {
    /// Natural-log NLL of each predicted token of `tokens`.
    fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>>;

    fn perplexity(&self, tokens: &[usize]) -> Result<f64> {
        let nll = self.token_nlls(tokens)?;
        if nll.is_empty() {
            bail!(Input, "perplexity of a sequence with no predicted tokens");
        }
        Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
    }
}

/// Uniform distribution over a vocabulary of `vocab` tokens.
#[derive(Clone, Copy, Debug)]
pub struct UniformScorer {
    pub vocab: usize,
}

impl TokenScorer for UniformScorer {
    fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![(self.vocab as f64).ln(); tokens.len()])
    }
}

/// Keeps segments whose perplexity under `scorer` is at most `max_perplexity`.
pub fn perplexity_filter<S: TokenScorer + ?Sized>(
    segments: &[DocumentSegment],
    scorer: &S,
    max_perplexity: f64,
) -> Result<Vec<DocumentSegment>> {
    let mut kept = Vec::new();
    for s in segments {
        if scorer.perplexity(&s.tokens)? <= max_perplexity {
            kept.push(s.clone());
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;

    fn seg(id: &str, text: &str) -> DocumentSegment {
        DocumentSegment {
            doc_id: id.into(),
            domain: Domain::Land,
            temporal_index: 0,
            tokens: text.bytes().map(|b| b as usize).collect(),
            raw_text: text.into(),
        }
    }

    #[test]
    fn identical_texts_identical_signatures() {
        let h = MinHasher::new(64, 5, 9).unwrap();
        assert_eq!(h.signature("The brigade held the ridge").unwrap(), h.signature("the brigade held the ridge").unwrap());
        assert!(matches!(h.signature("abc"), Err(crate::Error::Input(_))));
    }

    #[test]
    fn disjoint_sets_rarely_collide() {
        let h = MinHasher::new(256, 5, 1).unwrap();
        let a: HashSet<u64> = (0..200).collect();
        let b: HashSet<u64> = (1000..1200).collect();
        let est = h.signature_of(&a).estimate_jaccard(&h.signature_of(&b));
        assert!(est < 0.03, "{est}");
    }

    #[test]
    fn one_third_overlap() {
        // |A ∩ B| = 100, |A ∪ B| = 300
        let h = MinHasher::new(256, 5, 0).unwrap();
        let a: HashSet<u64> = (0..200).collect();
        let b: HashSet<u64> = (100..300).collect();
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let est = h.signature_of(&a).estimate_jaccard(&h.signature_of(&b));
        assert!((est - 1.0 / 3.0).abs() < 0.06, "{est}");
    }

    #[test]
    fn exact_duplicate_removed_original_kept() {
        let docs = vec![
            seg("a", "the armored brigade secured the river crossing at dawn"),
            seg("b", "fighter wing screened the tanker track through the night"),
            seg("c", "the armored brigade secured the river crossing at dawn"),
        ];
        let (kept, report) = lsh_dedup(&docs, &DedupConfig::default()).unwrap();
        let ids: Vec<&str> = kept.iter().map(|s| s.doc_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(report.removals[0].removed, "c");
        assert_eq!(report.removals[0].kept, "a");
    }

    #[test]
    fn paragraph_level_removes_repeat_once() {
        let shared = "the convoy lane was closed by mines for three days";
        let docs = vec![
            seg("a", &format!("orbit relay lost contact briefly\n\n{shared}")),
            seg("b", &format!("{shared}\n\nthe gateway was patched overnight")),
            seg("c", "the harbor pilots resumed work"),
        ];
        let cfg = DedupConfig { level: DedupLevel::Paragraph, ..DedupConfig::default() };
        let (kept, report) = lsh_dedup(&docs, &cfg).unwrap();
        assert_eq!(report.removals.len(), 1);
        assert_eq!(report.removals[0].removed, "b#0");
        assert_eq!(kept[1].raw_text, "the gateway was patched overnight");
        assert_eq!(kept[0].raw_text, docs[0].raw_text);
    }

    #[test]
    fn inconsistent_geometry_is_a_config_error() {
        let h = MinHasher::new(100, 5, 0).unwrap();
        let r = dedup_with(&[seg("a", "hello world")], &h, &DedupConfig::default());
        assert!(matches!(r, Err(crate::Error::Config(_))));
    }

    #[test]
    fn perplexity_filter_bounds() {
        let docs = vec![seg("a", "abc"), seg("b", "defg")];
        let u = UniformScorer { vocab: 50 };
        assert_eq!(perplexity_filter(&docs, &u, f64::INFINITY).unwrap().len(), 2);
        assert_eq!(perplexity_filter(&docs, &u, 0.99).unwrap().len(), 0);
        assert_eq!(perplexity_filter(&docs, &u, 50.0 - 1e-6).unwrap().len(), 0);
        assert_eq!(perplexity_filter(&docs, &u, 50.0 + 1e-6).unwrap().len(), 2);
    }
}

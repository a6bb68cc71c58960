//! Character-level byte-pair encoding with a single-token domain lexicon.
//!
//! Encoding first splits text on lexicon terms (longest match wins), then
//! runs ranked BPE merges inside each whitespace-delimited piece of the
//! remaining text. Characters outside the alphabet map to `<unk>`.

use crate::error::{bail, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const UNK: usize = 0;
pub const EOS: usize = 1;
const SPECIALS: [&str; 2] = ["<unk>", "<eos>"];
const UNK_TEXT: &str = "\u{FFFD}";
const FORMAT_NAME: &str = "stratlab-vocab";
const FORMAT_VERSION: u32 = 1;

/// Printable ASCII plus tab and newline; always part of the alphabet.
fn base_alphabet() -> Vec<char> {
    let mut chars: Vec<char> = (0x20u8..=0x7e).map(char::from).collect();
    chars.push('\t');
    chars.push('\n');
    chars
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    /// id → string for specials, alphabet characters and merged symbols.
    tokens: Vec<String>,
    alphabet_len: usize,
    merges: Vec<(usize, usize)>,
    /// (left, right) → (rank, merged id)
    merge_rank: HashMap<(usize, usize), (usize, usize)>,
    char_id: HashMap<char, usize>,
    lexicon: Vec<String>,
    /// first char → (term, id), longest first
    lexicon_index: HashMap<char, Vec<(String, usize)>>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    version: u32,
    specials: Vec<String>,
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    lexicon: Vec<String>,
}

impl Vocabulary {
    fn with_alphabet(alphabet: Vec<char>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut char_id = HashMap::new();
        for c in &alphabet {
            char_id.insert(*c, tokens.len());
            tokens.push(c.to_string());
        }
        Self {
            tokens,
            alphabet_len: alphabet.len(),
            merges: Vec::new(),
            merge_rank: HashMap::new(),
            char_id,
            lexicon: Vec::new(),
            lexicon_index: HashMap::new(),
        }
    }

    /// Alphabet-only vocabulary with no merges.
    pub fn character_level() -> Self {
        Self::with_alphabet(base_alphabet())
    }

    fn push_merge(&mut self, a: usize, b: usize) -> usize {
        let id = self.tokens.len();
        let s = format!("{}{}", self.tokens[a], self.tokens[b]);
        self.tokens.push(s);
        self.merge_rank.insert((a, b), (self.merges.len(), id));
        self.merges.push((a, b));
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len() + self.lexicon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alphabet_len(&self) -> usize {
        self.alphabet_len
    }

    pub fn merges(&self) -> Vec<(String, String)> {
        self.merges
            .iter()
            .map(|&(a, b)| (self.tokens[a].clone(), self.tokens[b].clone()))
            .collect()
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    /// Id of a lexicon term, if present.
    pub fn lexicon_id(&self, term: &str) -> Option<usize> {
        self.lexicon.iter().position(|t| t == term).map(|i| self.tokens.len() + i)
    }

    pub fn token_str(&self, id: usize) -> Result<&str> {
        if id < self.tokens.len() {
            Ok(if id == UNK {
                UNK_TEXT
            } else if id == EOS {
                ""
            } else {
                &self.tokens[id]
            })
        } else if let Some(t) = self.lexicon.get(id - self.tokens.len()) {
            Ok(t)
        } else {
            bail!(Index, "token id {id} outside vocabulary of {}", self.len())
        }
    }

    /// Adds each new term as one fresh id; known terms are ignored.
    pub fn extend_lexicon<S: AsRef<str>>(&mut self, terms: &[S]) -> Result<()> {
        for term in terms {
            let term = term.as_ref();
            let Some(first) = term.chars().next() else {
                bail!(Input, "lexicon terms must be non-empty");
            };
            if self.lexicon.iter().any(|t| t == term) {
                continue;
            }
            let id = self.tokens.len() + self.lexicon.len();
            self.lexicon.push(term.to_string());
            let bucket = self.lexicon_index.entry(first).or_default();
            bucket.push((term.to_string(), id));
            bucket.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Ok(())
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut gap_start = 0;
        let mut pos = 0;
        while pos < text.len() {
            let c = text[pos..].chars().next().expect("pos is a char boundary");
            if let Some(bucket) = self.lexicon_index.get(&c) {
                if let Some((term, id)) = bucket.iter().find(|(t, _)| text[pos..].starts_with(t.as_str())) {
                    self.encode_plain(&text[gap_start..pos], &mut out);
                    out.push(*id);
                    pos += term.len();
                    gap_start = pos;
                    continue;
                }
            }
            pos += c.len_utf8();
        }
        self.encode_plain(&text[gap_start..], &mut out);
        out
    }

    fn encode_plain(&self, text: &str, out: &mut Vec<usize>) {
        for piece in pieces(text) {
            let mut ids: Vec<usize> = piece.chars().map(|c| *self.char_id.get(&c).unwrap_or(&UNK)).collect();
            loop {
                let best = ids
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, w)| self.merge_rank.get(&(w[0], w[1])).map(|&(r, id)| (r, i, id)))
                    .min();
                let Some((rank, _, id)) = best else { break };
                let (a, b) = self.merges[rank];
                let mut merged = Vec::with_capacity(ids.len());
                let mut i = 0;
                while i < ids.len() {
                    if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                        merged.push(id);
                        i += 2;
                    } else {
                        merged.push(ids[i]);
                        i += 1;
                    }
                }
                ids = merged;
            }
            out.extend(ids);
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            s.push_str(self.token_str(id)?);
        }
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        let alphabet: Vec<char> = self.tokens[SPECIALS.len()..SPECIALS.len() + self.alphabet_len]
            .iter()
            .map(|s| s.chars().next().expect("alphabet tokens are single chars"))
            .collect();
        let file = VocabFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
            alphabet,
            merges: self.merges(),
            lexicon: self.lexicon.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
            bail!(Format, "unsupported vocabulary format {} v{}", file.format, file.version);
        }
        let mut vocab = Self::with_alphabet(file.alphabet);
        let mut by_str: HashMap<String, usize> =
            vocab.tokens.iter().enumerate().skip(SPECIALS.len()).map(|(i, t)| (t.clone(), i)).collect();
        for (a, b) in file.merges {
            let (Some(&ia), Some(&ib)) = (by_str.get(&a), by_str.get(&b)) else {
                bail!(Format, "merge ({a:?}, {b:?}) references unknown symbols");
            };
            let id = vocab.push_merge(ia, ib);
            by_str.entry(vocab.tokens[id].clone()).or_insert(id);
        }
        vocab.extend_lexicon(&file.lexicon)?;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Splits before each whitespace run that follows non-whitespace, so
/// pieces look like `"word"`, `" word"`, `"  word"`.
fn pieces(text: &str) -> impl Iterator<Item = &str> {
    let mut bounds = vec![0];
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws {
            bounds.push(i);
        }
        prev_ws = ws;
    }
    bounds.push(text.len());
    bounds.dedup();
    (0..bounds.len().saturating_sub(1)).map(move |k| &text[bounds[k]..bounds[k + 1]])
}

/// Greedy BPE training: repeatedly merges the most frequent adjacent pair
/// (ties go to the lexicographically smaller pair) until the alphabet plus
/// merges reaches `target_vocab` or no pair occurs twice.
///
/// The result contains no lexicon terms; add them with
/// [`Vocabulary::extend_lexicon`], which assigns ids after all BPE tokens.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<Vocabulary> {
    if corpus.iter().all(|s| s.as_ref().is_empty()) {
        bail!(Input, "cannot train BPE on an empty corpus");
    }
    let mut alphabet = base_alphabet();
    let mut extra: Vec<char> = corpus
        .iter()
        .flat_map(|s| s.as_ref().chars())
        .filter(|c| !alphabet.contains(c))
        .collect();
    extra.sort_unstable();
    extra.dedup();
    alphabet.extend(extra);
    if target_vocab < alphabet.len() {
        bail!(Config, "target vocabulary {target_vocab} is smaller than the alphabet ({})", alphabet.len());
    }
    let mut vocab = Vocabulary::with_alphabet(alphabet);

    let mut piece_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in corpus {
        for p in pieces(s.as_ref()) {
            *piece_counts.entry(p).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<usize>, usize)> = piece_counts
        .into_iter()
        .map(|(p, n)| (p.chars().map(|c| vocab.char_id[&c]).collect(), n))
        .collect();

    while vocab.alphabet_len + vocab.merges.len() < target_vocab {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for (w, n) in &words {
            for pair in w.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += n;
            }
        }
        let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                // smaller pair wins ties, so reverse the lexicographic order
                let ka = (&vocab.tokens[pa.0], &vocab.tokens[pa.1]);
                let kb = (&vocab.tokens[pb.0], &vocab.tokens[pb.1]);
                kb.cmp(&ka)
            })
        });
        let Some(((a, b), count)) = best else { break };
        if count < 2 {
            break;
        }
        let id = vocab.push_merge(a, b);
        for (w, _) in &mut words {
            let mut i = 0;
            let mut merged = Vec::with_capacity(w.len());
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(w[i]);
                    i += 1;
                }
            }
            *w = merged;
        }
    }
    Ok(vocab)
}

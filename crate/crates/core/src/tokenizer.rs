//! Byte-level BPE: training, encoding, decoding, serialization and
//! per-language fertility.
//!
//! Text is cut into chunks before any pair counting. A chunk is a run of
//! whitespace followed by one whitespace-free word (`" verden"`), so merges
//! never span two words and every word owns at least one token. A run of
//! whitespace at the very end of a text forms its own chunk.
//!
//! Ids `0..256` are the raw bytes, `256..256 + merges` the merge outputs in
//! training order, and the special markers come last.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::Document;
use crate::error::{Error, Result};

pub const BYTE_ALPHABET: usize = 256;
pub const BOS: &str = "<bos>";
pub const MASK: &str = "<mask>";
pub const PAD: &str = "<pad>";
pub const DEFAULT_SPECIALS: [&str; 3] = [BOS, MASK, PAD];

const FORMAT_HEADER: &str = "langadapt-bpe";
const FORMAT_VERSION: u32 = 1;

pub fn is_whitespace(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Splits `text` into pre-tokenization chunks (leading whitespace + word).
pub fn chunks(text: &[u8]) -> Chunks<'_> {
    Chunks { text, pos: 0 }
}

pub struct Chunks<'a> {
    text: &'a [u8],
    pos: usize,
}

impl<'a> Iterator for Chunks<'a> {
    type Item = &'a [u8];

    fn next(&mut self) -> Option<&'a [u8]> {
        let t = self.text;
        if self.pos >= t.len() {
            return None;
        }
        let start = self.pos;
        let mut i = start;
        while i < t.len() && is_whitespace(t[i]) {
            i += 1;
        }
        while i < t.len() && !is_whitespace(t[i]) {
            i += 1;
        }
        self.pos = i;
        Some(&t[start..i])
    }
}

/// Number of whitespace-delimited words in `text`.
pub fn word_count(text: &[u8]) -> usize {
    text.split(|&b| is_whitespace(b))
        .filter(|w| !w.is_empty())
        .count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(u32, u32)>,
    specials: Vec<String>,
    token_bytes: Vec<Vec<u8>>,
    merge_rank: HashMap<(u32, u32), u32>,
    bytes_to_id: HashMap<Vec<u8>, u32>,
}

impl BpeModel {
    /// Builds a model from an explicit merge list. Every merge input must be
    /// a byte or the output of an earlier merge.
    pub fn from_merges(merges: Vec<(u32, u32)>, specials: Vec<String>) -> Result<Self> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = token_bytes.len() as u32;
            if l >= next || r >= next {
                return Err(Error::format(
                    "tokenizer",
                    format!("merge {rank} ({l}, {r}) references a symbol not yet defined"),
                ));
            }
            if merge_rank.insert((l, r), rank as u32).is_some() {
                return Err(Error::format(
                    "tokenizer",
                    format!("merge {rank} ({l}, {r}) is listed twice"),
                ));
            }
            let mut bytes = token_bytes[l as usize].clone();
            bytes.extend_from_slice(&token_bytes[r as usize]);
            token_bytes.push(bytes);
        }
        let mut seen = HashSet::new();
        for s in &specials {
            if s.is_empty() || s.contains(['\n', '\r']) {
                return Err(Error::format("tokenizer", format!("invalid special marker {s:?}")));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::format("tokenizer", format!("duplicate special marker {s:?}")));
            }
        }
        let mut bytes_to_id = HashMap::with_capacity(token_bytes.len());
        for (id, b) in token_bytes.iter().enumerate() {
            bytes_to_id.entry(b.clone()).or_insert(id as u32);
        }
        Ok(BpeModel {
            merges,
            specials,
            token_bytes,
            merge_rank,
            bytes_to_id,
        })
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_ALPHABET + self.merges.len() + self.specials.len()
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|s| s == name)
            .map(|i| (BYTE_ALPHABET + self.merges.len() + i) as u32)
    }

    pub fn bos_id(&self) -> Option<u32> {
        self.special_id(BOS)
    }

    pub fn mask_id(&self) -> Option<u32> {
        self.special_id(MASK)
    }

    pub fn pad_id(&self) -> Option<u32> {
        self.special_id(PAD)
    }

    /// Name of the special marker with this id, if it is one.
    pub fn special_name(&self, id: u32) -> Option<&str> {
        let first = BYTE_ALPHABET + self.merges.len();
        (id as usize)
            .checked_sub(first)
            .and_then(|i| self.specials.get(i))
            .map(String::as_str)
    }

    /// Byte string of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    /// Lowest id whose byte string is exactly `bytes`.
    pub fn id_of_bytes(&self, bytes: &[u8]) -> Option<u32> {
        self.bytes_to_id.get(bytes).copied()
    }

    pub fn encode(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len());
        for chunk in chunks(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank as usize];
            let new_id = (BYTE_ALPHABET as u32) + rank;
            apply_merge(&mut symbols, l, r, new_id);
        }
        out.extend_from_slice(&symbols);
    }

    /// Concatenates token byte strings; special markers decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let vocab_size = self.vocab_size();
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            if (id as usize) >= vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab_size });
            }
            if let Some(bytes) = self.token_bytes.get(id as usize) {
                out.extend_from_slice(bytes);
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER} {FORMAT_VERSION}");
        let _ = writeln!(s, "specials {}", self.specials.len());
        for sp in &self.specials {
            let _ = writeln!(s, "{sp}");
        }
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::format("tokenizer", reason);
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| {
            lines
                .next()
                .ok_or_else(|| bad(format!("unexpected end of file, expected {expect}")))
        };
        let (_, header) = next("header")?;
        let version = header
            .strip_prefix(FORMAT_HEADER)
            .map(str::trim)
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = |line: (usize, &str), key: &str| -> Result<usize> {
            line.1
                .strip_prefix(key)
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| bad(format!("line {}: expected `{key} <count>`", line.0 + 1)))
        };
        let n_specials = count(next("specials")?, "specials")?;
        let mut specials = Vec::with_capacity(n_specials);
        for _ in 0..n_specials {
            specials.push(next("special marker")?.1.to_string());
        }
        let n_merges = count(next("merges")?, "merges")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (no, line) = next("merge")?;
            let mut parts = line.split_whitespace().map(str::parse::<u32>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(l)), Some(Ok(r)), None) => merges.push((l, r)),
                _ => return Err(bad(format!("line {}: expected `<left> <right>`", no + 1))),
            }
        }
        if let Some((no, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(bad(format!("line {}: trailing content {extra:?}", no + 1)));
        }
        BpeModel::from_merges(merges, specials)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_text(&text).map_err(|e| e.in_file(path))
    }
}

/// Replaces non-overlapping `(l, r)` occurrences left to right.
fn apply_merge(symbols: &mut Vec<u32>, l: u32, r: u32, new_id: u32) {
    let mut write = 0;
    let mut read = 0;
    while read < symbols.len() {
        if read + 1 < symbols.len() && symbols[read] == l && symbols[read + 1] == r {
            symbols[write] = new_id;
            read += 2;
        } else {
            symbols[write] = symbols[read];
            read += 1;
        }
        write += 1;
    }
    symbols.truncate(write);
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    // Max-heap: higher count wins, then the lexicographically smaller left
    // symbol, then the smaller right symbol, then smaller ids.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn count_chunks<T: AsRef<[u8]> + Sync>(corpus: &[T]) -> HashMap<Vec<u8>, u64> {
    corpus
        .par_iter()
        .fold(HashMap::new, |mut acc: HashMap<Vec<u8>, u64>, doc| {
            for c in chunks(doc.as_ref()) {
                *acc.entry(c.to_vec()).or_default() += 1;
            }
            acc
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        })
}

/// Trains a byte-level BPE model with `vocab_size` total entries (bytes,
/// merges and specials). Training stops early when no adjacent pair occurs
/// at least twice.
pub fn train_bpe<T: AsRef<[u8]> + Sync>(
    corpus: &[T],
    vocab_size: usize,
    specials: &[&str],
) -> Result<BpeModel> {
    let minimum = BYTE_ALPHABET + specials.len();
    if vocab_size <= minimum {
        return Err(Error::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }
    if corpus.iter().all(|d| d.as_ref().is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let target_merges = vocab_size - minimum;

    let mut chunk_counts: Vec<(Vec<u8>, u64)> = count_chunks(corpus).into_iter().collect();
    chunk_counts.sort_unstable();
    let mut words: Vec<Vec<u32>> = Vec::with_capacity(chunk_counts.len());
    let mut freqs: Vec<u64> = Vec::with_capacity(chunk_counts.len());
    for (bytes, n) in chunk_counts {
        words.push(bytes.iter().map(|&b| b as u32).collect());
        freqs.push(n);
    }

    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += freqs[wi];
            pair_words.entry(pair).or_default().insert(wi);
        }
    }

    let candidate = |pair: (u32, u32), count: u64, tb: &[Vec<u8>]| Candidate {
        count,
        left: tb[pair.0 as usize].clone(),
        right: tb[pair.1 as usize].clone(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&pair, &count)| candidate(pair, count, &token_bytes))
        .collect();

    let mut merges = Vec::with_capacity(target_merges);
    while merges.len() < target_merges {
        let Some(top) = heap.pop() else { break };
        if pair_counts.get(&top.pair).copied() != Some(top.count) {
            continue;
        }
        if top.count < 2 {
            break;
        }
        let (l, r) = top.pair;
        let new_id = token_bytes.len() as u32;
        let mut bytes = token_bytes[l as usize].clone();
        bytes.extend_from_slice(&token_bytes[r as usize]);
        token_bytes.push(bytes);
        merges.push(top.pair);

        let mut affected: Vec<usize> = pair_words
            .remove(&top.pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let f = freqs[wi];
            let word = &mut words[wi];
            for p in word.windows(2) {
                let pair = (p[0], p[1]);
                if let Some(c) = pair_counts.get_mut(&pair) {
                    *c -= f;
                    if *c == 0 {
                        pair_counts.remove(&pair);
                    }
                }
                if let Some(set) = pair_words.get_mut(&pair) {
                    set.remove(&wi);
                }
                touched.insert(pair);
            }
            apply_merge(word, l, r, new_id);
            for p in word.windows(2) {
                let pair = (p[0], p[1]);
                *pair_counts.entry(pair).or_default() += f;
                pair_words.entry(pair).or_default().insert(wi);
                touched.insert(pair);
            }
        }
        pair_words.retain(|_, s| !s.is_empty());
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for pair in touched {
            if let Some(&count) = pair_counts.get(&pair) {
                heap.push(candidate(pair, count, &token_bytes));
            }
        }
    }

    BpeModel::from_merges(merges, specials.iter().map(|s| s.to_string()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LanguageFertility {
    pub token_count: usize,
    pub word_count: usize,
    pub split_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FertilityReport {
    pub languages: BTreeMap<String, LanguageFertility>,
}

impl FertilityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lang,token_count,word_count,split_ratio\n");
        for (lang, f) in &self.languages {
            let _ = writeln!(
                s,
                "{lang},{},{},{:.6}",
                f.token_count, f.word_count, f.split_ratio
            );
        }
        s
    }
}

/// Tokens per whitespace-delimited word, per language label.
pub fn fertility(model: &BpeModel, corpus: &[Document]) -> Result<FertilityReport> {
    let mut totals: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for doc in corpus {
        let bytes = doc.text.as_bytes();
        let entry = totals.entry(doc.lang.clone()).or_default();
        entry.0 += model.encode(bytes).len();
        entry.1 += word_count(bytes);
    }
    let languages: BTreeMap<_, _> = totals
        .into_iter()
        .filter(|(_, (_, words))| *words > 0)
        .map(|(lang, (tokens, words))| {
            let f = LanguageFertility {
                token_count: tokens,
                word_count: words,
                split_ratio: tokens as f64 / words as f64,
            };
            (lang, f)
        })
        .collect();
    if languages.is_empty() {
        return Err(Error::NoWords);
    }
    Ok(FertilityReport { languages })
}

//! Data-constrained mixture planning and deterministic batch streams.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tokenizer::BpeModel;

/// Repetition cap used when a plan does not say otherwise.
pub const DEFAULT_MAX_REPETITIONS: u32 = 16;
/// Up to this many passes over the same data are treated as harmless.
pub const HARMLESS_REPETITIONS: f64 = 4.0;
/// Beyond this many passes returns degrade sharply.
pub const TOLERATED_REPETITIONS: f64 = 16.0;

/// Tokens-per-parameter band considered compute-optimal.
pub const NEAR_OPTIMAL_RATIO: (f64, f64) = (15.0, 25.0);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub lang: String,
    pub text: String,
}

impl Document {
    pub fn new(lang: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            lang: lang.into(),
            text: text.into(),
        }
    }
}

/// Parses `<lang>\t<text>` lines. Blank lines are skipped.
pub fn parse_labeled_corpus(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (lang, body) = line.split_once('\t').ok_or_else(|| {
            Error::format("labeled corpus", format!("line {}: missing tab separator", no + 1))
        })?;
        if lang.is_empty() || lang.contains(char::is_whitespace) {
            return Err(Error::format(
                "labeled corpus",
                format!("line {}: bad language code {lang:?}", no + 1),
            ));
        }
        docs.push(Document::new(lang, body));
    }
    Ok(docs)
}

pub fn read_labeled_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_labeled_corpus(&text).map_err(|e| e.in_file(path))
}

/// Tokenizes documents and packs them per language, each document preceded
/// by the begin-of-text marker when the tokenizer defines one.
pub fn pack_by_language(model: &BpeModel, docs: &[Document]) -> BTreeMap<String, Vec<u32>> {
    let bos = model.bos_id();
    let mut out: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for doc in docs {
        let ids = out.entry(doc.lang.clone()).or_default();
        if let Some(b) = bos {
            ids.push(b);
        }
        ids.extend(model.encode(doc.text.as_bytes()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LanguageSlice {
    pub lang: String,
    pub raw_tokens: u64,
    pub priority: u32,
}

impl LanguageSlice {
    pub fn new(lang: impl Into<String>, raw_tokens: u64, priority: u32) -> Self {
        LanguageSlice {
            lang: lang.into(),
            raw_tokens,
            priority,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceAllocation {
    pub lang: String,
    pub raw_tokens: u64,
    pub priority: u32,
    pub effective_tokens: u64,
    pub upsample_factor: f64,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixturePlan {
    /// Allocations in priority order.
    pub slices: Vec<SliceAllocation>,
    pub budget_tokens: u64,
    pub max_repetitions: u32,
    pub unmet_tokens: u64,
}

impl MixturePlan {
    pub fn allocated_tokens(&self) -> u64 {
        self.slices.iter().map(|s| s.effective_tokens).sum()
    }

    pub fn slice(&self, lang: &str) -> Option<&SliceAllocation> {
        self.slices.iter().find(|s| s.lang == lang)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("# langadapt mixture plan v1\n");
        let _ = writeln!(
            s,
            "# budget_tokens={} max_repetitions={} unmet_tokens={}",
            self.budget_tokens, self.max_repetitions, self.unmet_tokens
        );
        s.push_str("lang\traw\tfactor\teffective\tproportion\tpriority\n");
        for a in &self.slices {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                a.lang, a.raw_tokens, a.upsample_factor, a.effective_tokens, a.proportion, a.priority
            );
        }
        s
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let bad = |r: String| Error::format("mixture plan", r);
        let mut lines = text.lines();
        if lines.next() != Some("# langadapt mixture plan v1") {
            return Err(bad("missing header".into()));
        }
        let globals = lines.next().ok_or_else(|| bad("missing globals".into()))?;
        let mut kv = BTreeMap::new();
        for part in globals.trim_start_matches('#').split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("bad global {part:?}")))?;
            let v: u64 = v.parse().map_err(|_| bad(format!("bad value {part:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        let budget_tokens = get("budget_tokens")?;
        let max_repetitions = u32::try_from(get("max_repetitions")?)
            .map_err(|_| bad("max_repetitions out of range".into()))?;
        let unmet_tokens = get("unmet_tokens")?;
        lines.next();
        let mut slices = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(format!("expected 6 columns in {line:?}")));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("bad count {s:?}")));
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            slices.push(SliceAllocation {
                lang: f[0].to_string(),
                raw_tokens: num(f[1])?,
                upsample_factor: float(f[2])?,
                effective_tokens: num(f[3])?,
                proportion: float(f[4])?,
                priority: num(f[5])? as u32,
            });
        }
        Ok(MixturePlan {
            slices,
            budget_tokens,
            max_repetitions,
            unmet_tokens,
        })
    }
}

/// Parses a slice list: one `<lang>\t<raw_tokens>\t<priority>` per line,
/// `#` comments allowed.
pub fn parse_slices(text: &str) -> Result<Vec<LanguageSlice>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(no, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let parsed = match f.as_slice() {
                [lang, raw, prio] => raw
                    .parse::<f64>()
                    .ok()
                    .zip(prio.parse::<u32>().ok())
                    .map(|(r, p)| LanguageSlice::new(*lang, r as u64, p)),
                _ => None,
            };
            parsed.ok_or_else(|| {
                Error::format(
                    "slice list",
                    format!("line {}: expected `<lang> <raw_tokens> <priority>`", no + 1),
                )
            })
        })
        .collect()
}

/// Fills the budget slice by slice in priority order, each slice taking at
/// most `raw × max_repetitions` tokens.
pub fn plan_mixture(
    slices: &[LanguageSlice],
    budget_tokens: u64,
    max_repetitions: u32,
) -> Result<MixturePlan> {
    if slices.is_empty() {
        return Err(Error::invalid("mixture", "no language slices"));
    }
    if budget_tokens == 0 {
        return Err(Error::invalid("mixture", "token budget is zero"));
    }
    if max_repetitions == 0 {
        return Err(Error::invalid("mixture", "max_repetitions must be at least 1"));
    }
    let mut seen = HashSet::new();
    for s in slices {
        if s.raw_tokens == 0 {
            return Err(Error::invalid("mixture", format!("slice {} has no tokens", s.lang)));
        }
        if !seen.insert(s.lang.as_str()) {
            return Err(Error::invalid("mixture", format!("duplicate language {}", s.lang)));
        }
    }
    let mut ordered: Vec<&LanguageSlice> = slices.iter().collect();
    ordered.sort_by_key(|s| s.priority);

    let mut remaining = budget_tokens;
    let mut allocs: Vec<SliceAllocation> = ordered
        .into_iter()
        .map(|s| {
            let cap = s.raw_tokens.saturating_mul(max_repetitions as u64);
            let effective = remaining.min(cap);
            remaining -= effective;
            SliceAllocation {
                lang: s.lang.clone(),
                raw_tokens: s.raw_tokens,
                priority: s.priority,
                effective_tokens: effective,
                upsample_factor: effective as f64 / s.raw_tokens as f64,
                proportion: 0.0,
            }
        })
        .collect();
    let allocated: u64 = allocs.iter().map(|a| a.effective_tokens).sum();
    for a in &mut allocs {
        a.proportion = a.effective_tokens as f64 / allocated as f64;
    }
    Ok(MixturePlan {
        slices: allocs,
        budget_tokens,
        max_repetitions,
        unmet_tokens: remaining,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Severity {
    Ok,
    Degrading,
    ViolatesCap,
}

impl Severity {
    pub fn for_factor(factor: f64) -> Self {
        if factor <= HARMLESS_REPETITIONS {
            Severity::Ok
        } else if factor <= TOLERATED_REPETITIONS {
            Severity::Degrading
        } else {
            Severity::ViolatesCap
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Ok => "ok",
            Severity::Degrading => "degrading",
            Severity::ViolatesCap => "violates-cap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepetitionWarning {
    pub lang: String,
    pub factor: f64,
    pub severity: Severity,
}

pub fn repetition_warning(plan: &MixturePlan) -> Vec<RepetitionWarning> {
    plan.slices
        .iter()
        .map(|s| {
            debug_assert!(
                s.upsample_factor <= plan.max_repetitions as f64,
                "plan exceeds its own repetition cap"
            );
            RepetitionWarning {
                lang: s.lang.clone(),
                factor: s.upsample_factor,
                severity: Severity::for_factor(s.upsample_factor),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingVerdict {
    UnderTrained,
    NearOptimal,
    OverTrained,
}

impl ScalingVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            ScalingVerdict::UnderTrained => "under-trained",
            ScalingVerdict::NearOptimal => "near-optimal",
            ScalingVerdict::OverTrained => "over-trained",
        }
    }
}

/// Tokens per parameter, judged against the ~20 tokens/parameter rule.
pub fn chinchilla_ratio(param_count: f64, token_count: f64) -> Result<(f64, ScalingVerdict)> {
    if !(param_count > 0.0) {
        return Err(Error::invalid("parameter count", "must be positive"));
    }
    let ratio = token_count / param_count;
    let verdict = if ratio < NEAR_OPTIMAL_RATIO.0 {
        ScalingVerdict::UnderTrained
    } else if ratio > NEAR_OPTIMAL_RATIO.1 {
        ScalingVerdict::OverTrained
    } else {
        ScalingVerdict::NearOptimal
    };
    Ok((ratio, verdict))
}

/// Ragged batch of token id sequences.
pub type TokenBatch = Vec<Vec<u32>>;

struct LanguageCursor {
    lang: String,
    tokens: Vec<u32>,
    weight: f64,
    pos: usize,
    quota: u64,
    passes: u64,
}

impl LanguageCursor {
    fn take(&mut self, n: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == 0 {
                self.passes += 1;
            }
            let want = n - out.len();
            let end = (self.pos + want).min(self.tokens.len());
            out.extend_from_slice(&self.tokens[self.pos..end]);
            self.pos = if end == self.tokens.len() { 0 } else { end };
        }
        self.quota -= n as u64;
        out
    }
}

/// Seeded stream of token batches following a mixture plan.
///
/// Each batch comes from a single language drawn with the plan's
/// proportions. A language's packed token array is cycled when exhausted
/// and the stream ends once every language has emitted its planned
/// effective token count. The final sequence of a language may be shorter
/// than `seq_len`.
pub struct BatchStream {
    langs: Vec<LanguageCursor>,
    rng: ChaCha8Rng,
    seq_len: usize,
    batch_size: usize,
}

impl BatchStream {
    pub fn new(
        plan: &MixturePlan,
        shards: &BTreeMap<String, Vec<u32>>,
        seed: u64,
        seq_len: usize,
        batch_size: usize,
    ) -> Result<Self> {
        if seq_len == 0 || batch_size == 0 {
            return Err(Error::invalid("batch stream", "seq_len and batch_size must be ≥ 1"));
        }
        let mut langs = Vec::with_capacity(plan.slices.len());
        for s in &plan.slices {
            let tokens = shards.get(&s.lang).ok_or_else(|| {
                Error::invalid("batch stream", format!("no tokenized data for language {}", s.lang))
            })?;
            if s.effective_tokens > 0 && tokens.is_empty() {
                return Err(Error::invalid(
                    "batch stream",
                    format!("tokenized data for {} is empty", s.lang),
                ));
            }
            let cap = tokens.len() as u64 * plan.max_repetitions as u64;
            if s.effective_tokens > cap {
                return Err(Error::invalid(
                    "batch stream",
                    format!(
                        "{} needs {} tokens but its {} tokens allow at most {cap} under the cap",
                        s.lang,
                        s.effective_tokens,
                        tokens.len()
                    ),
                ));
            }
            langs.push(LanguageCursor {
                lang: s.lang.clone(),
                tokens: tokens.clone(),
                weight: s.proportion,
                pos: 0,
                quota: s.effective_tokens,
                passes: 0,
            });
        }
        Ok(BatchStream {
            langs,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seq_len,
            batch_size,
        })
    }

    /// Passes started over each language's data so far.
    pub fn repetitions(&self) -> BTreeMap<String, u64> {
        self.langs.iter().map(|l| (l.lang.clone(), l.passes)).collect()
    }

    pub fn remaining_tokens(&self) -> u64 {
        self.langs.iter().map(|l| l.quota).sum()
    }

    /// Draws the next batch and reports which language it came from.
    pub fn next_labeled(&mut self) -> Option<(String, TokenBatch)> {
        let total: f64 = self
            .langs
            .iter()
            .filter(|l| l.quota > 0)
            .map(|l| l.weight)
            .sum();
        if total <= 0.0 {
            return None;
        }
        let mut u = self.rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, l) in self.langs.iter().enumerate() {
            if l.quota == 0 {
                continue;
            }
            chosen = Some(i);
            if u < l.weight {
                break;
            }
            u -= l.weight;
        }
        let lang = &mut self.langs[chosen?];
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size && lang.quota > 0 {
            let n = (self.seq_len as u64).min(lang.quota) as usize;
            batch.push(lang.take(n));
        }
        Some((lang.lang.clone(), batch))
    }
}

impl Iterator for BatchStream {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        self.next_labeled().map(|(_, b)| b)
    }
}

const SHARD_MAGIC: &[u8; 4] = b"LTOK";
const SHARD_VERSION: u32 = 1;

/// Flat token shard: magic, version (u32), count (u64), then `count`
/// little-endian u32 ids.
pub fn write_shard(path: impl AsRef<Path>, ids: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + ids.len() * 4);
    buf.extend_from_slice(SHARD_MAGIC);
    buf.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::from(e).in_file(path))
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::from(e).in_file(path))?;
    decode_shard(&bytes).map_err(|e| e.in_file(path))
}

pub fn decode_shard(bytes: &[u8]) -> Result<Vec<u32>> {
    let bad = |r: &str| Error::format("token shard", r.to_string());
    if bytes.len() < 16 || &bytes[..4] != SHARD_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SHARD_VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != count.checked_mul(4).ok_or_else(|| bad("count overflow"))? {
        return Err(bad("length does not match header count"));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_slice_cap_binds() {
        let p = plan_mixture(&[LanguageSlice::new("a", 10, 0)], 200, 16).unwrap();
        let s = &p.slices[0];
        assert_eq!(s.effective_tokens, 160);
        assert_eq!(s.upsample_factor, 16.0);
        assert_eq!(s.proportion, 1.0);
        assert_eq!(p.unmet_tokens, 40);
    }

    #[test]
    fn two_slices_by_priority() {
        let p = plan_mixture(
            &[LanguageSlice::new("A", 1000, 1), LanguageSlice::new("B", 10, 0)],
            1200,
            16,
        )
        .unwrap();
        assert_eq!(p.slices[0].lang, "B");
        assert_eq!(p.slices[0].effective_tokens, 160);
        assert_eq!(p.slice("A").unwrap().effective_tokens, 1040);
        assert!((p.slice("A").unwrap().upsample_factor - 1.04).abs() < 1e-12);
        assert!((p.slice("B").unwrap().proportion - 160.0 / 1200.0).abs() < 1e-12);
        assert_eq!(p.unmet_tokens, 0);
    }

    #[test]
    fn plan_errors() {
        assert!(plan_mixture(&[], 10, 16).is_err());
        assert!(plan_mixture(&[LanguageSlice::new("a", 1, 0)], 0, 16).is_err());
        assert!(plan_mixture(&[LanguageSlice::new("a", 1, 0)], 1, 0).is_err());
        assert!(plan_mixture(
            &[LanguageSlice::new("a", 1, 0), LanguageSlice::new("a", 2, 1)],
            1,
            16
        )
        .is_err());
    }

    #[test]
    fn exhausted_budget_leaves_zero_slices() {
        let p = plan_mixture(
            &[LanguageSlice::new("a", 100, 0), LanguageSlice::new("b", 100, 1)],
            50,
            16,
        )
        .unwrap();
        assert_eq!(p.slice("b").unwrap().effective_tokens, 0);
        assert_eq!(p.slice("b").unwrap().proportion, 0.0);
    }

    #[test]
    fn severity_bands() {
        assert_eq!(Severity::for_factor(1.0), Severity::Ok);
        assert_eq!(Severity::for_factor(4.0), Severity::Ok);
        assert_eq!(Severity::for_factor(4.0001), Severity::Degrading);
        assert_eq!(Severity::for_factor(16.0), Severity::Degrading);
        assert_eq!(Severity::for_factor(16.5), Severity::ViolatesCap);
    }

    #[test]
    fn chinchilla_examples() {
        let (r, v) = chinchilla_ratio(11.4e9, 250e9).unwrap();
        assert!((r - 21.93).abs() < 0.01);
        assert_eq!(v, ScalingVerdict::NearOptimal);
        assert_eq!(chinchilla_ratio(1e9, 20e9).unwrap(), (20.0, ScalingVerdict::NearOptimal));
        assert_eq!(chinchilla_ratio(1e9, 1e9).unwrap(), (1.0, ScalingVerdict::UnderTrained));
        assert!(chinchilla_ratio(0.0, 1.0).is_err());
    }

    #[test]
    fn plan_table_round_trip() {
        let p = plan_mixture(
            &[LanguageSlice::new("nob", 1000, 1), LanguageSlice::new("sme", 10, 0)],
            1200,
            16,
        )
        .unwrap();
        let back = MixturePlan::from_table(&p.to_table()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn single_language_stream() {
        let p = plan_mixture(&[LanguageSlice::new("a", 10, 0)], 25, 16).unwrap();
        let shards = BTreeMap::from([("a".to_string(), (0..10).collect::<Vec<u32>>())]);
        let mut s = BatchStream::new(&p, &shards, 3, 4, 2).unwrap();
        let batches: Vec<_> = std::iter::from_fn(|| s.next_labeled()).collect();
        assert!(batches.iter().all(|(l, _)| l == "a"));
        let flat: Vec<u32> = batches.iter().flat_map(|(_, b)| b.concat()).collect();
        assert_eq!(flat.len(), 25);
        assert_eq!(&flat[..12], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]);
        assert_eq!(s.repetitions()["a"], 3);
    }

    #[test]
    fn stream_rejects_missing_language() {
        let p = plan_mixture(&[LanguageSlice::new("a", 10, 0)], 25, 16).unwrap();
        assert!(BatchStream::new(&p, &BTreeMap::new(), 0, 4, 2).is_err());
    }

    #[test]
    fn corpus_parsing() {
        let docs = parse_labeled_corpus("nob\thei verden\n\nsme\tbures\n").unwrap();
        assert_eq!(docs, vec![Document::new("nob", "hei verden"), Document::new("sme", "bures")]);
        assert!(parse_labeled_corpus("no tab here").is_err());
        let slices = parse_slices("# c\nnob 1000 1\nsme 1e1 0\n").unwrap();
        assert_eq!(slices[1], LanguageSlice::new("sme", 10, 0));
    }

    #[test]
    fn shard_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        write_shard(&path, &[1, 2, 70000]).unwrap();
        assert_eq!(read_shard(&path).unwrap(), vec![1, 2, 70000]);
        let bytes = std::fs::read(&path).unwrap();
        assert!(decode_shard(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_shard(b"XXXX").is_err());
    }
}

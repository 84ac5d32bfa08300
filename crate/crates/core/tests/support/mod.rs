//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use langadapt::model::{forward, loss_and_grads, AttentionMode, Checkpoint, ModelConfig, ParamKind, Trainable};
use langadapt::objectives::ObjectiveBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// BPE

fn ws(b: u8) -> bool {
    b == b' ' || b == b'\t' || b == b'\n' || b == b'\r' || b == 0x0b || b == 0x0c
}

/// Splits text into "leading whitespace run + word" pieces by scanning for
/// word starts.
pub fn oracle_chunks(text: &[u8]) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = Vec::new();
    let mut cur: Vec<u8> = Vec::new();
    let mut in_word = false;
    for &b in text {
        if ws(b) && in_word {
            out.push(std::mem::take(&mut cur));
            in_word = false;
        }
        if !ws(b) {
            in_word = true;
        }
        cur.push(b);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Textbook BPE: recount every adjacent pair from scratch, merge the most
/// frequent one everywhere, repeat. Ties go to the pair whose left token
/// bytes sort first, then the right token bytes, then the ids.
pub fn brute_force_bpe(corpus: &[Vec<u8>], n_merges: usize) -> Vec<(u32, u32)> {
    let mut counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for doc in corpus {
        for c in oracle_chunks(doc) {
            *counts.entry(c).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(w, n)| (w.into_iter().map(u32::from).collect(), n))
        .collect();
    let mut bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merges = Vec::new();
    while merges.len() < n_merges {
        let mut pairs: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for (w, n) in &words {
            for i in 0..w.len().saturating_sub(1) {
                *pairs.entry((w[i], w[i + 1])).or_default() += n;
            }
        }
        let best = pairs.iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb)
                .then_with(|| bytes[pb.0 as usize].cmp(&bytes[pa.0 as usize]))
                .then_with(|| bytes[pb.1 as usize].cmp(&bytes[pa.1 as usize]))
                .then_with(|| pb.cmp(pa))
        });
        let Some((&(l, r), &count)) = best else { break };
        if count < 2 {
            break;
        }
        let id = bytes.len() as u32;
        let mut merged = bytes[l as usize].clone();
        merged.extend_from_slice(&bytes[r as usize]);
        bytes.push(merged);
        merges.push((l, r));
        for (w, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(w[i]);
                    i += 1;
                }
            }
            *w = out;
        }
    }
    merges
}

/// Random text over a small word pool with mixed whitespace and some
/// multi-byte letters, at most `max_bytes` long.
pub fn random_corpus(r: &mut impl Rng, max_bytes: usize) -> Vec<Vec<u8>> {
    const LETTERS: [&str; 14] = ["a", "b", "c", "d", "e", "o", "n", "s", "t", "é", "ø", "ŋ", "ж", "中"];
    const SPACES: [&str; 5] = [" ", " ", " ", "  ", "\n"];
    let pool: Vec<String> = (0..r.random_range(5..40))
        .map(|_| {
            (0..r.random_range(1..8))
                .map(|_| LETTERS[r.random_range(0..LETTERS.len())])
                .collect()
        })
        .collect();
    let target = r.random_range(max_bytes / 10..=max_bytes);
    let mut docs = Vec::new();
    let mut total = 0;
    while total < target {
        let mut doc = String::new();
        for _ in 0..r.random_range(1..60) {
            if r.random_bool(0.2) {
                doc.push_str(SPACES[r.random_range(0..SPACES.len())]);
            }
            doc.push_str(&pool[r.random_range(0..pool.len())]);
            doc.push_str(SPACES[r.random_range(0..SPACES.len())]);
        }
        if total + doc.len() > max_bytes {
            break;
        }
        total += doc.len();
        docs.push(doc.into_bytes());
    }
    if docs.is_empty() {
        docs.push(b"aa aa aa".to_vec());
    }
    docs
}

/// Random valid UTF-8 across one- to four-byte code points.
pub fn random_utf8(r: &mut impl Rng, max_chars: usize) -> String {
    let n = r.random_range(0..=max_chars);
    (0..n)
        .map(|_| {
            let c = match r.random_range(0..6) {
                0 => r.random_range(0x20u32..0x7f),
                1 => [b' ', b'\n', b'\t'][r.random_range(0..3)] as u32,
                2 => r.random_range(0x80u32..0x800),
                3 => r.random_range(0x800u32..0xd800),
                4 => r.random_range(0xe000u32..0x10000),
                _ => r.random_range(0x10000u32..0x110000),
            };
            char::from_u32(c).unwrap_or('?')
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Attention

/// Plain-loop grouped-query attention with a two-pass softmax.
pub fn naive_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    len: usize,
    mode: AttentionMode,
    nq: usize,
    nkv: usize,
    hd: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; len * nq * hd];
    for h in 0..nq {
        let g = h * nkv / nq;
        for i in 0..len {
            let visible: Vec<usize> = (0..len)
                .filter(|&j| match mode {
                    AttentionMode::Causal => j <= i,
                    AttentionMode::Bidirectional => true,
                    AttentionMode::Prefix(p) => j <= i || (i < p && j < p),
                })
                .collect();
            let scores: Vec<f64> = visible
                .iter()
                .map(|&j| {
                    (0..hd)
                        .map(|d| q[(i * nq + h) * hd + d] * k[(j * nkv + g) * hd + d])
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (s, &j) in scores.iter().zip(&visible) {
                let p = (s - m).exp() / z;
                for d in 0..hd {
                    out[(i * nq + h) * hd + d] += p * v[(j * nkv + g) * hd + d];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Models

/// Small model with the requested head layout.
pub fn tiny_config(vocab: usize, d_model: usize, layers: usize, nq: usize, nkv: usize, hd: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        d_ff: 2 * d_model,
        n_layers: layers,
        n_q_heads: nq,
        n_kv_heads: nkv,
        head_dim: hd,
        vocab_size: vocab,
        rope_theta: 10_000.0,
        norm_eps: 1e-5,
        tie_embeddings: false,
    }
}

/// Checkpoint with O(1) weights so every path carries signal; the default
/// initialization is too small for finite differences to say much.
pub fn lively_checkpoint(cfg: ModelConfig, seed: u64) -> Checkpoint<f64> {
    let mut ckpt = Checkpoint::<f64>::init(cfg, seed, "test").unwrap();
    let mut r = rng(seed ^ 0xABCD);
    for (kind, t) in ckpt.params.tensors_mut() {
        let fan_in = t.len().max(1) as f64;
        for x in t.iter_mut() {
            *x = match kind {
                ParamKind::AttnNorm(_) | ParamKind::FfnNorm(_) | ParamKind::FinalNorm => 1.0 + r.random_range(-0.3..0.3),
                _ => r.random_range(-1.0..1.0) * (3.0 / fan_in.sqrt()).min(0.6),
            };
        }
    }
    ckpt
}

pub fn random_ids(r: &mut impl Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| r.random_range(0..vocab as u32)).collect()
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Fourth-order central differences on every parameter. Relative error is
/// `|a − n| / max(|a| + |n|, floor)`.
pub fn gradient_check(ckpt: &Checkpoint<f64>, batch: &ObjectiveBatch, h: f64, floor: f64) -> GradCheck {
    let (_, grads) = loss_and_grads(ckpt, batch, &Trainable::All).unwrap();
    let analytic: Vec<(ParamKind, Vec<f64>)> = grads.tensors().into_iter().map(|(k, t)| (k, t.to_vec())).collect();
    let loss = |c: &Checkpoint<f64>| -> f64 {
        let (sum, n) = langadapt::model::sequence_nll(c, batch).unwrap();
        sum / n as f64
    };
    let mut probe = ckpt.clone();
    let mut report = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (ti, (kind, a)) in analytic.iter().enumerate() {
        for i in 0..a.len() {
            let orig = probe.params.tensors_mut()[ti].1[i];
            let mut at = |x: f64| {
                probe.params.tensors_mut()[ti].1[i] = x;
                loss(&probe)
            };
            let numeric = (8.0 * (at(orig + h) - at(orig - h)) - (at(orig + 2.0 * h) - at(orig - 2.0 * h))) / (12.0 * h);
            probe.params.tensors_mut()[ti].1[i] = orig;
            let rel = (a[i] - numeric).abs() / (a[i].abs() + numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{}[{i}] analytic {:.3e} numeric {:.3e}", kind.name(), a[i], numeric);
            }
        }
    }
    report
}

/// Logits of one sequence under `mode`.
pub fn logits_of<T: langadapt::linalg::Scalar>(ckpt: &Checkpoint<T>, ids: &[u32], mode: AttentionMode) -> Vec<Vec<T>> {
    let out = forward(ckpt, &[ids.to_vec()], &[mode]).unwrap();
    (0..ids.len()).map(|i| out[0].row(i).to_vec()).collect()
}

/// Bit patterns of every parameter.
pub fn param_bits(params: &langadapt::model::Params<f32>) -> Vec<u32> {
    params
        .tensors()
        .into_iter()
        .flat_map(|(_, t)| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

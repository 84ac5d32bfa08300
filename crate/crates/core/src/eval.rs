//! Held-out perplexity, cost estimates and loss-trace comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::model::{sequence_nll, AttentionMode, Checkpoint};
use crate::objectives::{ObjectiveBatch, Target};
use crate::pipeline::TraceRow;
use crate::tokenizer::{BpeModel, FertilityReport};

/// Token sequences per language, tagged with the tokenizer that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCorpus {
    pub tokenizer_fingerprint: String,
    pub languages: BTreeMap<String, Vec<Vec<u32>>>,
}

impl EvalCorpus {
    /// Encodes each document as `<bos>` + text and cuts it into
    /// non-overlapping windows of at most `seq_len` tokens.
    pub fn encode(tok: &BpeModel, docs: &[Document], seq_len: usize) -> Result<Self> {
        if seq_len < 2 {
            return Err(Error::invalid("eval corpus", "seq_len must be ≥ 2"));
        }
        let mut languages: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
        for doc in docs {
            let mut ids: Vec<u32> = tok.bos_id().into_iter().collect();
            ids.extend(tok.encode(doc.text.as_bytes()));
            let seqs = languages.entry(doc.lang.clone()).or_default();
            seqs.extend(ids.chunks(seq_len).map(<[u32]>::to_vec));
        }
        Ok(EvalCorpus {
            tokenizer_fingerprint: tok.fingerprint(),
            languages,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageEval {
    /// Number of predicted tokens.
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: AttentionMode,
    pub tokenizer_fingerprint: String,
    pub languages: BTreeMap<String, LanguageEval>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("language,tokens,mean_nll,perplexity\n");
        for (lang, e) in &self.languages {
            let _ = writeln!(s, "{lang},{},{},{}", e.tokens, e.mean_nll, e.perplexity);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("mode: {:?}\n", self.mode);
        let _ = writeln!(s, "{:<12} {:>10} {:>10} {:>12}", "language", "tokens", "mean_nll", "perplexity");
        for (lang, e) in &self.languages {
            let _ = writeln!(s, "{lang:<12} {:>10} {:>10.4} {:>12.4}", e.tokens, e.mean_nll, e.perplexity);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

const EVAL_CHUNK: usize = 32;

/// Mean next-token NLL and perplexity per language. Every position `i`
/// predicts token `i + 1` whatever the attention mode; only causal
/// attention gives comparable numbers, so other modes are flagged.
pub fn perplexity<T: Scalar>(ckpt: &Checkpoint<T>, corpus: &EvalCorpus, mode: AttentionMode) -> Result<EvalReport> {
    ckpt.check_fingerprint(&corpus.tokenizer_fingerprint)?;
    let mut warnings = Vec::new();
    if mode != AttentionMode::Causal {
        warnings.push(format!(
            "attention mode {mode:?} lets positions see their targets; perplexity is not comparable to causal"
        ));
    }
    let mut languages = BTreeMap::new();
    for (lang, seqs) in &corpus.languages {
        let usable: Vec<&Vec<u32>> = seqs.iter().filter(|s| s.len() >= 2).collect();
        if usable.is_empty() {
            let msg = format!("language {lang} has no sequence of length ≥ 2; omitted");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let mut total = 0.0;
        let mut count = 0;
        for chunk in usable.chunks(EVAL_CHUNK) {
            let mut targets = Vec::new();
            let mut modes = Vec::new();
            for (s, seq) in chunk.iter().enumerate() {
                targets.extend((0..seq.len() - 1).map(|pos| Target {
                    seq: s,
                    pos,
                    token: seq[pos + 1],
                }));
                modes.push(match mode {
                    AttentionMode::Prefix(p) => AttentionMode::Prefix(p.min(seq.len())),
                    m => m,
                });
            }
            let batch = ObjectiveBatch {
                input_ids: chunk.iter().map(|s| s.to_vec()).collect(),
                targets,
                modes,
            };
            let (nll, n) = sequence_nll(ckpt, &batch)?;
            total += nll;
            count += n;
        }
        let mean_nll = total / count as f64;
        languages.insert(
            lang.clone(),
            LanguageEval {
                tokens: count,
                mean_nll,
                perplexity: mean_nll.exp(),
            },
        );
    }
    Ok(EvalReport {
        mode,
        tokenizer_fingerprint: corpus.tokenizer_fingerprint.clone(),
        languages,
        warnings,
    })
}

/// Split-ratio change per language going from `old` to `new`
/// (negative means the new tokenizer is cheaper).
pub fn fertility_delta(old: &FertilityReport, new: &FertilityReport) -> BTreeMap<String, f64> {
    new.languages
        .iter()
        .filter_map(|(lang, n)| old.languages.get(lang).map(|o| (lang.clone(), n.split_ratio - o.split_ratio)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub total_flops: f64,
    pub tokens_per_second: Option<f64>,
    /// Model FLOPs utilization.
    pub mfu: Option<f64>,
}

/// Dense training cost `6 · params · tokens`.
pub fn estimate_flops(params: f64, tokens: f64) -> Result<CostEstimate> {
    if !(params >= 0.0 && tokens >= 0.0 && params.is_finite() && tokens.is_finite()) {
        return Err(Error::invalid("flops", "params and tokens must be finite and ≥ 0"));
    }
    Ok(CostEstimate {
        total_flops: 6.0 * params * tokens,
        tokens_per_second: None,
        mfu: None,
    })
}

impl CostEstimate {
    /// Adds throughput and utilization for a run that took `seconds` on
    /// hardware peaking at `peak_flops_per_second`.
    pub fn with_timing(self, tokens: f64, seconds: f64, peak_flops_per_second: f64) -> Result<Self> {
        if !(seconds > 0.0 && peak_flops_per_second > 0.0) {
            return Err(Error::invalid("mfu", "seconds and peak FLOP/s must be > 0"));
        }
        let mfu = self.total_flops / seconds / peak_flops_per_second;
        if mfu > 1.0 + 1e-12 {
            return Err(Error::invalid(
                "mfu",
                format!("achieved FLOP/s exceed the stated peak (MFU {mfu:.3})"),
            ));
        }
        Ok(CostEstimate {
            tokens_per_second: Some(tokens / seconds),
            mfu: Some(mfu),
            ..self
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricComparison {
    pub metric: &'static str,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b − a`.
    pub delta: Option<f64>,
    /// `"a"`, `"b"` or `"tie"`; lower is better for every metric.
    pub winner: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunComparison {
    pub metrics: Vec<MetricComparison>,
    /// Common step grid with both losses, for plotting.
    pub grid: Vec<(f64, f64, f64)>,
}

impl RunComparison {
    pub fn metric(&self, name: &str) -> Option<&MetricComparison> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        let mut s = String::from("metric,a,b,delta,winner\n");
        for m in &self.metrics {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                m.metric,
                opt(m.a),
                opt(m.b),
                opt(m.delta),
                m.winner.unwrap_or("")
            );
        }
        s
    }

    pub fn plot_csv(&self) -> String {
        let mut s = String::from("step,loss_a,loss_b\n");
        for (step, a, b) in &self.grid {
            let _ = writeln!(s, "{step},{a},{b}");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("{:<16} {:>10} {:>10} {:>10}  winner\n", "metric", "a", "b", "delta");
        for m in &self.metrics {
            let _ = writeln!(
                s,
                "{:<16} {:>10} {:>10} {:>10}  {}",
                m.metric,
                opt(m.a),
                opt(m.b),
                opt(m.delta),
                m.winner.unwrap_or("-")
            );
        }
        s
    }
}

/// Loss jump at the start of full training: first `full` loss minus the
/// loss of the row just before it.
pub fn trace_spike(trace: &[TraceRow]) -> Option<f64> {
    let i = trace.iter().position(|r| r.stage == "full")?;
    (i > 0).then(|| trace[i].loss - trace[i - 1].loss)
}

fn interpolate(trace: &[TraceRow], step: f64) -> f64 {
    let i = trace.partition_point(|r| (r.step as f64) < step);
    if i == 0 {
        return trace[0].loss;
    }
    if i == trace.len() {
        return trace[i - 1].loss;
    }
    let (lo, hi) = (&trace[i - 1], &trace[i]);
    if hi.step as f64 == step {
        return hi.loss;
    }
    let t = (step - lo.step as f64) / (hi.step - lo.step) as f64;
    lo.loss + t * (hi.loss - lo.loss)
}

fn area(grid: &[(f64, f64)]) -> f64 {
    grid.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Final loss, stage-3 spike and area under the loss curve of two traces.
/// Both traces are put on the union of their step grids (restricted to
/// the overlapping range) by linear interpolation.
pub fn compare_runs(a: &[TraceRow], b: &[TraceRow]) -> Result<RunComparison> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("compare", "empty trace"));
    }
    let sorted = |t: &[TraceRow]| {
        let mut t = t.to_vec();
        t.sort_by_key(|r| r.step);
        t
    };
    let (a, b) = (sorted(a), sorted(b));
    let lo = a[0].step.max(b[0].step);
    let hi = a.last().unwrap().step.min(b.last().unwrap().step);
    let mut steps: Vec<usize> = a.iter().chain(&b).map(|r| r.step).filter(|&s| s >= lo && s <= hi).collect();
    steps.sort_unstable();
    steps.dedup();
    let grid: Vec<(f64, f64, f64)> = steps
        .iter()
        .map(|&s| (s as f64, interpolate(&a, s as f64), interpolate(&b, s as f64)))
        .collect();
    let auc_a = area(&grid.iter().map(|g| (g.0, g.1)).collect::<Vec<_>>());
    let auc_b = area(&grid.iter().map(|g| (g.0, g.2)).collect::<Vec<_>>());

    let metric = |name, a: Option<f64>, b: Option<f64>| {
        let delta = a.zip(b).map(|(a, b)| b - a);
        let winner = delta.map(|d| {
            if d < 0.0 {
                "b"
            } else if d > 0.0 {
                "a"
            } else {
                "tie"
            }
        });
        MetricComparison {
            metric: name,
            a,
            b,
            delta,
            winner,
        }
    };
    Ok(RunComparison {
        metrics: vec![
            metric("final_loss", Some(a.last().unwrap().loss), Some(b.last().unwrap().loss)),
            metric("spike", trace_spike(&a), trace_spike(&b)),
            metric("area_under_loss", Some(auc_a), Some(auc_b)),
        ],
        grid,
    })
}

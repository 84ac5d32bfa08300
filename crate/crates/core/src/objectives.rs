//! Causal language modeling, masked next-token prediction (MNTP) and the
//! deterministic schedule that interleaves them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mix_seed, Scalar};
use crate::model::AttentionMode;

pub const DEFAULT_MASK_RATE: f64 = 0.15;
pub const DEFAULT_CAUSAL_FRACTION: f64 = 0.9;

/// Resolution of the causal/MNTP interleaving ratio.
const MIX_DENOMINATOR: u64 = 1_000_000;

const MNTP_STREAM: u64 = 0x6d6e_7470;
const PHASE_STREAM: u64 = 0x7068_6173;

/// Predict `token` from the output at (`seq`, `pos`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub seq: usize,
    pub pos: usize,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBatch {
    pub input_ids: Vec<Vec<u32>>,
    pub targets: Vec<Target>,
    /// One attention mode per sequence.
    pub modes: Vec<AttentionMode>,
}

impl ObjectiveBatch {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::invalid("objective batch", "no targets"));
        }
        if self.modes.len() != self.input_ids.len() {
            return Err(Error::invalid("objective batch", "one attention mode per sequence required"));
        }
        for seq in &self.input_ids {
            if let Some(&id) = seq.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange { id, vocab_size });
            }
        }
        for t in &self.targets {
            let len = self.input_ids.get(t.seq).map(Vec::len).ok_or_else(|| {
                Error::invalid("objective batch", format!("target refers to sequence {}", t.seq))
            })?;
            if t.pos >= len {
                return Err(Error::invalid(
                    "objective batch",
                    format!("target position {} outside sequence {} of length {len}", t.pos, t.seq),
                ));
            }
            if t.token as usize >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t.token,
                    vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Every position `i < len − 1` predicts token `i + 1` under causal
/// attention.
pub fn causal_batch(batch: &[Vec<u32>]) -> Result<ObjectiveBatch> {
    let mut targets = Vec::new();
    for (s, seq) in batch.iter().enumerate() {
        if seq.len() < 2 {
            return Err(Error::invalid(
                "causal batch",
                format!("sequence {s} has length {} (need ≥ 2)", seq.len()),
            ));
        }
        targets.extend(seq.windows(2).enumerate().map(|(i, w)| Target {
            seq: s,
            pos: i,
            token: w[1],
        }));
    }
    if targets.is_empty() {
        return Err(Error::invalid("causal batch", "empty batch"));
    }
    Ok(ObjectiveBatch {
        input_ids: batch.to_vec(),
        targets,
        modes: vec![AttentionMode::Causal; batch.len()],
    })
}

/// Draws MNTP mask positions for one sequence: each of `1..len` is masked
/// with probability `mask_rate`, redrawn until at least one is masked.
pub fn draw_mask_positions(len: usize, mask_rate: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let picked: Vec<usize> = (1..len).filter(|_| rng.random::<f64>() < mask_rate).collect();
        if !picked.is_empty() || len < 2 {
            return picked;
        }
    }
}

/// Masked next-token prediction batch with seeded mask positions.
pub fn mntp_batch(batch: &[Vec<u32>], mask_rate: f64, mask_id: u32, seed: u64) -> Result<ObjectiveBatch> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::invalid("mask rate", format!("{mask_rate} is outside (0, 1)")));
    }
    let masks: Vec<Vec<usize>> = batch
        .iter()
        .enumerate()
        .map(|(s, seq)| draw_mask_positions(seq.len(), mask_rate, mix_seed(seed, MNTP_STREAM, s as u64)))
        .collect();
    mntp_batch_with_masks(batch, &masks, mask_id)
}

/// MNTP with explicit mask positions: each masked position `i` is replaced
/// by `mask_id` and its original token becomes the target of position
/// `i − 1`. Attention is bidirectional.
pub fn mntp_batch_with_masks(batch: &[Vec<u32>], masks: &[Vec<usize>], mask_id: u32) -> Result<ObjectiveBatch> {
    if masks.len() != batch.len() {
        return Err(Error::invalid("mntp batch", "one mask set per sequence required"));
    }
    let mut input_ids = batch.to_vec();
    let mut targets = Vec::new();
    for (s, (seq, masked)) in batch.iter().zip(masks).enumerate() {
        if seq.len() < 2 {
            return Err(Error::invalid(
                "mntp batch",
                format!("sequence {s} has length {} (need ≥ 2)", seq.len()),
            ));
        }
        if masked.is_empty() {
            return Err(Error::invalid("mntp batch", format!("sequence {s} has no masked position")));
        }
        let mut sorted = masked.clone();
        sorted.sort_unstable();
        sorted.dedup();
        for i in sorted {
            if i == 0 || i >= seq.len() {
                return Err(Error::invalid(
                    "mntp batch",
                    format!("mask position {i} outside 1..{}", seq.len()),
                ));
            }
            input_ids[s][i] = mask_id;
            targets.push(Target {
                seq: s,
                pos: i - 1,
                token: seq[i],
            });
        }
    }
    Ok(ObjectiveBatch {
        input_ids,
        targets,
        modes: vec![AttentionMode::Bidirectional; batch.len()],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Causal,
    Mntp,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Causal => "causal",
            ObjectiveKind::Mntp => "mntp",
        }
    }
}

/// Deterministic causal/MNTP interleaving.
///
/// Step `s` is an MNTP step when `⌊((s+1)·r + φ)⌋ > ⌊(s·r + φ)⌋` with
/// `r = 1 − causal_fraction` and a seeded phase `φ ∈ [0, 1)`. For
/// `r = 1/n` this places exactly one MNTP step in every block of `n`
/// steps at a seeded offset; for other ratios the MNTP count over any
/// `N` steps is within one of `N·r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HybridSchedule {
    mntp_numerator: u64,
    phase: u64,
    seed: u64,
}

impl HybridSchedule {
    pub fn new(causal_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&causal_fraction) {
            return Err(Error::invalid(
                "causal fraction",
                format!("{causal_fraction} is outside [0, 1]"),
            ));
        }
        let mntp_numerator = ((1.0 - causal_fraction) * MIX_DENOMINATOR as f64).round() as u64;
        Ok(HybridSchedule {
            mntp_numerator,
            phase: mix_seed(seed, PHASE_STREAM, 0) % MIX_DENOMINATOR,
            seed,
        })
    }

    pub fn causal_only() -> Self {
        HybridSchedule::new(1.0, 0).expect("valid fraction")
    }

    pub fn causal_fraction(&self) -> f64 {
        1.0 - self.mntp_numerator as f64 / MIX_DENOMINATOR as f64
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn bucket(&self, step: u64) -> u128 {
        (step as u128 * self.mntp_numerator as u128 + self.phase as u128) / MIX_DENOMINATOR as u128
    }

    pub fn objective_at(&self, step: u64) -> ObjectiveKind {
        if self.bucket(step + 1) > self.bucket(step) {
            ObjectiveKind::Mntp
        } else {
            ObjectiveKind::Causal
        }
    }

    /// Seed for the MNTP mask draw at `step`.
    pub fn mask_seed(&self, step: u64) -> u64 {
        mix_seed(self.seed, MNTP_STREAM, step)
    }
}

pub fn hybrid_next(schedule: &HybridSchedule, step: u64) -> ObjectiveKind {
    schedule.objective_at(step)
}

/// Training objective of a stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Causal,
    Hybrid {
        schedule: HybridSchedule,
        mask_rate: f64,
        mask_id: u32,
    },
}

impl Objective {
    pub fn kind_at(&self, step: u64) -> ObjectiveKind {
        match self {
            Objective::Causal => ObjectiveKind::Causal,
            Objective::Hybrid { schedule, .. } => schedule.objective_at(step),
        }
    }

    pub fn build(&self, step: u64, batch: &[Vec<u32>]) -> Result<(ObjectiveKind, ObjectiveBatch)> {
        match (self, self.kind_at(step)) {
            (Objective::Hybrid { schedule, mask_rate, mask_id }, ObjectiveKind::Mntp) => {
                let b = mntp_batch(batch, *mask_rate, *mask_id, schedule.mask_seed(step))?;
                Ok((ObjectiveKind::Mntp, b))
            }
            _ => Ok((ObjectiveKind::Causal, causal_batch(batch)?)),
        }
    }
}

/// Mean negative log-softmax of `targets[i]` under `logits[i]`.
pub fn cross_entropy<T: Scalar>(logits: &[Vec<T>], targets: &[u32]) -> Result<T> {
    if targets.is_empty() || logits.len() != targets.len() {
        return Err(Error::invalid("cross entropy", "need one logit row per target and ≥ 1 target"));
    }
    let mut total = T::zero();
    for (row, &t) in logits.iter().zip(targets) {
        let z = *row.get(t as usize).ok_or(Error::TokenOutOfRange {
            id: t,
            vocab_size: row.len(),
        })?;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        total += max + sum.ln() - z;
    }
    Ok(total / T::from_usize(targets.len()).unwrap())
}

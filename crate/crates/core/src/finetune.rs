//! Supervised prompt → completion finetuning, either of all weights or of
//! low-rank adapters, with causal or prefix attention.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mix_seed, Matrix};
use crate::model::io::{put_f32s, Container, Reader, TAG_LORA};
use crate::model::{forward, loss_and_grads, AttentionMode, Checkpoint, Params, Projection, Trainable};
use crate::objectives::{ObjectiveBatch, Target};
use crate::pipeline::{
    adamw_step, checkpoint_container, trapezoidal_lr, AdamWCoefficients, AdamWConfig, OptimizerState, ScheduleSpec,
};
use crate::tokenizer::BpeModel;

pub const DEFAULT_LORA_RANK: usize = 8;
pub const DEFAULT_LORA_ALPHA: f64 = 16.0;

/// Low-rank update `(alpha / rank) · B · A` of one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub layer: usize,
    pub target: Projection,
    /// `rank × in_dim`.
    pub a: Matrix<f32>,
    /// `out_dim × rank`, zero at attach time.
    pub b: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    /// One adapter per (layer, target), layers outermost.
    pub adapters: Vec<LoraAdapter>,
}

impl LoraAdapterSet {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.data.len() + a.b.data.len()).sum()
    }

    /// `scaling · B · A`, accumulated in f64.
    pub fn delta(&self, adapter: &LoraAdapter) -> Vec<f64> {
        let (out, r, inp) = (adapter.b.rows, self.rank, adapter.a.cols);
        let s = self.scaling();
        let mut d = vec![0.0f64; out * inp];
        for o in 0..out {
            let row = &mut d[o * inp..(o + 1) * inp];
            for k in 0..r {
                let bok = adapter.b.data[o * r + k] as f64;
                if bok == 0.0 {
                    continue;
                }
                for (x, &a) in row.iter_mut().zip(adapter.a.row(k)) {
                    *x += bok * a as f64;
                }
            }
            for x in row {
                *x *= s;
            }
        }
        d
    }

    /// Adds every adapter's delta to the matching weight in `params`.
    /// Zero entries of the delta leave the weight bits untouched.
    pub fn fold_into(&self, params: &mut Params<f32>) {
        for adapter in &self.adapters {
            let delta = self.delta(adapter);
            let w = params.layers[adapter.layer].weight_mut(adapter.target);
            for (w, d) in w.data.iter_mut().zip(delta) {
                if d != 0.0 {
                    *w = (*w as f64 + d) as f32;
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.rank as u64).to_le_bytes());
        buf.extend_from_slice(&self.alpha.to_le_bytes());
        buf.extend_from_slice(&(self.targets.len() as u32).to_le_bytes());
        for t in &self.targets {
            buf.push(projection_code(*t));
        }
        buf.extend_from_slice(&(self.adapters.len() as u32).to_le_bytes());
        for a in &self.adapters {
            buf.extend_from_slice(&(a.layer as u64).to_le_bytes());
            buf.push(projection_code(a.target));
            for m in [&a.a, &a.b] {
                buf.extend_from_slice(&(m.rows as u64).to_le_bytes());
                buf.extend_from_slice(&(m.cols as u64).to_le_bytes());
                put_f32s(&mut buf, &m.data);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let rank = r.u64()? as usize;
        let alpha = r.f64()?;
        let n_targets = r.u32()?;
        let mut targets = Vec::new();
        for _ in 0..n_targets {
            targets.push(projection_from_code(r.u8()?)?);
        }
        let n = r.u32()?;
        let mut adapters = Vec::new();
        for _ in 0..n {
            let layer = r.u64()? as usize;
            let target = projection_from_code(r.u8()?)?;
            let mut mats = Vec::with_capacity(2);
            for _ in 0..2 {
                let rows = r.u64()? as usize;
                let cols = r.u64()? as usize;
                let len = rows
                    .checked_mul(cols)
                    .filter(|&l| l <= bytes.len())
                    .ok_or_else(|| Error::format("adapters", "matrix too large"))?;
                let mut m = Matrix::zeros(rows, cols);
                debug_assert_eq!(m.data.len(), len);
                r.f32s_into(&mut m.data)?;
                mats.push(m);
            }
            let b = mats.pop().unwrap();
            let a = mats.pop().unwrap();
            adapters.push(LoraAdapter { layer, target, a, b });
        }
        r.finish()?;
        if rank == 0 {
            return Err(Error::format("adapters", "rank 0"));
        }
        Ok(LoraAdapterSet {
            rank,
            alpha,
            targets,
            adapters,
        })
    }
}

fn projection_code(p: Projection) -> u8 {
    Projection::ALL.iter().position(|&q| q == p).unwrap() as u8
}

fn projection_from_code(c: u8) -> Result<Projection> {
    Projection::ALL
        .get(c as usize)
        .copied()
        .ok_or_else(|| Error::format("adapters", format!("unknown projection code {c}")))
}

/// Frozen base checkpoint plus trainable adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    base: Checkpoint,
    adapters: LoraAdapterSet,
    merged: bool,
}

impl AdaptedModel {
    pub fn base(&self) -> &Checkpoint {
        &self.base
    }

    pub fn adapters(&self) -> &LoraAdapterSet {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut LoraAdapterSet {
        &mut self.adapters
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Checkpoint whose target weights are `W + scaling · B · A`; the
    /// adapted model's forward pass is the forward pass of this checkpoint.
    pub fn effective(&self) -> Checkpoint {
        let mut ckpt = self.base.clone();
        self.adapters.fold_into(&mut ckpt.params);
        ckpt
    }
}

pub fn lora_attach(
    ckpt: &Checkpoint,
    rank: usize,
    alpha: f64,
    targets: &[Projection],
    seed: u64,
) -> Result<AdaptedModel> {
    if rank == 0 {
        return Err(Error::invalid("lora", "rank must be ≥ 1"));
    }
    if targets.is_empty() {
        return Err(Error::invalid("lora", "no target matrices"));
    }
    let mut sorted = targets.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = Vec::new();
    for (l, layer) in ckpt.params.layers.iter().enumerate() {
        for &t in &sorted {
            let w = layer.weight(t);
            let normal = Normal::new(0.0, 1.0 / (w.cols as f64).sqrt()).expect("valid std");
            let a_data = (0..rank * w.cols).map(|_| normal.sample(&mut rng) as f32).collect();
            adapters.push(LoraAdapter {
                layer: l,
                target: t,
                a: Matrix::from_vec(rank, w.cols, a_data),
                b: Matrix::zeros(w.rows, rank),
            });
        }
    }
    Ok(AdaptedModel {
        base: ckpt.clone(),
        adapters: LoraAdapterSet {
            rank,
            alpha,
            targets: sorted,
            adapters,
        },
        merged: false,
    })
}

/// Folds the adapters into the base weights. A model can be merged once.
pub fn lora_merge(model: &mut AdaptedModel) -> Result<Checkpoint> {
    if model.merged {
        return Err(Error::invalid("lora", "adapters were already merged"));
    }
    model.merged = true;
    Ok(model.effective())
}

pub fn save_adapted(path: impl AsRef<Path>, model: &AdaptedModel) -> Result<()> {
    let mut c = checkpoint_container(&model.base, None);
    let mut payload = vec![model.merged as u8];
    payload.extend(model.adapters.to_bytes());
    c.push(TAG_LORA, payload);
    c.write(path)
}

pub fn load_adapted(path: impl AsRef<Path>) -> Result<AdaptedModel> {
    let path = path.as_ref();
    let c = Container::read(path)?;
    let parse = || -> Result<AdaptedModel> {
        let base = Checkpoint::from_container(&c)?;
        let payload = c.require(TAG_LORA)?;
        let (flag, rest) = payload
            .split_first()
            .ok_or_else(|| Error::format("adapters", "empty section"))?;
        let adapters = LoraAdapterSet::from_bytes(rest)?;
        for a in &adapters.adapters {
            let w = base
                .params
                .layers
                .get(a.layer)
                .ok_or_else(|| Error::format("adapters", "layer out of range"))?
                .weight(a.target);
            if a.a.cols != w.cols || a.b.rows != w.rows || a.a.rows != adapters.rank || a.b.cols != adapters.rank {
                return Err(Error::format("adapters", "adapter shape does not match the base model"));
            }
        }
        Ok(AdaptedModel {
            base,
            adapters,
            merged: *flag != 0,
        })
    };
    parse().map_err(|e| e.in_file(path))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCompletionExample {
    pub prompt: Vec<u32>,
    pub completion: Vec<u32>,
}

impl PromptCompletionExample {
    pub fn len(&self) -> usize {
        self.prompt.len() + self.completion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.completion);
        t
    }
}

/// Parses `prompt<TAB>completion` lines. Each prompt starts with the
/// tokenizer's `<bos>` marker when it has one.
pub fn parse_examples(text: &str, tok: &BpeModel) -> Result<Vec<PromptCompletionExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (prompt, completion) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("examples", format!("line {}: expected prompt<TAB>completion", i + 1)))?;
        let mut p: Vec<u32> = tok.bos_id().into_iter().collect();
        p.extend(tok.encode(prompt.as_bytes()));
        out.push(PromptCompletionExample {
            prompt: p,
            completion: tok.encode(completion.as_bytes()),
        });
    }
    Ok(out)
}

pub fn read_examples(path: impl AsRef<Path>, tok: &BpeModel) -> Result<Vec<PromptCompletionExample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_examples(&text, tok).map_err(|e| e.in_file(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    Causal,
    Prefix,
}

impl FinetuneMode {
    pub fn attention(self, prompt_len: usize) -> AttentionMode {
        match self {
            FinetuneMode::Causal => AttentionMode::Causal,
            FinetuneMode::Prefix => AttentionMode::Prefix(prompt_len),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneMode::Causal => "causal",
            FinetuneMode::Prefix => "prefix",
        }
    }
}

/// Objective batch scoring only completion tokens. The completion token at
/// position `j` is predicted from position `j − 1`; with an empty prompt
/// the first completion token has no predecessor and is skipped.
pub fn completion_batch(examples: &[&PromptCompletionExample], mode: FinetuneMode) -> Result<ObjectiveBatch> {
    let mut input_ids = Vec::with_capacity(examples.len());
    let mut targets = Vec::new();
    let mut modes = Vec::with_capacity(examples.len());
    for (s, ex) in examples.iter().enumerate() {
        let seq = ex.tokens();
        let p = ex.prompt.len();
        for j in p.max(1)..seq.len() {
            targets.push(Target {
                seq: s,
                pos: j - 1,
                token: seq[j],
            });
        }
        modes.push(mode.attention(p));
        input_ids.push(seq);
    }
    if targets.is_empty() {
        return Err(Error::invalid("finetune", "batch has no completion targets"));
    }
    Ok(ObjectiveBatch {
        input_ids,
        targets,
        modes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub epochs: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub warmup_steps: usize,
    pub decay_steps: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::Causal,
            epochs: 1,
            peak_lr: 1e-3,
            batch_size: 8,
            seq_len: 128,
            warmup_steps: 0,
            decay_steps: 0,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * n_examples.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinetuneModel {
    Full(Checkpoint),
    Lora(AdaptedModel),
}

impl FinetuneModel {
    pub fn effective(&self) -> Checkpoint {
        match self {
            FinetuneModel::Full(c) => c.clone(),
            FinetuneModel::Lora(m) => m.effective(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneStep {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneMetrics {
    pub mode: FinetuneMode,
    pub steps: usize,
    pub trainable_params: usize,
    pub trace: Vec<FinetuneStep>,
}

impl FinetuneMetrics {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|s| s.loss)
    }
}

pub fn validate_examples(examples: &[PromptCompletionExample], seq_len: usize) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::invalid("finetune", "no examples"));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.completion.is_empty() {
            return Err(Error::invalid("finetune", format!("example {i} has an empty completion")));
        }
        if ex.len() > seq_len {
            return Err(Error::invalid(
                "finetune",
                format!("example {i} has {} tokens, more than seq_len {seq_len}", ex.len()),
            ));
        }
        if ex.len() < 2 {
            return Err(Error::invalid("finetune", format!("example {i} has no predictable completion token")));
        }
    }
    Ok(())
}

struct LoraMoments {
    step: u64,
    m: Vec<(Vec<f32>, Vec<f32>)>,
    v: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Gradients of the adapter factors given the gradient of the merged weight.
fn lora_factor_grads(set: &LoraAdapterSet, adapter: &LoraAdapter, dw: &Matrix<f32>) -> (Vec<f32>, Vec<f32>) {
    let s = set.scaling() as f32;
    let r = set.rank;
    let (out, inp) = (dw.rows, dw.cols);
    // dA = s·Bᵀ·dW, dB = s·dW·Aᵀ
    let mut da = vec![0.0f32; r * inp];
    let mut db = vec![0.0f32; out * r];
    for o in 0..out {
        let dw_row = dw.row(o);
        for k in 0..r {
            db[o * r + k] = s * crate::linalg::dot(dw_row, adapter.a.row(k));
            let b = s * adapter.b.data[o * r + k];
            if b != 0.0 {
                crate::linalg::axpy(b, dw_row, &mut da[k * inp..(k + 1) * inp]);
            }
        }
    }
    (da, db)
}

/// Trains on completion tokens only. Full finetuning updates every weight;
/// LoRA finetuning updates only the adapter factors and leaves the base
/// checkpoint bit-for-bit unchanged.
pub fn finetune(
    model: FinetuneModel,
    examples: &[PromptCompletionExample],
    config: &FinetuneConfig,
) -> Result<(FinetuneModel, FinetuneMetrics)> {
    validate_examples(examples, config.seq_len)?;
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::invalid("finetune", "batch_size and epochs must be ≥ 1"));
    }
    let total = config.total_steps(examples.len());
    let warmup = config.warmup_steps.min(total);
    let schedule = ScheduleSpec {
        peak_lr: config.peak_lr,
        warmup_steps: warmup,
        decay_steps: config.decay_steps.min(total - warmup),
        total_steps: total,
    };
    let mut model = model;
    let trainable_params = match &model {
        FinetuneModel::Full(c) => c.params.len(),
        FinetuneModel::Lora(m) => m.adapters.trainable_param_count(),
    };
    let mut full_state = match &model {
        FinetuneModel::Full(c) => Some(OptimizerState::new(&c.config, config.optimizer)),
        FinetuneModel::Lora(_) => None,
    };
    let mut lora_state = match &model {
        FinetuneModel::Lora(m) => {
            let zeros = |a: &LoraAdapter| (vec![0.0; a.a.data.len()], vec![0.0; a.b.data.len()]);
            Some(LoraMoments {
                step: 0,
                m: m.adapters.adapters.iter().map(zeros).collect(),
                v: m.adapters.adapters.iter().map(zeros).collect(),
            })
        }
        FinetuneModel::Full(_) => None,
    };

    let mut trace = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x5EED, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let lr = trapezoidal_lr(step, &schedule)?;
            let batch: Vec<&PromptCompletionExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let ob = completion_batch(&batch, config.mode)?;
            let loss = match &mut model {
                FinetuneModel::Full(ckpt) => {
                    let (loss, grads) = loss_and_grads(ckpt, &ob, &Trainable::All)?;
                    adamw_step(&mut ckpt.params, &grads, full_state.as_mut().unwrap(), lr, &Trainable::All)?;
                    loss
                }
                FinetuneModel::Lora(adapted) => {
                    let effective = adapted.effective();
                    let trainable = Trainable::Projections(adapted.adapters.targets.clone());
                    let (loss, grads) = loss_and_grads(&effective, &ob, &trainable)?;
                    let st = lora_state.as_mut().unwrap();
                    st.step += 1;
                    let coef = AdamWCoefficients::<f32>::new(&config.optimizer, st.step, lr);
                    let set = &mut adapted.adapters;
                    let factor_grads: Vec<(Vec<f32>, Vec<f32>)> = set
                        .adapters
                        .iter()
                        .map(|a| lora_factor_grads(set, a, grads.layers[a.layer].weight(a.target)))
                        .collect();
                    for (name, (da, db)) in set.adapters.iter().zip(&factor_grads) {
                        if !da.iter().chain(db).all(|x| x.is_finite()) {
                            return Err(Error::NonFiniteGradient {
                                group: format!("lora.{}.{}", name.layer, name.target.name()),
                            });
                        }
                    }
                    for (i, (adapter, (da, db))) in set.adapters.iter_mut().zip(&factor_grads).enumerate() {
                        let (ma, mb) = &mut st.m[i];
                        let (va, vb) = &mut st.v[i];
                        coef.apply(&mut adapter.a.data, da, ma, va);
                        coef.apply(&mut adapter.b.data, db, mb, vb);
                    }
                    loss
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(model.effective()),
                });
            }
            trace.push(FinetuneStep {
                step,
                epoch,
                lr,
                loss: loss as f64,
            });
            step += 1;
        }
    }
    let metrics = FinetuneMetrics {
        mode: config.mode,
        steps: step,
        trainable_params,
        trace,
    };
    Ok((model, metrics))
}

/// Fraction of examples whose completion is reproduced exactly by greedy
/// decoding. With greedy decoding the generated prefix equals the gold
/// prefix as long as every earlier prediction was right, so one
/// teacher-forced pass per example decides the match. Ties go to the
/// lowest token id.
pub fn exact_match(ckpt: &Checkpoint, examples: &[PromptCompletionExample], mode: FinetuneMode) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("exact match", "no examples"));
    }
    let seqs: Vec<Vec<u32>> = examples.iter().map(|e| e.tokens()).collect();
    let modes: Vec<AttentionMode> = examples.iter().map(|e| mode.attention(e.prompt.len())).collect();
    let logits = forward(ckpt, &seqs, &modes)?;
    let mut hits = 0usize;
    for ((ex, seq), lg) in examples.iter().zip(&seqs).zip(&logits) {
        let p = ex.prompt.len();
        let ok = (p.max(1)..seq.len()).all(|j| argmax(lg.row(j - 1)) == seq[j] as usize);
        hits += (ok && p >= 1) as usize;
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Greedy continuation of `prompt` by `n` tokens.
pub fn greedy_complete(ckpt: &Checkpoint, prompt: &[u32], n: usize, mode: FinetuneMode) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::invalid("generation", "empty prompt"));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let logits = forward(ckpt, std::slice::from_ref(&seq), &[mode.attention(prompt.len())])?;
        let last = logits[0].row(seq.len() - 1);
        seq.push(argmax(last) as u32);
    }
    Ok(seq[prompt.len()..].to_vec())
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

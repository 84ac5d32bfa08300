//! Continual-pretraining driver: trapezoidal learning rate, AdamW, the
//! tokenizer swap, per-stage training and the three-stage recipe
//! (swap → embedding update → full training).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Scalar};
use crate::model::io::{decode_params, encode_params, Container, Reader, TAG_OPTIMIZER};
use crate::model::{sequence_nll, Checkpoint, ModelConfig, Params, Trainable};
use crate::objectives::{causal_batch, HybridSchedule, Objective, DEFAULT_MASK_RATE};
use crate::tokenizer::BpeModel;

/// Standard deviation of the noise added to freshly initialized embedding
/// rows after a tokenizer swap.
pub const SWAP_NOISE_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub decay_steps: usize,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps + self.decay_steps > self.total_steps {
            return Err(Error::invalid(
                "schedule",
                format!(
                    "warmup {} + decay {} exceeds total {}",
                    self.warmup_steps, self.decay_steps, self.total_steps
                ),
            ));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::invalid("schedule", "peak_lr must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// Linear warmup from 0, flat peak, linear decay to 0 at `total_steps`.
pub fn trapezoidal_lr(step: usize, spec: &ScheduleSpec) -> Result<f64> {
    spec.validate()?;
    if step > spec.total_steps {
        return Err(Error::invalid(
            "schedule",
            format!("step {step} beyond total {}", spec.total_steps),
        ));
    }
    let decay_start = spec.total_steps - spec.decay_steps;
    let lr = if step < spec.warmup_steps {
        spec.peak_lr * step as f64 / spec.warmup_steps as f64
    } else if step <= decay_start {
        spec.peak_lr
    } else {
        spec.peak_lr * (spec.total_steps - step) as f64 / spec.decay_steps as f64
    };
    Ok(lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub config: AdamWConfig,
    /// Updates applied so far.
    pub step: u64,
    pub m: Params<T>,
    pub v: Params<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &ModelConfig, config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: Params::zeros(model),
            v: Params::zeros(model),
        }
    }
}

/// Per-step AdamW constants for update number `step` (1-based).
#[derive(Debug, Clone, Copy)]
pub struct AdamWCoefficients<T> {
    b1: T,
    b2: T,
    one_b1: T,
    one_b2: T,
    bc1: T,
    bc2: T,
    eps: T,
    wd: T,
    lr: T,
}

impl<T: Scalar> AdamWCoefficients<T> {
    pub fn new(c: &AdamWConfig, step: u64, lr: f64) -> Self {
        let t = step as i32;
        AdamWCoefficients {
            b1: T::from_f64_lossy(c.beta1),
            b2: T::from_f64_lossy(c.beta2),
            one_b1: T::from_f64_lossy(1.0 - c.beta1),
            one_b2: T::from_f64_lossy(1.0 - c.beta2),
            bc1: T::from_f64_lossy(1.0 - c.beta1.powi(t)),
            bc2: T::from_f64_lossy(1.0 - c.beta2.powi(t)),
            eps: T::from_f64_lossy(c.eps),
            wd: T::from_f64_lossy(c.weight_decay),
            lr: T::from_f64_lossy(lr),
        }
    }

    /// Updates one tensor and its moments in place.
    pub fn apply(&self, p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]) {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = self.b1 * m[i] + self.one_b1 * gi;
            v[i] = self.b2 * v[i] + self.one_b2 * gi * gi;
            let m_hat = m[i] / self.bc1;
            let v_hat = v[i] / self.bc2;
            p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.wd * p[i]);
        }
    }
}

/// One decoupled-weight-decay Adam update of every trainable tensor.
/// Frozen tensors are left bit-for-bit untouched, moments included.
pub fn adamw_step<T: Scalar>(
    params: &mut Params<T>,
    grads: &Params<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    trainable: &Trainable,
) -> Result<()> {
    for (kind, g) in grads.tensors() {
        if trainable.includes(kind) && !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteGradient { group: kind.name() });
        }
    }
    state.step += 1;
    let coef = AdamWCoefficients::new(&state.config, state.step, lr);
    let OptimizerState { m, v, .. } = state;
    for ((((kind, p), (_, g)), (_, m)), (_, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        if trainable.includes(kind) {
            coef.apply(p, g, m, v);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Swap,
    EmbedUpdate,
    Full,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Swap => "swap",
            StageKind::EmbedUpdate => "embed_update",
            StageKind::Full => "full",
        }
    }

    pub fn trainable(self) -> Trainable {
        match self {
            StageKind::Swap => Trainable::Nothing,
            StageKind::EmbedUpdate => Trainable::EmbeddingsOnly,
            StageKind::Full => Trainable::All,
        }
    }
}

/// Objective mixing of a stage, before the tokenizer's mask id is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub causal_fraction: f64,
    pub mask_rate: f64,
}

impl ObjectiveConfig {
    pub fn causal() -> Self {
        ObjectiveConfig {
            causal_fraction: 1.0,
            mask_rate: DEFAULT_MASK_RATE,
        }
    }

    pub fn hybrid(causal_fraction: f64) -> Self {
        ObjectiveConfig {
            causal_fraction,
            mask_rate: DEFAULT_MASK_RATE,
        }
    }

    /// `Objective::Causal` is reserved for the causal-only code path; a
    /// causal fraction of 1.0 still goes through the hybrid schedule.
    pub fn resolve(&self, seed: u64, mask_id: Option<u32>) -> Result<Objective> {
        let schedule = HybridSchedule::new(self.causal_fraction, seed)?;
        let mask_id = match mask_id {
            Some(id) => id,
            None if self.causal_fraction >= 1.0 => 0,
            None => {
                return Err(Error::invalid(
                    "objective",
                    "masked next-token prediction needs a tokenizer with a mask marker",
                ))
            }
        };
        Ok(Objective::Hybrid {
            schedule,
            mask_rate: self.mask_rate,
            mask_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub kind: StageKind,
    pub steps: usize,
    pub trainable: Trainable,
    pub schedule: ScheduleSpec,
    pub objective: ObjectiveConfig,
}

impl StageSpec {
    pub fn new(kind: StageKind, steps: usize, peak_lr: f64, warmup_steps: usize, decay_steps: usize) -> Self {
        StageSpec {
            kind,
            steps,
            trainable: kind.trainable(),
            schedule: ScheduleSpec {
                peak_lr,
                warmup_steps,
                decay_steps,
                total_steps: steps,
            },
            objective: ObjectiveConfig::causal(),
        }
    }

    pub fn swap() -> Self {
        StageSpec::new(StageKind::Swap, 0, 0.0, 0, 0)
    }

    pub fn with_objective(mut self, objective: ObjectiveConfig) -> Self {
        self.objective = objective;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.schedule.total_steps != self.steps {
            return Err(Error::invalid("stage", "schedule total must equal stage steps"));
        }
        if self.trainable != self.kind.trainable() {
            return Err(Error::invalid(
                "stage",
                format!("{} stage must train {:?}", self.kind.as_str(), self.kind.trainable()),
            ));
        }
        if self.kind == StageKind::EmbedUpdate && self.steps == 0 {
            return Err(Error::invalid("stage", "embed_update needs at least one step"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub stages: Vec<StageSpec>,
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_budget: u64,
    pub optimizer: AdamWConfig,
    pub model: Option<ModelConfig>,
}

impl TrainPlan {
    /// Checks stage order (swap?, embed_update?, full). With `strict`, both
    /// adaptation stages must be present.
    pub fn validate(&self, strict: bool) -> Result<()> {
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::invalid("plan", "batch_size must be ≥ 1 and seq_len ≥ 2"));
        }
        for s in &self.stages {
            s.validate()?;
        }
        let kinds: Vec<StageKind> = self.stages.iter().map(|s| s.kind).collect();
        let canonical = [StageKind::Swap, StageKind::EmbedUpdate, StageKind::Full];
        let mut it = canonical.iter();
        for k in &kinds {
            if !it.any(|c| c == k) {
                return Err(Error::invalid(
                    "plan",
                    format!("stage order {kinds:?} is not (swap?, embed_update?, full)"),
                ));
            }
        }
        if kinds.last() != Some(&StageKind::Full) {
            return Err(Error::invalid("plan", "the last stage must be full training"));
        }
        if strict {
            for required in [StageKind::Swap, StageKind::EmbedUpdate] {
                if !kinds.contains(&required) {
                    return Err(Error::invalid(
                        "plan",
                        format!("strict order requires a {} stage", required.as_str()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn stage(&self, kind: StageKind) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.kind == kind)
    }

    pub fn from_file(file: &PlanFile) -> Result<Self> {
        let stages = file
            .stage
            .iter()
            .map(|s| {
                let default_fraction = match s.kind {
                    StageKind::Full => crate::objectives::DEFAULT_CAUSAL_FRACTION,
                    _ => 1.0,
                };
                let warmup = s.warmup_steps.min(s.steps);
                let decay = s.decay_steps.min(s.steps - warmup);
                StageSpec::new(s.kind, s.steps, s.peak_lr, warmup, decay).with_objective(ObjectiveConfig {
                    causal_fraction: s.causal_fraction.unwrap_or(default_fraction),
                    mask_rate: s.mask_rate.unwrap_or(DEFAULT_MASK_RATE),
                })
            })
            .collect();
        let plan = TrainPlan {
            stages,
            seed: file.seed,
            batch_size: file.batch_size,
            seq_len: file.seq_len,
            token_budget: file.token_budget,
            optimizer: file.optimizer.unwrap_or_default(),
            model: file.model.clone(),
        };
        plan.validate(false)?;
        Ok(plan)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: PlanFile =
            toml::from_str(text).map_err(|e| Error::format("training plan", e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_toml(&text).map_err(|e| e.in_file(path))
    }
}

/// On-disk training plan (TOML). Warmup and decay are clipped to fit the
/// stage length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub token_budget: u64,
    #[serde(default)]
    pub optimizer: Option<AdamWConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub stage: Vec<StageFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFile {
    pub kind: StageKind,
    #[serde(default)]
    pub steps: usize,
    #[serde(default)]
    pub peak_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default)]
    pub decay_steps: usize,
    #[serde(default)]
    pub causal_fraction: Option<f64>,
    #[serde(default)]
    pub mask_rate: Option<f64>,
}

/// New embedding/head matrices for `new_tok`. Rows whose byte string (or
/// special marker name) exists in `old_tok` are copied; the rest start at
/// the mean of all old rows plus seeded Gaussian noise. Everything else is
/// carried over untouched.
pub fn swap_tokenizer(ckpt: &Checkpoint, old_tok: &BpeModel, new_tok: &BpeModel, seed: u64) -> Result<Checkpoint> {
    ckpt.check_fingerprint(&old_tok.fingerprint())?;
    if ckpt.config.vocab_size != old_tok.vocab_size() {
        return Err(Error::invalid(
            "tokenizer swap",
            format!(
                "checkpoint vocabulary {} does not match old tokenizer {}",
                ckpt.config.vocab_size,
                old_tok.vocab_size()
            ),
        ));
    }
    let new_vocab = new_tok.vocab_size();
    let old_index: Vec<Option<u32>> = (0..new_vocab as u32)
        .map(|id| match new_tok.special_name(id) {
            Some(name) => old_tok.special_id(name),
            None => old_tok.id_of_bytes(new_tok.token_bytes(id).expect("non-special id has bytes")),
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SWAP_NOISE_STD).expect("valid std");
    let mut realign = |old: &Matrix<f32>| -> Matrix<f32> {
        let d = old.cols;
        let mut mean = vec![0.0f64; d];
        for r in 0..old.rows {
            for (m, &x) in mean.iter_mut().zip(old.row(r)) {
                *m += x as f64;
            }
        }
        for m in &mut mean {
            *m /= old.rows as f64;
        }
        let mut out = Matrix::zeros(new_vocab, d);
        for (id, src) in old_index.iter().enumerate() {
            match src {
                Some(o) => out.row_mut(id).copy_from_slice(old.row(*o as usize)),
                None => {
                    for (x, m) in out.row_mut(id).iter_mut().zip(&mean) {
                        *x = (m + noise.sample(&mut rng)) as f32;
                    }
                }
            }
        }
        out
    };

    let mut params = ckpt.params.clone();
    params.embed = realign(&ckpt.params.embed);
    if let Some(head) = &ckpt.params.head {
        params.head = Some(realign(head));
    }
    let mut config = ckpt.config.clone();
    config.vocab_size = new_vocab;
    Ok(Checkpoint {
        config,
        params,
        tokenizer_fingerprint: new_tok.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub objective: String,
    pub loss: f64,
}

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::from(e).in_file(path))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::from(e).in_file(path))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::from(e).in_file(path))
}

/// Single-driver training loop for one stage; resumable from its
/// optimizer state.
pub struct Trainer {
    pub ckpt: Checkpoint,
    pub optimizer: OptimizerState,
    pub stage: StageSpec,
    objective: Objective,
    trace: Vec<TraceRow>,
    step_offset: usize,
}

impl Trainer {
    pub fn new(ckpt: Checkpoint, stage: StageSpec, adamw: AdamWConfig, seed: u64, mask_id: Option<u32>) -> Result<Self> {
        let optimizer = OptimizerState::new(&ckpt.config, adamw);
        Self::resume(ckpt, optimizer, stage, seed, mask_id)
    }

    /// Continues a stage from a saved optimizer state; its step counter
    /// says how many updates were already applied.
    pub fn resume(
        ckpt: Checkpoint,
        optimizer: OptimizerState,
        stage: StageSpec,
        seed: u64,
        mask_id: Option<u32>,
    ) -> Result<Self> {
        stage.validate()?;
        if optimizer.m.len() != ckpt.params.len() {
            return Err(Error::invalid("trainer", "optimizer state does not match the model"));
        }
        let objective = stage.objective.resolve(seed, mask_id)?;
        Ok(Trainer {
            ckpt,
            optimizer,
            stage,
            objective,
            trace: Vec::new(),
            step_offset: 0,
        })
    }

    /// Uses the causal-only objective path regardless of the stage's
    /// objective config.
    pub fn with_causal_only(mut self) -> Self {
        self.objective = Objective::Causal;
        self
    }

    /// Number added to stage-local step indices in the trace.
    pub fn with_step_offset(mut self, offset: usize) -> Self {
        self.step_offset = offset;
        self
    }

    pub fn steps_done(&self) -> usize {
        self.optimizer.step as usize
    }

    pub fn is_finished(&self) -> bool {
        self.steps_done() >= self.stage.steps
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    fn diverged(&self, step: usize) -> Error {
        Error::Diverged {
            step,
            last_good: Box::new(self.ckpt.clone()),
        }
    }

    pub fn step(&mut self, batch: &TokenBatch) -> Result<TraceRow> {
        let s = self.steps_done();
        if s >= self.stage.steps {
            return Err(Error::invalid("trainer", "stage already finished"));
        }
        let lr = trapezoidal_lr(s, &self.stage.schedule)?;
        let usable: TokenBatch = batch.iter().filter(|seq| seq.len() >= 2).cloned().collect();
        if usable.is_empty() {
            return Err(Error::invalid("trainer", format!("batch at step {s} has no sequence of length ≥ 2")));
        }
        let (kind, ob) = self.objective.build(s as u64, &usable)?;
        let (loss, grads) = match crate::model::loss_and_grads(&self.ckpt, &ob, &self.stage.trainable) {
            Ok(r) => r,
            Err(Error::NonFiniteActivation { .. }) => return Err(self.diverged(s)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(self.diverged(s));
        }
        let mut next = self.ckpt.params.clone();
        let mut opt = self.optimizer.clone();
        match adamw_step(&mut next, &grads, &mut opt, lr, &self.stage.trainable) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { .. }) => return Err(self.diverged(s)),
            Err(e) => return Err(e),
        }
        self.ckpt.params = next;
        self.optimizer = opt;
        let row = TraceRow {
            step: self.step_offset + s,
            stage: self.stage.kind.as_str().to_string(),
            lr,
            objective: kind.as_str().to_string(),
            loss: loss as f64,
        };
        self.trace.push(row.clone());
        Ok(row)
    }

    /// Runs up to `max_steps` more steps (or to the end of the stage).
    pub fn run(&mut self, stream: &mut dyn Iterator<Item = TokenBatch>, max_steps: usize) -> Result<()> {
        let mut done = 0;
        while done < max_steps && !self.is_finished() {
            let batch = stream.next().ok_or_else(|| {
                Error::invalid(
                    "trainer",
                    format!("batch stream ended after {} of {} steps", self.steps_done(), self.stage.steps),
                )
            })?;
            self.step(&batch)?;
            done += 1;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Checkpoint, OptimizerState, Vec<TraceRow>) {
        (self.ckpt, self.optimizer, self.trace)
    }
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub ckpt: Checkpoint,
    pub optimizer: OptimizerState,
    pub trace: Vec<TraceRow>,
}

/// Runs a whole stage from a fresh optimizer.
pub fn run_stage(
    ckpt: Checkpoint,
    stage: &StageSpec,
    stream: &mut dyn Iterator<Item = TokenBatch>,
    adamw: AdamWConfig,
    seed: u64,
    mask_id: Option<u32>,
) -> Result<StageOutcome> {
    let mut trainer = Trainer::new(ckpt, stage.clone(), adamw, seed, mask_id)?;
    trainer.run(stream, stage.steps)?;
    let (ckpt, optimizer, trace) = trainer.into_parts();
    Ok(StageOutcome { ckpt, optimizer, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageBoundary {
    pub stage: StageKind,
    pub first_step: usize,
    pub last_step: usize,
    pub first_loss: f64,
    pub last_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub boundaries: Vec<StageBoundary>,
    /// Loss of the base model (old tokenizer) on the first post-swap batch,
    /// per new-tokenizer prediction.
    pub base_reference_loss: f64,
    /// Last loss before full training: the final embedding-update loss, or
    /// the base reference when that stage is skipped.
    pub pre_full_loss: f64,
    pub first_full_loss: Option<f64>,
    /// `first_full_loss − pre_full_loss`.
    pub spike: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    pub ckpt: Checkpoint,
    /// Checkpoint right after the tokenizer swap, before any training.
    pub swapped: Checkpoint,
    pub report: StageReport,
    pub trace: Vec<TraceRow>,
}

/// Loss the base model assigns to the text of `batch` (encoded with
/// `new_tok`) after re-encoding it with `old_tok`. The total is divided by
/// the number of causal predictions the batch makes under `new_tok`, so it
/// is directly comparable with new-tokenizer losses on the same text.
pub fn base_reference_loss(base: &Checkpoint, old_tok: &BpeModel, new_tok: &BpeModel, batch: &TokenBatch) -> Result<f64> {
    let mut old_batch = Vec::new();
    let mut new_predictions = 0usize;
    for seq in batch.iter().filter(|s| s.len() >= 2) {
        new_predictions += seq.len() - 1;
        let text = new_tok.decode(seq)?;
        let ids = old_tok.encode(&text);
        if ids.len() >= 2 {
            old_batch.push(ids);
        }
    }
    if new_predictions == 0 || old_batch.is_empty() {
        return Err(Error::invalid("reference loss", "batch too short"));
    }
    let (nll, _) = sequence_nll(base, &causal_batch(&old_batch)?)?;
    Ok(nll / new_predictions as f64)
}

/// Tokenizer swap, embedding update with a frozen body, then full training.
/// All stages draw batches (encoded with `new_tok`) from `stream`.
pub fn run_three_stage(
    base: &Checkpoint,
    old_tok: &BpeModel,
    new_tok: &BpeModel,
    plan: &TrainPlan,
    stream: &mut dyn Iterator<Item = TokenBatch>,
) -> Result<AdaptationOutcome> {
    plan.validate(false)?;
    let swapped = if plan.stage(StageKind::Swap).is_some() {
        swap_tokenizer(base, old_tok, new_tok, plan.seed)?
    } else {
        base.check_fingerprint(&new_tok.fingerprint())?;
        base.clone()
    };

    let first = stream
        .next()
        .ok_or_else(|| Error::invalid("adaptation", "empty batch stream"))?;
    let reference = base_reference_loss(base, old_tok, new_tok, &first)?;
    let mut stream = std::iter::once(first).chain(stream);

    let mut trace = vec![TraceRow {
        step: 0,
        stage: StageKind::Swap.as_str().into(),
        lr: 0.0,
        objective: "reference".into(),
        loss: reference,
    }];
    let mut boundaries = vec![StageBoundary {
        stage: StageKind::Swap,
        first_step: 0,
        last_step: 0,
        first_loss: reference,
        last_loss: reference,
    }];
    let mut ckpt = swapped.clone();
    let mut pre_full_loss = reference;
    let mut first_full_loss = None;
    let mask_id = new_tok.mask_id();
    for stage in plan.stages.iter().filter(|s| s.kind != StageKind::Swap) {
        if stage.steps == 0 {
            continue;
        }
        let offset = trace.last().map_or(0, |r| r.step + 1);
        let seed = crate::linalg::mix_seed(plan.seed, stage.kind as u64, 0);
        let mut trainer =
            Trainer::new(ckpt, stage.clone(), plan.optimizer, seed, mask_id)?.with_step_offset(offset);
        trainer.run(&mut stream, stage.steps)?;
        let (next, _, rows) = trainer.into_parts();
        ckpt = next;
        let (first_row, last_row) = (rows.first().unwrap(), rows.last().unwrap());
        boundaries.push(StageBoundary {
            stage: stage.kind,
            first_step: first_row.step,
            last_step: last_row.step,
            first_loss: first_row.loss,
            last_loss: last_row.loss,
        });
        match stage.kind {
            StageKind::EmbedUpdate => pre_full_loss = last_row.loss,
            StageKind::Full => first_full_loss = Some(first_row.loss),
            StageKind::Swap => {}
        }
        trace.extend(rows);
    }
    let report = StageReport {
        boundaries,
        base_reference_loss: reference,
        pre_full_loss,
        first_full_loss,
        spike: first_full_loss.map(|f| f - pre_full_loss),
    };
    Ok(AdaptationOutcome {
        ckpt,
        swapped,
        report,
        trace,
    })
}

fn encode_optimizer(state: &OptimizerState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&state.step.to_le_bytes());
    let c = state.config;
    for x in [c.beta1, c.beta2, c.eps, c.weight_decay] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend(encode_params(&state.m));
    buf.extend(encode_params(&state.v));
    buf
}

fn decode_optimizer(cfg: &ModelConfig, bytes: &[u8]) -> Result<OptimizerState> {
    let mut r = Reader::new(bytes);
    let step = r.u64()?;
    let config = AdamWConfig {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        weight_decay: r.f64()?,
    };
    let moment_bytes = 8 + Params::<f32>::zeros(cfg).len() * 4;
    let m = decode_params(cfg, r.take(moment_bytes)?)?;
    let v = decode_params(cfg, r.take(moment_bytes)?)?;
    r.finish()?;
    Ok(OptimizerState { config, step, m, v })
}

/// Container for a checkpoint plus, optionally, its optimizer state.
pub fn checkpoint_container(ckpt: &Checkpoint, optimizer: Option<&OptimizerState>) -> Container {
    let mut c = ckpt.to_container();
    if let Some(opt) = optimizer {
        c.push(TAG_OPTIMIZER, encode_optimizer(opt));
    }
    c
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint, optimizer: Option<&OptimizerState>) -> Result<()> {
    checkpoint_container(ckpt, optimizer).write(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub ckpt: Checkpoint,
    pub optimizer: Option<OptimizerState>,
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let c = Container::read(path)?;
    let parse = || -> Result<LoadedCheckpoint> {
        let ckpt = Checkpoint::from_container(&c)?;
        let optimizer = c
            .get(TAG_OPTIMIZER)
            .map(|b| decode_optimizer(&ckpt.config, b))
            .transpose()?;
        Ok(LoadedCheckpoint { ckpt, optimizer })
    };
    parse().map_err(|e| e.in_file(path))
}

/// Loads a checkpoint to continue training with the tokenizer whose
/// fingerprint is `expected`. A mismatch is refused unless `allow_mismatch`
/// is set; either way it is logged.
pub fn load_for_resume(path: impl AsRef<Path>, expected: &str, allow_mismatch: bool) -> Result<LoadedCheckpoint> {
    let loaded = load_checkpoint(path.as_ref())?;
    if let Err(e) = loaded.ckpt.check_fingerprint(expected) {
        log::warn!("{}: {e}", path.as_ref().display());
        if !allow_mismatch {
            return Err(e);
        }
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_schedule() -> ScheduleSpec {
        ScheduleSpec {
            peak_lr: 1e-4,
            warmup_steps: 1000,
            decay_steps: 10_000,
            total_steps: 60_000,
        }
    }

    #[test]
    fn trapezoid_key_points() {
        let s = reference_schedule();
        assert_eq!(trapezoidal_lr(0, &s).unwrap(), 0.0);
        assert_eq!(trapezoidal_lr(1000, &s).unwrap(), 1e-4);
        assert_eq!(trapezoidal_lr(50_000, &s).unwrap(), 1e-4);
        assert_eq!(trapezoidal_lr(55_000, &s).unwrap(), 5e-5);
        assert_eq!(trapezoidal_lr(60_000, &s).unwrap(), 0.0);
        assert!(trapezoidal_lr(60_001, &s).is_err());
        let bad = ScheduleSpec { total_steps: 10, ..s };
        assert!(trapezoidal_lr(0, &bad).is_err());
    }

    #[test]
    fn adamw_decay_only() {
        let cfg = tiny();
        let mut p = Checkpoint::<f64>::init(cfg.clone(), 1, "").unwrap().params;
        let before = p.clone();
        let g = Params::zeros(&cfg);
        let mut st = OptimizerState::<f64>::new(&cfg, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        adamw_step(&mut p, &g, &mut st, 0.01, &Trainable::All).unwrap();
        assert_eq!(p, before);
        let mut st = OptimizerState::<f64>::new(&cfg, AdamWConfig::default());
        adamw_step(&mut p, &g, &mut st, 0.01, &Trainable::All).unwrap();
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - 0.999 * y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adamw_scalar_hand_computation() {
        // One parameter p = 0.5, g = 0.2, lr = 0.1, defaults.
        // m = 0.02, v = 0.002; m̂ = 0.2, v̂ = 0.04; step = 0.2/(0.2+1e-8) ≈ 1.
        let cfg = tiny();
        let mut p = Params::<f64>::zeros(&cfg);
        let mut g = Params::<f64>::zeros(&cfg);
        p.final_norm[0] = 0.5;
        g.final_norm[0] = 0.2;
        let mut st = OptimizerState::<f64>::new(&cfg, AdamWConfig::default());
        adamw_step(&mut p, &g, &mut st, 0.1, &Trainable::All).unwrap();
        let expected = 0.5 - 0.1 * (0.2 / (0.04f64.sqrt() + 1e-8) + 0.1 * 0.5);
        assert!((p.final_norm[0] - expected).abs() < 1e-15);
        assert!((p.final_norm[0] - 0.395).abs() < 1e-7);
        assert!((st.m.final_norm[0] - 0.02).abs() < 1e-15);
        assert!((st.v.final_norm[0] - 0.002).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_nan_and_skips_frozen() {
        let cfg = tiny();
        let mut p = Checkpoint::<f32>::init(cfg.clone(), 1, "").unwrap().params;
        let mut g = Params::<f32>::zeros(&cfg);
        g.embed.data[0] = f32::NAN;
        let mut st = OptimizerState::new(&cfg, AdamWConfig::default());
        let err = adamw_step(&mut p, &g, &mut st, 0.1, &Trainable::All).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref group } if group == "embed"));
        let before = p.clone();
        g.final_norm[0] = 1.0;
        adamw_step(&mut p, &g, &mut st, 0.1, &Trainable::NonEmbedding).unwrap();
        assert_eq!(p.embed, before.embed);
        assert_ne!(p.final_norm, before.final_norm);
    }

    #[test]
    fn plan_order_validation() {
        let full = StageSpec::new(StageKind::Full, 10, 1e-3, 1, 2);
        let embed = StageSpec::new(StageKind::EmbedUpdate, 5, 1e-3, 1, 1);
        let mk = |stages: Vec<StageSpec>| TrainPlan {
            stages,
            seed: 0,
            batch_size: 2,
            seq_len: 8,
            token_budget: 0,
            optimizer: AdamWConfig::default(),
            model: None,
        };
        assert!(mk(vec![StageSpec::swap(), embed.clone(), full.clone()]).validate(true).is_ok());
        assert!(mk(vec![StageSpec::swap(), full.clone()]).validate(false).is_ok());
        assert!(mk(vec![StageSpec::swap(), full.clone()]).validate(true).is_err());
        assert!(mk(vec![full.clone(), embed.clone()]).validate(false).is_err());
        assert!(mk(vec![embed]).validate(false).is_err());
        let mut wrong = full;
        wrong.trainable = Trainable::EmbeddingsOnly;
        assert!(mk(vec![wrong]).validate(false).is_err());
    }

    #[test]
    fn plan_toml() {
        let text = r#"
            seed = 3
            batch_size = 4
            seq_len = 32

            [[stage]]
            kind = "swap"

            [[stage]]
            kind = "embed_update"
            steps = 20
            peak_lr = 1e-3
            warmup_steps = 2
            decay_steps = 5

            [[stage]]
            kind = "full"
            steps = 50
            peak_lr = 5e-4
            warmup_steps = 5
            decay_steps = 10
        "#;
        let plan = TrainPlan::from_toml(text).unwrap();
        assert_eq!(plan.stages.len(), 3);
        assert_eq!(plan.stage(StageKind::Full).unwrap().objective.causal_fraction, 0.9);
        assert_eq!(plan.stage(StageKind::EmbedUpdate).unwrap().objective.causal_fraction, 1.0);
        assert!(TrainPlan::from_toml("seed = 1\nbatch_size = 1\nseq_len = 4\nbogus = 2\n").is_err());
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 12,
            n_layers: 1,
            n_q_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            vocab_size: 11,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }
}

//! Toy-scale pre-norm decoder: RMSNorm, SwiGLU, rotary positions and
//! grouped-query attention, with no biases and no dropout.

mod forward;
pub mod io;
pub mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Scalar};

pub use forward::{forward, loss_and_grads, sequence_nll, Logits};
pub use ops::{attention, rmsnorm, rope_rotate, swiglu_ffn};

pub const INIT_STD: f64 = 0.02;

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Default desk-scale shape: 64 wide, 2 layers, 4 query and 2 key/value
    /// heads of width 16.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            d_ff: 192,
            n_layers: 2,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            vocab_size,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid("model config", format!("{name} must be ≥ 1")));
            }
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::invalid(
                "model config",
                format!(
                    "{} query heads are not divisible by {} key/value heads",
                    self.n_q_heads, self.n_kv_heads
                ),
            ));
        }
        if self.d_model != self.n_q_heads * self.head_dim {
            return Err(Error::invalid(
                "model config",
                format!(
                    "d_model {} != n_q_heads {} × head_dim {}",
                    self.d_model, self.n_q_heads, self.head_dim
                ),
            ));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::invalid(
                "model config",
                format!("head_dim {} must be even for rotary positions", self.head_dim),
            ));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps >= 0.0) {
            return Err(Error::invalid("model config", "rope_theta must be > 0 and norm_eps ≥ 0"));
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn embedding_param_count(&self) -> usize {
        let per = self.vocab_size * self.d_model;
        if self.tie_embeddings {
            per
        } else {
            2 * per
        }
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let kv = self.kv_dim();
        let per_layer = 2 * d + d * d + 2 * kv * d + d * d + 3 * self.d_ff * d;
        self.embedding_param_count() + self.n_layers * per_layer + d
    }
}

/// Attention visibility. Every mode lets position `i` see a prefix
/// `[0, upper(i))` of the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    Causal,
    Bidirectional,
    /// Bidirectional within the first `n` positions, causal afterwards.
    Prefix(usize),
}

impl AttentionMode {
    #[inline]
    pub fn upper(self, i: usize, len: usize) -> usize {
        match self {
            AttentionMode::Causal => i + 1,
            AttentionMode::Bidirectional => len,
            AttentionMode::Prefix(p) if i < p => p,
            AttentionMode::Prefix(_) => i + 1,
        }
    }

    pub fn validate(self, len: usize) -> Result<()> {
        match self {
            AttentionMode::Prefix(p) if p > len => Err(Error::invalid(
                "attention mode",
                format!("prefix length {p} exceeds sequence length {len}"),
            )),
            _ => Ok(()),
        }
    }

    /// Dense 0/1 visibility matrix, row `i` = what position `i` attends to.
    pub fn mask(self, len: usize) -> Vec<Vec<bool>> {
        (0..len)
            .map(|i| {
                let hi = self.upper(i, len);
                (0..len).map(|j| j < hi).collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ATTENTION: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];
    pub const ALL: [Projection; 7] = [
        Projection::Q,
        Projection::K,
        Projection::V,
        Projection::O,
        Projection::Gate,
        Projection::Up,
        Projection::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
            Projection::Gate => "gate",
            Projection::Up => "up",
            Projection::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("projection", format!("unknown target {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Embed,
    AttnNorm(usize),
    Weight(usize, Projection),
    FfnNorm(usize),
    FinalNorm,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Input embeddings and output head.
    Embedding,
    Body,
}

impl ParamKind {
    pub fn group(self) -> ParamGroup {
        match self {
            ParamKind::Embed | ParamKind::Head => ParamGroup::Embedding,
            _ => ParamGroup::Body,
        }
    }

    pub fn name(self) -> String {
        match self {
            ParamKind::Embed => "embed".into(),
            ParamKind::AttnNorm(l) => format!("layers.{l}.attn_norm"),
            ParamKind::Weight(l, p) => format!("layers.{l}.w_{}", p.name()),
            ParamKind::FfnNorm(l) => format!("layers.{l}.ffn_norm"),
            ParamKind::FinalNorm => "final_norm".into(),
            ParamKind::Head => "head".into(),
        }
    }
}

/// Which parameters receive gradients and updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    All,
    EmbeddingsOnly,
    NonEmbedding,
    /// Only the listed weight matrices, in every layer.
    Projections(Vec<Projection>),
    Nothing,
}

impl Trainable {
    pub fn includes(&self, kind: ParamKind) -> bool {
        match self {
            Trainable::All => true,
            Trainable::EmbeddingsOnly => kind.group() == ParamGroup::Embedding,
            Trainable::NonEmbedding => kind.group() == ParamGroup::Body,
            Trainable::Projections(ps) => matches!(kind, ParamKind::Weight(_, p) if ps.contains(&p)),
            Trainable::Nothing => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn weight(&self, p: Projection) -> &Matrix<T> {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
            Projection::Gate => &self.w_gate,
            Projection::Up => &self.w_up,
            Projection::Down => &self.w_down,
        }
    }

    pub fn weight_mut(&mut self, p: Projection) -> &mut Matrix<T> {
        match p {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
            Projection::O => &mut self.wo,
            Projection::Gate => &mut self.w_gate,
            Projection::Up => &mut self.w_up,
            Projection::Down => &mut self.w_down,
        }
    }
}

/// Full parameter set, also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub embed: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    /// `None` when the output head is tied to `embed`.
    pub head: Option<Matrix<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let kv = cfg.kv_dim();
        let layer = || LayerParams {
            attn_norm: vec![T::zero(); d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(kv, d),
            wv: Matrix::zeros(kv, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: vec![T::zero(); d],
            w_gate: Matrix::zeros(cfg.d_ff, d),
            w_up: Matrix::zeros(cfg.d_ff, d),
            w_down: Matrix::zeros(d, cfg.d_ff),
        };
        Params {
            embed: Matrix::zeros(cfg.vocab_size, d),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            final_norm: vec![T::zero(); d],
            head: (!cfg.tie_embeddings).then(|| Matrix::zeros(cfg.vocab_size, d)),
        }
    }

    pub fn head(&self) -> &Matrix<T> {
        self.head.as_ref().unwrap_or(&self.embed)
    }

    /// Tensors in canonical order: embed, per layer (attn_norm, q, k, v, o,
    /// ffn_norm, gate, up, down), final_norm, head.
    pub fn tensors(&self) -> Vec<(ParamKind, &[T])> {
        let mut out: Vec<(ParamKind, &[T])> = vec![(ParamKind::Embed, &self.embed.data)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((ParamKind::AttnNorm(l), &layer.attn_norm));
            for p in Projection::ATTENTION {
                out.push((ParamKind::Weight(l, p), &layer.weight(p).data));
            }
            out.push((ParamKind::FfnNorm(l), &layer.ffn_norm));
            for p in [Projection::Gate, Projection::Up, Projection::Down] {
                out.push((ParamKind::Weight(l, p), &layer.weight(p).data));
            }
        }
        out.push((ParamKind::FinalNorm, &self.final_norm));
        if let Some(h) = &self.head {
            out.push((ParamKind::Head, &h.data));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut [T])> {
        let mut out: Vec<(ParamKind, &mut [T])> = vec![(ParamKind::Embed, &mut self.embed.data)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let LayerParams {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w_gate,
                w_up,
                w_down,
            } = layer;
            out.push((ParamKind::AttnNorm(l), attn_norm));
            out.push((ParamKind::Weight(l, Projection::Q), &mut wq.data));
            out.push((ParamKind::Weight(l, Projection::K), &mut wk.data));
            out.push((ParamKind::Weight(l, Projection::V), &mut wv.data));
            out.push((ParamKind::Weight(l, Projection::O), &mut wo.data));
            out.push((ParamKind::FfnNorm(l), ffn_norm));
            out.push((ParamKind::Weight(l, Projection::Gate), &mut w_gate.data));
            out.push((ParamKind::Weight(l, Projection::Up), &mut w_up.data));
            out.push((ParamKind::Weight(l, Projection::Down), &mut w_down.data));
        }
        out.push((ParamKind::FinalNorm, &mut self.final_norm));
        if let Some(h) = &mut self.head {
            out.push((ParamKind::Head, &mut h.data));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: crate::linalg::cast_slice(&l.attn_norm),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: crate::linalg::cast_slice(&l.ffn_norm),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: crate::linalg::cast_slice(&self.final_norm),
            head: self.head.as_ref().map(Matrix::cast),
        }
    }

    /// Bitwise equality of every tensor in `group`.
    pub fn group_bits_equal(&self, other: &Params<T>, group: ParamGroup) -> bool {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .filter(|((k, _), _)| k.group() == group)
            .all(|((ka, a), (kb, b))| {
                ka == &kb
                    && a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }
}

/// Model weights plus the fingerprint of the tokenizer they were trained
/// with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub tokenizer_fingerprint: String,
}

impl<T: Scalar> Checkpoint<T> {
    /// Gaussian initialization (σ = 0.02, residual output projections scaled
    /// by 1/√(2·layers)), unit norm gains.
    pub fn init(config: ModelConfig, seed: u64, tokenizer_fingerprint: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let mut params = Params::<T>::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let base = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        for (kind, t) in params.tensors_mut() {
            match kind {
                ParamKind::AttnNorm(_) | ParamKind::FfnNorm(_) | ParamKind::FinalNorm => {
                    t.fill(T::one())
                }
                ParamKind::Weight(_, Projection::O | Projection::Down) => {
                    for x in t.iter_mut() {
                        *x = T::from_f64_lossy(resid.sample(&mut rng));
                    }
                }
                _ => {
                    for x in t.iter_mut() {
                        *x = T::from_f64_lossy(base.sample(&mut rng));
                    }
                }
            }
        }
        Ok(Checkpoint {
            config,
            params,
            tokenizer_fingerprint: tokenizer_fingerprint.into(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.cast(),
            tokenizer_fingerprint: self.tokenizer_fingerprint.clone(),
        }
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.tokenizer_fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: self.tokenizer_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

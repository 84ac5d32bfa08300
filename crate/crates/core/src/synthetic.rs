//! Small synthetic workloads: a pair of related toy languages and a
//! sequence-copy task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::collections::BTreeMap;

use crate::corpus::{
    pack_by_language, plan_mixture, BatchStream, Document, LanguageSlice, MixturePlan, SliceAllocation,
};
use crate::error::Result;
use crate::eval::{perplexity, EvalCorpus};
use crate::finetune::PromptCompletionExample;
use crate::linalg::mix_seed;
use crate::model::{AttentionMode, Checkpoint, ModelConfig};
use crate::pipeline::{run_stage, run_three_stage, AdaptationOutcome, AdamWConfig, StageKind, StageSpec, TrainPlan};
use crate::tokenizer::{train_bpe, BpeModel, DEFAULT_SPECIALS};

/// Letters of one toy language. Both languages share a lexicon and a word
/// chain; they differ only in how syllables are spelled.
#[derive(Debug, Clone, Copy)]
pub struct Orthography {
    pub consonants: [&'static str; 8],
    pub vowels: [&'static str; 5],
}

/// ASCII spelling.
pub const LATIN: Orthography = Orthography {
    consonants: ["p", "t", "k", "m", "n", "s", "l", "r"],
    vowels: ["a", "e", "i", "o", "u"],
};

/// Spelling with two-byte UTF-8 letters.
pub const DIACRITIC: Orthography = Orthography {
    consonants: ["č", "š", "ž", "đ", "ŋ", "ŧ", "l", "r"],
    vowels: ["á", "e", "i", "ó", "u"],
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Syllable {
    onset: u8,
    vowel: u8,
    coda: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct ToyGrammar {
    lexicon: Vec<Vec<Syllable>>,
    /// Likely successors of each word.
    successors: Vec<[usize; 4]>,
}

impl ToyGrammar {
    pub fn new(lexicon_size: usize, seed: u64) -> Self {
        assert!(lexicon_size >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lexicon = Vec::with_capacity(lexicon_size);
        while lexicon.len() < lexicon_size {
            let n = rng.random_range(1..=3);
            let word: Vec<Syllable> = (0..n)
                .map(|_| Syllable {
                    onset: rng.random_range(0..8),
                    vowel: rng.random_range(0..5),
                    coda: rng.random_bool(0.25).then(|| rng.random_range(4..8)),
                })
                .collect();
            if !lexicon.contains(&word) {
                lexicon.push(word);
            }
        }
        let successors = (0..lexicon_size)
            .map(|_| std::array::from_fn(|_| zipf_index(&mut rng, lexicon_size)))
            .collect();
        ToyGrammar { lexicon, successors }
    }

    pub fn lexicon_size(&self) -> usize {
        self.lexicon.len()
    }

    pub fn spell(&self, word: usize, ortho: &Orthography) -> String {
        let mut s = String::new();
        for syl in &self.lexicon[word] {
            s.push_str(ortho.consonants[syl.onset as usize]);
            s.push_str(ortho.vowels[syl.vowel as usize]);
            if let Some(c) = syl.coda {
                s.push_str(ortho.consonants[c as usize]);
            }
        }
        s
    }

    /// Word ids of one sentence: mostly follows the successor chain, with
    /// occasional jumps to a Zipf-distributed word.
    pub fn sentence(&self, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.random_range(4..=10);
        let mut w = zipf_index(rng, self.lexicon.len());
        let mut out = vec![w];
        while out.len() < len {
            w = if rng.random_bool(0.8) {
                self.successors[w][rng.random_range(0..4)]
            } else {
                zipf_index(rng, self.lexicon.len())
            };
            out.push(w);
        }
        out
    }

    pub fn document(&self, rng: &mut impl Rng, ortho: &Orthography, sentences: usize) -> String {
        let mut text = String::new();
        for i in 0..sentences {
            if i > 0 {
                text.push(' ');
            }
            let words: Vec<String> = self.sentence(rng).into_iter().map(|w| self.spell(w, ortho)).collect();
            text.push_str(&words.join(" "));
            text.push('.');
        }
        text
    }
}

fn zipf_index(rng: &mut impl Rng, n: usize) -> usize {
    // Inverse-CDF sample of p(i) ∝ 1/(i+1) via the continuous approximation.
    let u: f64 = rng.random();
    let x = ((n as f64 + 1.0).ln() * u).exp() - 1.0;
    (x as usize).min(n - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyCorpusConfig {
    pub lexicon_size: usize,
    pub docs_per_language: usize,
    pub sentences_per_doc: usize,
    /// Seeds the grammar.
    pub seed: u64,
    /// Selects an independent sample of documents from the same grammar.
    pub sample_stream: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            lexicon_size: 120,
            docs_per_language: 400,
            sentences_per_doc: 6,
            seed: 0,
            sample_stream: 0,
        }
    }
}

/// Documents labelled `"a"` (ASCII spelling) and `"b"` (two-byte letters)
/// drawn from one shared grammar.
pub fn two_language_corpus(config: &ToyCorpusConfig) -> Vec<Document> {
    let grammar = ToyGrammar::new(config.lexicon_size, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x7a11_0c0e, config.sample_stream));
    let mut docs = Vec::with_capacity(2 * config.docs_per_language);
    for _ in 0..config.docs_per_language {
        docs.push(Document::new("a", grammar.document(&mut rng, &LATIN, config.sentences_per_doc)));
        docs.push(Document::new("b", grammar.document(&mut rng, &DIACRITIC, config.sentences_per_doc)));
    }
    docs
}

/// Token layout of the copy task: `<bos>`, separator, then the symbols.
pub const COPY_BOS: u32 = 0;
pub const COPY_SEP: u32 = 1;

pub fn copy_vocab_size(alphabet: usize) -> usize {
    alphabet + 2
}

/// Prompt `<bos> s₁ … sₖ <sep>`, completion `s₁ … sₖ`.
pub fn copy_examples(n: usize, alphabet: usize, length: usize, seed: u64) -> Vec<PromptCompletionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let symbols: Vec<u32> = (0..length).map(|_| 2 + rng.random_range(0..alphabet as u32)).collect();
            let mut prompt = vec![COPY_BOS];
            prompt.extend(&symbols);
            prompt.push(COPY_SEP);
            PromptCompletionExample {
                prompt,
                completion: symbols,
            }
        })
        .collect()
}

/// Settings of the two-language adaptation experiment: a base model is
/// pretrained on mostly language `a` with the `a` tokenizer, then adapted
/// to language `b` with a tokenizer trained on `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyExperimentConfig {
    pub corpus: ToyCorpusConfig,
    pub held_out_docs: usize,
    pub vocab_size: usize,
    pub model: ModelConfig,
    /// Share of language `b` in base pretraining.
    pub base_b_share: f64,
    pub base_steps: usize,
    pub base_lr: f64,
    pub embed_steps: usize,
    pub embed_lr: f64,
    pub full_steps: usize,
    pub full_lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Default for ToyExperimentConfig {
    fn default() -> Self {
        ToyExperimentConfig {
            corpus: ToyCorpusConfig::default(),
            held_out_docs: 40,
            vocab_size: 320,
            model: ModelConfig::desk(320),
            base_b_share: 0.3,
            base_steps: 300,
            base_lr: 3e-3,
            embed_steps: 100,
            embed_lr: 3e-3,
            full_steps: 100,
            full_lr: 1e-3,
            batch_size: 8,
            seq_len: 64,
        }
    }
}

/// Data and tokenizers shared by every run of the experiment.
#[derive(Debug, Clone)]
pub struct ToySetup {
    pub config: ToyExperimentConfig,
    pub docs: Vec<Document>,
    pub held_out: Vec<Document>,
    /// Trained on language `a`.
    pub old_tok: BpeModel,
    /// Trained on language `b`.
    pub new_tok: BpeModel,
}

fn texts<'a>(docs: &'a [Document], lang: &str) -> Vec<&'a str> {
    docs.iter().filter(|d| d.lang == lang).map(|d| d.text.as_str()).collect()
}

/// Fixed-proportion mixture; each language gets `budget · share` tokens.
fn proportional_mixture(shards: &BTreeMap<String, Vec<u32>>, shares: &[(&str, f64)], budget: u64) -> MixturePlan {
    let slices: Vec<SliceAllocation> = shares
        .iter()
        .enumerate()
        .map(|(i, &(lang, share))| {
            let raw = shards[lang].len() as u64;
            let effective = (budget as f64 * share).round() as u64;
            SliceAllocation {
                lang: lang.to_string(),
                raw_tokens: raw,
                priority: i as u32,
                effective_tokens: effective,
                upsample_factor: effective as f64 / raw as f64,
                proportion: share,
            }
        })
        .collect();
    MixturePlan {
        slices,
        budget_tokens: budget,
        max_repetitions: 16,
        unmet_tokens: 0,
    }
}

impl ToySetup {
    pub fn new(config: ToyExperimentConfig) -> Result<Self> {
        let docs = two_language_corpus(&config.corpus);
        let held_out = two_language_corpus(&ToyCorpusConfig {
            docs_per_language: config.held_out_docs,
            sample_stream: config.corpus.sample_stream + 1,
            ..config.corpus
        });
        let old_tok = train_bpe(&texts(&docs, "a"), config.vocab_size, &DEFAULT_SPECIALS)?;
        let new_tok = train_bpe(&texts(&docs, "b"), config.vocab_size, &DEFAULT_SPECIALS)?;
        Ok(ToySetup {
            config,
            docs,
            held_out,
            old_tok,
            new_tok,
        })
    }

    fn model_config(&self, tok: &BpeModel) -> ModelConfig {
        ModelConfig {
            vocab_size: tok.vocab_size(),
            ..self.config.model.clone()
        }
    }

    /// Base model trained from scratch with the old tokenizer.
    pub fn pretrain_base(&self, seed: u64) -> Result<Checkpoint> {
        let c = &self.config;
        let ckpt = Checkpoint::init(self.model_config(&self.old_tok), seed, self.old_tok.fingerprint())?;
        let shards = pack_by_language(&self.old_tok, &self.docs);
        let budget = (c.base_steps * c.batch_size * c.seq_len) as u64 * 2;
        let mixture = proportional_mixture(&shards, &[("a", 1.0 - c.base_b_share), ("b", c.base_b_share)], budget);
        let mut stream = BatchStream::new(&mixture, &shards, mix_seed(seed, 1, 0), c.seq_len, c.batch_size)?;
        let warmup = c.base_steps / 10;
        let stage = StageSpec::new(StageKind::Full, c.base_steps, c.base_lr, warmup, c.base_steps / 5);
        let out = run_stage(ckpt, &stage, &mut stream, AdamWConfig::default(), seed, None)?;
        Ok(out.ckpt)
    }

    /// Adaptation plan; without the embedding update the swap is followed
    /// directly by full training.
    pub fn plan(&self, seed: u64, with_embed_update: bool) -> TrainPlan {
        let c = &self.config;
        let mut stages = vec![StageSpec::swap()];
        if with_embed_update {
            stages.push(StageSpec::new(
                StageKind::EmbedUpdate,
                c.embed_steps,
                c.embed_lr,
                c.embed_steps / 10,
                c.embed_steps / 5,
            ));
        }
        stages.push(StageSpec::new(
            StageKind::Full,
            c.full_steps,
            c.full_lr,
            c.full_steps / 10,
            c.full_steps / 5,
        ));
        TrainPlan {
            stages,
            seed,
            batch_size: c.batch_size,
            seq_len: c.seq_len,
            token_budget: 0,
            optimizer: AdamWConfig::default(),
            model: None,
        }
    }

    /// Batches of language `b` under the new tokenizer, enough for `steps`.
    pub fn adaptation_stream(&self, seed: u64, steps: usize) -> Result<BatchStream> {
        let c = &self.config;
        let b_docs: Vec<Document> = self.docs.iter().filter(|d| d.lang == "b").cloned().collect();
        let shards = pack_by_language(&self.new_tok, &b_docs);
        let budget = ((steps + 1) * c.batch_size * c.seq_len) as u64;
        let mixture = plan_mixture(&[LanguageSlice::new("b", shards["b"].len() as u64, 0)], budget, 16)?;
        BatchStream::new(&mixture, &shards, seed, c.seq_len, c.batch_size)
    }

    pub fn adapt(&self, base: &Checkpoint, seed: u64, with_embed_update: bool) -> Result<AdaptationOutcome> {
        let plan = self.plan(seed, with_embed_update);
        let steps = plan.stages.iter().map(|s| s.steps).sum();
        let mut stream = self.adaptation_stream(mix_seed(seed, 2, 0), steps)?;
        run_three_stage(base, &self.old_tok, &self.new_tok, &plan, &mut stream)
    }

    /// Held-out perplexity of language `b` under the new tokenizer.
    pub fn held_out_perplexity(&self, ckpt: &Checkpoint) -> Result<f64> {
        let b: Vec<Document> = self.held_out.iter().filter(|d| d.lang == "b").cloned().collect();
        let corpus = EvalCorpus::encode(&self.new_tok, &b, self.config.seq_len)?;
        let report = perplexity(ckpt, &corpus, AttentionMode::Causal)?;
        Ok(report.languages["b"].perplexity)
    }
}

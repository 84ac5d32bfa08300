//! Command-line front end. Every command writes its outputs plus a
//! `manifest.json` (resolved arguments and SHA-256 of inputs and outputs)
//! into `--out`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::{
    chinchilla_ratio, pack_by_language, parse_slices, plan_mixture, read_labeled_corpus, repetition_warning,
    BatchStream, Document, LanguageSlice, MixturePlan,
};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, perplexity, EvalCorpus};
use crate::finetune::{
    exact_match, finetune, lora_attach, read_examples, save_adapted, FinetuneConfig, FinetuneMode, FinetuneModel,
};
use crate::model::{AttentionMode, Checkpoint, ModelConfig, Projection};
use crate::pipeline::{
    load_checkpoint, read_trace_csv, run_stage, run_three_stage, save_checkpoint, write_trace_csv, StageKind,
    TrainPlan,
};
use crate::tokenizer::{fertility, train_bpe, BpeModel, DEFAULT_SPECIALS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser, Serialize)]
#[command(name = "langadapt", version, about = "Language adaptation of small decoder-only models")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct CommonArgs {
    /// Configuration file (training plan or finetune settings, TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (defaults to LANGADAPT_THREADS, then all cores).
    #[arg(long, global = true, env = "LANGADAPT_THREADS")]
    pub threads: Option<usize>,
    /// Require both the tokenizer-swap and embedding-update stages.
    #[arg(long, global = true)]
    pub strict_order: bool,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Train a byte-level BPE tokenizer and report fertility.
    TrainTokenizer(TrainTokenizerArgs),
    /// Plan a data mixture and check the token/parameter ratio.
    Plan(PlanArgs),
    /// Train a model from scratch.
    Pretrain(PretrainArgs),
    /// Three-stage adaptation to a new tokenizer.
    Adapt(AdaptArgs),
    /// Prompt → completion finetuning (full or LoRA).
    Finetune(FinetuneArgs),
    /// Per-language perplexity.
    Eval(EvalArgs),
    /// Compare two loss traces.
    Compare(CompareArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainTokenizerArgs {
    /// Labelled corpus files (`<lang><TAB><text>` per line).
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long)]
    pub vocab_size: usize,
    /// Train only on these languages (fertility still covers all).
    #[arg(long, value_delimiter = ',')]
    pub langs: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    /// Slice list: `<lang> <raw_tokens> <priority>` per line.
    #[arg(long)]
    pub slices: Option<PathBuf>,
    /// Token budget for the mixture.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub max_repetitions: u32,
    /// Model parameter count for the scaling check.
    #[arg(long)]
    pub params: Option<f64>,
    /// Training tokens for the scaling check (defaults to the budget).
    #[arg(long)]
    pub tokens: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Labelled corpus files.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Mixture plan table from `plan`; by default languages are filled in
    /// alphabetical priority.
    #[arg(long)]
    pub mixture: Option<PathBuf>,
    /// Use only these languages.
    #[arg(long, value_delimiter = ',')]
    pub langs: Vec<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AdaptArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub old_tokenizer: PathBuf,
    #[arg(long)]
    pub new_tokenizer: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum ModeArg {
    Causal,
    Prefix,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Training examples (`prompt<TAB>completion`).
    #[arg(long)]
    pub examples: PathBuf,
    /// Held-out examples scored by greedy exact match.
    #[arg(long)]
    pub eval_examples: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// LoRA rank; 0 finetunes every weight.
    #[arg(long, default_value_t = 0)]
    pub lora_rank: usize,
    #[arg(long, default_value_t = crate::finetune::DEFAULT_LORA_ALPHA)]
    pub lora_alpha: f64,
    #[arg(long, value_delimiter = ',', default_value = "q,k,v,o")]
    pub lora_targets: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// `causal`, `bidirectional` or `prefix:<n>`.
    #[arg(long, default_value = "causal")]
    pub mode: String,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Loss trace CSV of run A.
    #[arg(long)]
    pub a: PathBuf,
    /// Loss trace CSV of run B.
    #[arg(long)]
    pub b: PathBuf,
}

/// Whether an error stems from bad input rather than a failed computation.
pub fn is_usage_error(e: &Error) -> bool {
    match e {
        Error::File { source, .. } => match source.as_ref() {
            Error::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
            other => is_usage_error(other),
        },
        Error::Invalid { .. }
        | Error::Format { .. }
        | Error::VocabTooSmall { .. }
        | Error::FingerprintMismatch { .. }
        | Error::EmptyCorpus
        | Error::NoWords
        | Error::TokenOutOfRange { .. }
        | Error::Json(_) => true,
        _ => false,
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::invalid("threads", "must be ≥ 1"));
        }
        // Fails only if a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&c.out).map_err(|e| Error::from(e).in_file(&c.out))?;
    let mut manifest = Manifest::new(cli);
    match &cli.command {
        Command::TrainTokenizer(a) => cmd_train_tokenizer(c, a, &mut manifest)?,
        Command::Plan(a) => cmd_plan(c, a, &mut manifest)?,
        Command::Pretrain(a) => cmd_pretrain(c, a, &mut manifest)?,
        Command::Adapt(a) => cmd_adapt(c, a, &mut manifest)?,
        Command::Finetune(a) => cmd_finetune(c, a, &mut manifest)?,
        Command::Eval(a) => cmd_eval(c, a, &mut manifest)?,
        Command::Compare(a) => cmd_compare(c, a, &mut manifest)?,
    }
    manifest.write(&c.out)
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    args: serde_json::Value,
    resolved: BTreeMap<String, serde_json::Value>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Manifest {
    fn new(cli: &Cli) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            args: serde_json::to_value(cli).unwrap_or(serde_json::Value::Null),
            resolved: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into());
        self.outputs.insert(name, sha256_hex(&bytes));
        Ok(())
    }

    fn write_output(&mut self, dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::from(e).in_file(&path))?;
        self.output(&path)?;
        Ok(path)
    }

    fn resolve(&mut self, key: &str, value: impl Serialize) {
        self.resolved
            .insert(key.into(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::from(e).in_file(&path))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load_corpora(paths: &[PathBuf], langs: &[String], manifest: &mut Manifest) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for p in paths {
        manifest.input(p)?;
        docs.extend(read_labeled_corpus(p)?);
    }
    if !langs.is_empty() {
        docs.retain(|d| langs.contains(&d.lang));
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(docs)
}

fn load_tokenizer(path: &Path, manifest: &mut Manifest) -> Result<BpeModel> {
    manifest.input(path)?;
    BpeModel::load(path)
}

fn load_model(path: &Path, manifest: &mut Manifest) -> Result<Checkpoint> {
    manifest.input(path)?;
    Ok(load_checkpoint(path)?.ckpt)
}

fn load_plan(common: &CommonArgs, data: &DataArgs, manifest: &mut Manifest) -> Result<TrainPlan> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::invalid("arguments", "--config <plan.toml> is required"))?;
    manifest.input(path)?;
    let mut plan = TrainPlan::load(path)?;
    if let Some(s) = common.seed {
        plan.seed = s;
    }
    if let Some(b) = data.batch_size {
        plan.batch_size = b;
    }
    if let Some(l) = data.seq_len {
        plan.seq_len = l;
    }
    plan.validate(common.strict_order).map_err(|e| e.in_file(path))?;
    Ok(plan)
}

/// Mixture over the packed languages: the `--mixture` table when given,
/// otherwise greedy filling in alphabetical priority. The budget covers
/// at least every planned step.
fn data_mixture(
    data: &DataArgs,
    shards: &BTreeMap<String, Vec<u32>>,
    plan: &TrainPlan,
    steps: usize,
    manifest: &mut Manifest,
) -> Result<MixturePlan> {
    if let Some(path) = &data.mixture {
        let bytes = manifest.input(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format("mixture plan", "not UTF-8").in_file(path))?;
        return MixturePlan::from_table(&text).map_err(|e| e.in_file(path));
    }
    let needed = (steps * plan.batch_size * plan.seq_len) as u64;
    let budget = if plan.token_budget > 0 { plan.token_budget } else { needed };
    let slices: Vec<LanguageSlice> = shards
        .iter()
        .enumerate()
        .map(|(i, (lang, t))| LanguageSlice::new(lang.clone(), t.len() as u64, i as u32))
        .collect();
    plan_mixture(&slices, budget, 16)
}

fn cmd_train_tokenizer(_c: &CommonArgs, a: &TrainTokenizerArgs, m: &mut Manifest) -> Result<()> {
    let docs = load_corpora(&a.corpus, &[], m)?;
    let training: Vec<&str> = docs
        .iter()
        .filter(|d| a.langs.is_empty() || a.langs.contains(&d.lang))
        .map(|d| d.text.as_str())
        .collect();
    if training.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tok = train_bpe(&training, a.vocab_size, &DEFAULT_SPECIALS)?;
    let report = fertility(&tok, &docs)?;
    m.resolve("vocab_size", tok.vocab_size());
    m.resolve("fingerprint", tok.fingerprint());
    let out = &_c.out;
    let path = out.join("tokenizer.bpe");
    tok.save(&path)?;
    m.output(&path)?;
    m.write_output(out, "fertility.csv", report.to_csv())?;
    println!("tokenizer: {} ({} tokens)", path.display(), tok.vocab_size());
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_plan(c: &CommonArgs, a: &PlanArgs, m: &mut Manifest) -> Result<()> {
    if a.slices.is_none() && a.params.is_none() {
        return Err(Error::invalid("arguments", "give --slices and --budget, or --params and --tokens"));
    }
    if let Some(path) = &a.slices {
        let budget = a
            .budget
            .ok_or_else(|| Error::invalid("arguments", "--budget is required with --slices"))?;
        let bytes = m.input(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format("slice list", "not UTF-8").in_file(path))?;
        let slices = parse_slices(&text).map_err(|e| e.in_file(path))?;
        let plan = plan_mixture(&slices, budget as u64, a.max_repetitions)?;
        m.write_output(&c.out, "mixture.tsv", plan.to_table())?;
        print!("{}", plan.to_table());
        for w in repetition_warning(&plan) {
            println!(
                "repetition: {} ×{:.2} ({})",
                w.lang,
                w.factor,
                w.severity.as_str()
            );
        }
    }
    if let Some(params) = a.params {
        let tokens = a
            .tokens
            .or(a.budget)
            .ok_or_else(|| Error::invalid("arguments", "--tokens or --budget is required with --params"))?;
        let (ratio, verdict) = chinchilla_ratio(params, tokens)?;
        let cost = crate::eval::estimate_flops(params, tokens)?;
        m.resolve("tokens_per_param", ratio);
        m.resolve("total_flops", cost.total_flops);
        let text = format!(
            "tokens_per_param,verdict,total_flops\n{ratio:.2},{},{:.3e}\n",
            verdict.as_str(),
            cost.total_flops
        );
        m.write_output(&c.out, "scaling.csv", &text)?;
        println!("tokens per parameter: {ratio:.2} ({})", verdict.as_str());
        println!("training FLOPs: {:.3e}", cost.total_flops);
    }
    Ok(())
}

fn cmd_pretrain(c: &CommonArgs, a: &PretrainArgs, m: &mut Manifest) -> Result<()> {
    let plan = load_plan(c, &a.data, m)?;
    let tok = load_tokenizer(&a.tokenizer, m)?;
    let docs = load_corpora(&a.data.corpus, &a.data.langs, m)?;
    if plan.stages.iter().any(|s| s.kind != StageKind::Full) {
        return Err(Error::invalid("plan", "pretraining takes only full stages"));
    }
    let steps: usize = plan.stages.iter().map(|s| s.steps).sum();
    let shards = pack_by_language(&tok, &docs);
    let mixture = data_mixture(&a.data, &shards, &plan, steps, m)?;
    let mut config = plan.model.clone().unwrap_or_else(|| ModelConfig::desk(tok.vocab_size()));
    config.vocab_size = tok.vocab_size();
    m.resolve("model", &config);
    m.resolve("mixture", &mixture);
    m.resolve("seed", plan.seed);
    let mut ckpt = Checkpoint::init(config, plan.seed, tok.fingerprint())?;
    let mut stream = BatchStream::new(&mixture, &shards, plan.seed, plan.seq_len, plan.batch_size)?;
    let mut trace = Vec::new();
    let mut optimizer = None;
    for (i, stage) in plan.stages.iter().enumerate() {
        let seed = crate::linalg::mix_seed(plan.seed, 1, i as u64);
        let out = run_stage(ckpt, stage, &mut stream, plan.optimizer, seed, tok.mask_id())?;
        ckpt = out.ckpt;
        trace.extend(out.trace);
        optimizer = Some(out.optimizer);
    }
    let path = c.out.join("model.ckpt");
    save_checkpoint(&path, &ckpt, optimizer.as_ref())?;
    m.output(&path)?;
    let trace_path = c.out.join("loss.csv");
    write_trace_csv(&trace_path, &trace)?;
    m.output(&trace_path)?;
    if let Some(last) = trace.last() {
        println!("pretrained {} steps, final loss {:.4}", trace.len(), last.loss);
    }
    Ok(())
}

fn cmd_adapt(c: &CommonArgs, a: &AdaptArgs, m: &mut Manifest) -> Result<()> {
    let plan = load_plan(c, &a.data, m)?;
    let base = load_model(&a.base, m)?;
    let old_tok = load_tokenizer(&a.old_tokenizer, m)?;
    let new_tok = load_tokenizer(&a.new_tokenizer, m)?;
    let docs = load_corpora(&a.data.corpus, &a.data.langs, m)?;
    let steps: usize = plan.stages.iter().map(|s| s.steps).sum();
    let shards = pack_by_language(&new_tok, &docs);
    let mixture = data_mixture(&a.data, &shards, &plan, steps, m)?;
    m.resolve("mixture", &mixture);
    m.resolve("seed", plan.seed);
    let mut stream = BatchStream::new(&mixture, &shards, plan.seed, plan.seq_len, plan.batch_size)?;
    let outcome = run_three_stage(&base, &old_tok, &new_tok, &plan, &mut stream)?;
    let path = c.out.join("adapted.ckpt");
    save_checkpoint(&path, &outcome.ckpt, None)?;
    m.output(&path)?;
    let trace_path = c.out.join("loss.csv");
    write_trace_csv(&trace_path, &outcome.trace)?;
    m.output(&trace_path)?;
    m.write_output(&c.out, "stage_report.json", serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    for b in &outcome.report.boundaries {
        println!(
            "{:<13} steps {:>5}..{:<5} loss {:.4} → {:.4}",
            b.stage.as_str(),
            b.first_step,
            b.last_step,
            b.first_loss,
            b.last_loss
        );
    }
    if let Some(spike) = outcome.report.spike {
        println!("stage-3 spike: {spike:.4}");
    }
    Ok(())
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FinetuneFile {
    mode: Option<FinetuneMode>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    seq_len: Option<usize>,
    warmup_steps: Option<usize>,
    decay_steps: Option<usize>,
    seed: Option<u64>,
}

fn cmd_finetune(c: &CommonArgs, a: &FinetuneArgs, m: &mut Manifest) -> Result<()> {
    let file: FinetuneFile = match &c.config {
        Some(path) => {
            let bytes = m.input(path)?;
            let text = String::from_utf8_lossy(&bytes);
            toml::from_str(&text).map_err(|e| Error::format("finetune config", e.to_string()).in_file(path))?
        }
        None => FinetuneFile::default(),
    };
    let d = FinetuneConfig::default();
    let config = FinetuneConfig {
        mode: match a.mode {
            Some(ModeArg::Causal) => FinetuneMode::Causal,
            Some(ModeArg::Prefix) => FinetuneMode::Prefix,
            None => file.mode.unwrap_or(d.mode),
        },
        epochs: a.epochs.or(file.epochs).unwrap_or(d.epochs),
        peak_lr: a.lr.or(file.lr).unwrap_or(d.peak_lr),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        seq_len: file.seq_len.unwrap_or(d.seq_len),
        warmup_steps: file.warmup_steps.unwrap_or(d.warmup_steps),
        decay_steps: file.decay_steps.unwrap_or(d.decay_steps),
        seed: c.seed.or(file.seed).unwrap_or(d.seed),
        optimizer: d.optimizer,
    };
    m.resolve("finetune", &config);
    let tok = load_tokenizer(&a.tokenizer, m)?;
    let ckpt = load_model(&a.model, m)?;
    ckpt.check_fingerprint(&tok.fingerprint())?;
    m.input(&a.examples)?;
    let examples = read_examples(&a.examples, &tok)?;
    let model = if a.lora_rank == 0 {
        FinetuneModel::Full(ckpt)
    } else {
        let targets = a
            .lora_targets
            .iter()
            .map(|t| Projection::parse(t))
            .collect::<Result<Vec<_>>>()?;
        FinetuneModel::Lora(lora_attach(&ckpt, a.lora_rank, a.lora_alpha, &targets, config.seed)?)
    };
    let (model, metrics) = finetune(model, &examples, &config)?;
    let path = c.out.join("finetuned.ckpt");
    match &model {
        FinetuneModel::Full(ckpt) => save_checkpoint(&path, ckpt, None)?,
        FinetuneModel::Lora(adapted) => save_adapted(&path, adapted)?,
    }
    m.output(&path)?;
    let mut csv = String::from("step,epoch,lr,loss\n");
    for s in &metrics.trace {
        csv.push_str(&format!("{},{},{},{}\n", s.step, s.epoch, s.lr, s.loss));
    }
    m.write_output(&c.out, "finetune_trace.csv", csv)?;
    let mut summary = format!(
        "mode,steps,trainable_params,final_loss,exact_match\n{},{},{},{}",
        config.mode.as_str(),
        metrics.steps,
        metrics.trainable_params,
        metrics.final_loss().unwrap_or(f64::NAN)
    );
    let em = match &a.eval_examples {
        Some(p) => {
            m.input(p)?;
            let held_out = read_examples(p, &tok)?;
            Some(exact_match(&model.effective(), &held_out, config.mode)?)
        }
        None => None,
    };
    summary.push_str(&format!(",{}\n", em.map_or(String::new(), |e| e.to_string())));
    m.write_output(&c.out, "metrics.csv", &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn parse_mode(s: &str) -> Result<AttentionMode> {
    match s {
        "causal" => Ok(AttentionMode::Causal),
        "bidirectional" => Ok(AttentionMode::Bidirectional),
        _ => s
            .strip_prefix("prefix:")
            .and_then(|n| n.parse().ok())
            .map(AttentionMode::Prefix)
            .ok_or_else(|| Error::invalid("mode", format!("{s:?} is not causal, bidirectional or prefix:<n>"))),
    }
}

fn cmd_eval(c: &CommonArgs, a: &EvalArgs, m: &mut Manifest) -> Result<()> {
    let mode = parse_mode(&a.mode)?;
    let tok = load_tokenizer(&a.tokenizer, m)?;
    let ckpt = load_model(&a.model, m)?;
    let docs = load_corpora(&a.corpus, &[], m)?;
    let corpus = EvalCorpus::encode(&tok, &docs, a.seq_len)?;
    let report = perplexity(&ckpt, &corpus, mode)?;
    m.write_output(&c.out, "eval.csv", report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_compare(c: &CommonArgs, a: &CompareArgs, m: &mut Manifest) -> Result<()> {
    m.input(&a.a)?;
    m.input(&a.b)?;
    let ta = read_trace_csv(&a.a)?;
    let tb = read_trace_csv(&a.b)?;
    let cmp = compare_runs(&ta, &tb)?;
    m.write_output(&c.out, "comparison.csv", cmp.to_csv())?;
    m.write_output(&c.out, "plot.csv", cmp.plot_csv())?;
    print!("{}", cmp.to_table());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!(parse_mode("causal").unwrap(), AttentionMode::Causal);
        assert_eq!(parse_mode("prefix:7").unwrap(), AttentionMode::Prefix(7));
        assert!(parse_mode("prefix:x").is_err());
    }

    #[test]
    fn missing_input_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.tsv");
        let code = run_from([
            "langadapt".as_ref(),
            "train-tokenizer".as_ref(),
            "--corpus".as_ref(),
            missing.as_os_str(),
            "--vocab-size".as_ref(),
            "300".as_ref(),
            "--out".as_ref(),
            dir.path().as_os_str(),
        ]);
        assert_eq!(code, EXIT_USAGE);
        assert_eq!(run_from(["langadapt", "bogus"]), EXIT_USAGE);
    }

    #[test]
    fn eleven_billion_param_plan() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let code = run_from([
            "langadapt", "plan", "--params", "11.4e9", "--tokens", "250e9", "--out", out,
        ]);
        assert_eq!(code, EXIT_OK);
        let text = std::fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
        assert!(text.contains("21.93"), "{text}");
        assert!(dir.path().join("manifest.json").exists());
    }
}

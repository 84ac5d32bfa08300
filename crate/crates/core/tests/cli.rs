use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use langadapt::model::{Checkpoint, ModelConfig};
use langadapt::pipeline::{load_checkpoint, save_checkpoint};
use langadapt::tokenizer::BpeModel;

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name).display().to_string()
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_langadapt"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn tokenizer(&self, lang: &str) -> String {
        let out = self.path(&format!("tok_{lang}"));
        if !out.join("tokenizer.bpe").exists() {
            ok(&out, &["train-tokenizer", "--corpus", &data("toy_corpus.tsv"), "--vocab-size", "300", "--langs", lang]);
        }
        out.join("tokenizer.bpe").display().to_string()
    }

    fn base(&self) -> String {
        let tok = self.tokenizer("a");
        let out = self.path("base");
        ok(&out, &["--config", &data("pretrain.toml"), "pretrain", "--tokenizer", &tok, "--corpus", &data("toy_corpus.tsv")]);
        out.join("model.ckpt").display().to_string()
    }
}

#[test]
fn tokenizer_training_is_deterministic() {
    let ws = Workspace::new();
    let args = ["train-tokenizer", "--corpus", &data("toy_corpus.tsv"), "--vocab-size", "280"];
    ok(&ws.path("one"), &args);
    ok(&ws.path("two"), &args);
    let one = std::fs::read(ws.path("one/tokenizer.bpe")).unwrap();
    assert_eq!(one, std::fs::read(ws.path("two/tokenizer.bpe")).unwrap());
    let tok = BpeModel::load(ws.path("one/tokenizer.bpe")).unwrap();
    assert_eq!(tok.vocab_size(), 280);
    let fertility = std::fs::read_to_string(ws.path("one/fertility.csv")).unwrap();
    assert!(fertility.starts_with("lang,token_count,word_count,split_ratio"));
    assert_eq!(fertility.lines().count(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("one/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["resolved"]["fingerprint"], tok.fingerprint());
}

#[test]
fn plan_reports_mixture_and_scaling() {
    let ws = Workspace::new();
    let out = ws.path("plan");
    let o = ok(&out, &["plan", "--slices", &data("slices.txt"), "--budget", "1200", "--params", "11.4e9", "--tokens", "250e9"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("tokens per parameter: 21.93"), "{stdout}");
    let table = std::fs::read_to_string(out.join("mixture.tsv")).unwrap();
    assert!(table.contains("b\t10\t16\t160\t"), "{table}");
    assert!(table.contains("a\t1000\t1.04\t1040\t"), "{table}");
    assert!(out.join("scaling.csv").exists());
}

#[test]
fn adaptation_runs_end_to_end_and_rejects_out_of_order_plans() {
    let ws = Workspace::new();
    let base = ws.base();
    let (tok_a, tok_b) = (ws.tokenizer("a"), ws.tokenizer("b"));
    let corpus = data("toy_corpus.tsv");
    let adapt = |out: &str, config: &str, extra: &[&str]| {
        let mut args = vec![
            "--config", config, "adapt", "--base", &base, "--old-tokenizer", &tok_a,
            "--new-tokenizer", &tok_b, "--corpus", &corpus, "--langs", "b",
        ];
        args.extend_from_slice(extra);
        run(&ws.path(out), &args)
    };

    let o = adapt("adapt", &data("adapt.toml"), &["--strict-order"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let adapted = load_checkpoint(ws.path("adapt/adapted.ckpt")).unwrap().ckpt;
    assert_eq!(adapted.tokenizer_fingerprint, BpeModel::load(&tok_b).unwrap().fingerprint());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("adapt/stage_report.json")).unwrap()).unwrap();
    assert_eq!(report["boundaries"].as_array().unwrap().len(), 3);
    assert!(report["spike"].is_number());

    let o = adapt("mismatch", &data("pretrain.toml"), &[]);
    assert_eq!(o.status.code(), Some(2), "without a swap the tokenizers must match");
    assert!(String::from_utf8_lossy(&o.stderr).contains("fingerprint"));
    let o = run(&ws.path("continual"), &[
        "--config", &data("pretrain.toml"), "adapt", "--base", &base, "--old-tokenizer", &tok_a,
        "--new-tokenizer", &tok_a, "--corpus", &corpus,
    ]);
    assert!(o.status.success(), "non-strict run accepts a lone full stage: {}", String::from_utf8_lossy(&o.stderr));
    let o = run(&ws.path("strict2"), &[
        "--strict-order", "--config", &data("pretrain.toml"), "adapt", "--base", &base,
        "--old-tokenizer", &tok_a, "--new-tokenizer", &tok_b, "--corpus", &data("toy_corpus.tsv"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("swap"));

    let reversed = ws.path("reversed.toml");
    std::fs::write(
        &reversed,
        "seed = 1\nbatch_size = 2\nseq_len = 16\n\n[[stage]]\nkind = \"full\"\nsteps = 2\npeak_lr = 1e-3\n\n\
         [[stage]]\nkind = \"embed_update\"\nsteps = 2\npeak_lr = 1e-3\n",
    )
    .unwrap();
    let o = adapt("reversed", reversed.to_str().unwrap(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!ws.path("reversed/adapted.ckpt").exists());
}

#[test]
fn finetune_full_and_lora_in_both_modes() {
    let ws = Workspace::new();
    let base = ws.base();
    let tok = ws.tokenizer("a");
    let before = std::fs::read(&base).unwrap();
    for (mode, rank) in [("causal", "0"), ("prefix", "0"), ("prefix", "4"), ("causal", "4")] {
        let out = ws.path(&format!("ft_{mode}_{rank}"));
        ok(&out, &[
            "finetune", "--model", &base, "--tokenizer", &tok, "--examples", &data("translate_train.tsv"),
            "--eval-examples", &data("translate_eval.tsv"), "--mode", mode, "--epochs", "1", "--lr", "1e-3",
            "--lora-rank", rank,
        ]);
        let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        let row = metrics.lines().nth(1).unwrap();
        assert!(row.starts_with(mode), "{row}");
        let em: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&em));
        assert!(out.join("finetune_trace.csv").exists());
        assert!(out.join("finetuned.ckpt").exists());
    }
    assert_eq!(std::fs::read(&base).unwrap(), before, "finetuning must not touch its input");

    let out = ws.path("ft_config");
    ok(&out, &[
        "--config", &data("finetune.toml"), "finetune", "--model", &base, "--tokenizer", &tok,
        "--examples", &data("translate_train.tsv"),
    ]);
    assert!(std::fs::read_to_string(out.join("metrics.csv")).unwrap().contains("prefix"));
}

#[test]
fn eval_of_a_uniform_model_gives_vocab_sized_perplexity() {
    let ws = Workspace::new();
    let tok_path = ws.tokenizer("b");
    let tok = BpeModel::load(&tok_path).unwrap();
    let mut ckpt = Checkpoint::<f32>::init(ModelConfig::desk(tok.vocab_size()), 0, tok.fingerprint()).unwrap();
    ckpt.params.head.as_mut().unwrap().data.fill(0.0);
    let model = ws.path("uniform.ckpt");
    save_checkpoint(&model, &ckpt, None).unwrap();
    let out = ws.path("eval");
    ok(&out, &["eval", "--model", &model.display().to_string(), "--tokenizer", &tok_path, "--corpus", &data("toy_corpus.tsv")]);
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "perplexity").unwrap();
    for line in csv.lines().skip(1) {
        let ppl: f64 = line.split(',').nth(col).unwrap().parse().unwrap();
        assert!((ppl - tok.vocab_size() as f64).abs() < 0.05, "{line}");
    }

    let o = run(&ws.path("eval_wrong"), &[
        "eval", "--model", &model.display().to_string(), "--tokenizer", &ws.tokenizer("a"),
        "--corpus", &data("toy_corpus.tsv"),
    ]);
    assert_ne!(o.status.code(), Some(0), "fingerprint mismatch must fail");
}

#[test]
fn compare_writes_table_and_plot() {
    let ws = Workspace::new();
    let a = ws.path("a.csv");
    let b = ws.path("b.csv");
    std::fs::write(&a, "step,stage,lr,objective,loss\n0,full,0.001,causal,3.0\n1,full,0.001,causal,2.0\n").unwrap();
    std::fs::write(&b, "step,stage,lr,objective,loss\n0,full,0.001,causal,4.0\n2,full,0.001,causal,1.5\n").unwrap();
    let out = ws.path("cmp");
    ok(&out, &["compare", "--a", &a.display().to_string(), "--b", &b.display().to_string()]);
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(table.contains("final_loss"));
    let plot = std::fs::read_to_string(out.join("plot.csv")).unwrap();
    assert_eq!(plot.lines().collect::<Vec<_>>(), ["step,loss_a,loss_b", "0,3,4", "1,2,2.75"]);
}

#[test]
fn usage_errors_exit_with_code_two() {
    let ws = Workspace::new();
    let out = ws.path("x");
    assert_eq!(run(&out, &["train-tokenizer"]).status.code(), Some(2));
    assert_eq!(run(&out, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(
        run(&out, &["train-tokenizer", "--corpus", &ws.s("missing.tsv"), "--vocab-size", "300"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&out, &["train-tokenizer", "--corpus", &data("toy_corpus.tsv"), "--vocab-size", "10"]).status.code(),
        Some(2)
    );
    let bad = ws.path("bad.tsv");
    std::fs::write(&bad, "no tab here\n").unwrap();
    let o = run(&out, &["train-tokenizer", "--corpus", &bad.display().to_string(), "--vocab-size", "300"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.tsv"));
}

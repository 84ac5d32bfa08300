//! Per-language held-out perplexity of a briefly trained model, and how
//! tokenizer choice changes fertility.
//!
//! cargo run --release --example perplexity

use langadapt::corpus::{pack_by_language, plan_mixture, read_labeled_corpus, BatchStream, LanguageSlice};
use langadapt::eval::{fertility_delta, perplexity, EvalCorpus};
use langadapt::model::{AttentionMode, Checkpoint, ModelConfig};
use langadapt::pipeline::{run_stage, AdamWConfig, StageKind, StageSpec};
use langadapt::tokenizer::{fertility, train_bpe, DEFAULT_SPECIALS};

fn main() -> langadapt::Result<()> {
    let docs = read_labeled_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy_corpus.tsv"))?;
    let (train, held_out) = docs.split_at(docs.len() - 20);
    let all: Vec<&str> = train.iter().map(|d| d.text.as_str()).collect();
    let only_a: Vec<&str> = train.iter().filter(|d| d.lang == "a").map(|d| d.text.as_str()).collect();
    let tok = train_bpe(&all, 320, &DEFAULT_SPECIALS)?;
    let tok_a = train_bpe(&only_a, 320, &DEFAULT_SPECIALS)?;
    for (lang, delta) in fertility_delta(&fertility(&tok_a, held_out)?, &fertility(&tok, held_out)?) {
        println!("split ratio change for {lang} with a joint tokenizer: {delta:+.3}");
    }

    let shards = pack_by_language(&tok, train);
    let slices: Vec<LanguageSlice> = shards
        .iter()
        .map(|(lang, t)| LanguageSlice::new(lang.clone(), t.len() as u64, 0))
        .collect();
    let (steps, batch, seq) = (150, 8, 64);
    let mixture = plan_mixture(&slices, (steps * batch * seq) as u64, 16)?;
    let mut stream = BatchStream::new(&mixture, &shards, 1, seq, batch)?;
    let ckpt = Checkpoint::init(ModelConfig::desk(tok.vocab_size()), 1, tok.fingerprint())?;
    let corpus = EvalCorpus::encode(&tok, held_out, seq)?;
    println!("\nuntrained:\n{}", perplexity(&ckpt, &corpus, AttentionMode::Causal)?.to_table());

    let stage = StageSpec::new(StageKind::Full, steps, 3e-3, 15, 30);
    let trained = run_stage(ckpt, &stage, &mut stream, AdamWConfig::default(), 1, tok.mask_id())?.ckpt;
    let report = perplexity(&trained, &corpus, AttentionMode::Causal)?;
    println!("after {steps} steps:\n{}", report.to_table());
    print!("{}", report.to_csv());
    Ok(())
}

//! Trains one byte-level BPE tokenizer per toy language and shows how
//! differently each splits the two languages.
//!
//! cargo run --release --example tokenizer

use langadapt::corpus::read_labeled_corpus;
use langadapt::tokenizer::{fertility, train_bpe, BpeModel, DEFAULT_SPECIALS};

fn main() -> langadapt::Result<()> {
    let docs = read_labeled_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy_corpus.tsv"))?;
    let sample = docs.iter().find(|d| d.lang == "b").map(|d| d.text.as_str()).unwrap_or_default();
    let sample: String = sample.chars().take(40).collect();

    for lang in ["a", "b"] {
        let texts: Vec<&str> = docs.iter().filter(|d| d.lang == lang).map(|d| d.text.as_str()).collect();
        let tok = train_bpe(&texts, 320, &DEFAULT_SPECIALS)?;
        println!("tokenizer trained on {lang}: {} entries, fingerprint {}", tok.vocab_size(), &tok.fingerprint()[..12]);
        print!("{}", fertility(&tok, &docs)?.to_csv());

        let ids = tok.encode(sample.as_bytes());
        let pieces: Vec<String> = ids
            .iter()
            .map(|&id| {
                let bytes = tok.token_bytes(id).unwrap_or_default();
                match std::str::from_utf8(bytes) {
                    Ok(s) => s.to_string(),
                    Err(_) => bytes.iter().map(|b| format!("<{b:02x}>")).collect(),
                }
            })
            .collect();
        println!("{sample:?} -> {} tokens {pieces:?}", ids.len());
        assert_eq!(tok.decode(&ids)?, sample.as_bytes());

        let reloaded = BpeModel::from_text(&tok.to_text())?;
        assert_eq!(reloaded.fingerprint(), tok.fingerprint());
        println!();
    }
    Ok(())
}

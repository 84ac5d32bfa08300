//! Visibility patterns of the three attention modes, grouped-query head
//! sharing, and the relative-position property of rotary embeddings.
//!
//! cargo run --release --example attention_modes

use langadapt::linalg::dot;
use langadapt::model::{attention, rope_rotate, AttentionMode};

fn show(mode: AttentionMode, len: usize) {
    println!("{mode:?}");
    for row in mode.mask(len) {
        let line: String = row.iter().map(|&v| if v { '■' } else { '·' }).collect();
        println!("  {line}");
    }
}

fn main() -> langadapt::Result<()> {
    let len = 6;
    show(AttentionMode::Causal, len);
    show(AttentionMode::Prefix(3), len);
    show(AttentionMode::Bidirectional, len);

    // Four query heads reading two key/value heads.
    let (nq, nkv, hd) = (4, 2, 2);
    let q: Vec<f64> = (0..len * nq * hd).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let k: Vec<f64> = (0..len * nkv * hd).map(|i| ((i * 17 % 7) as f64 - 3.0) / 3.0).collect();
    let v: Vec<f64> = (0..len * nkv * hd).map(|i| i as f64 / 10.0).collect();
    let ctx = attention(&q, &k, &v, len, AttentionMode::Prefix(3), nq, nkv, hd)?;
    println!("\ngrouped-query context, position 0: {:?}", &ctx[..nq * hd]);

    let (qv, kv) = ([0.3, -1.2, 0.8, 0.5], [1.0, 0.4, -0.7, 0.2]);
    for (m, n) in [(2, 5), (102, 105), (4002, 4005)] {
        let score = dot(&rope_rotate(&qv, m, 1e4)?, &rope_rotate(&kv, n, 1e4)?);
        println!("rotary score q@{m} · k@{n} = {score:.12}");
    }
    Ok(())
}

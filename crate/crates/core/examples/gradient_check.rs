//! Compares backpropagated gradients with central finite differences on a
//! tiny double-precision model, for each attention mode and objective.
//!
//! cargo run --release --example gradient_check

use langadapt::model::{loss_and_grads, sequence_nll, AttentionMode, Checkpoint, ModelConfig, Trainable};
use langadapt::objectives::{causal_batch, mntp_batch, ObjectiveBatch};

fn loss(ckpt: &Checkpoint<f64>, batch: &ObjectiveBatch) -> f64 {
    let (sum, n) = sequence_nll(ckpt, batch).unwrap();
    sum / n as f64
}

fn main() -> langadapt::Result<()> {
    let config = ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_layers: 2,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 4,
        ..ModelConfig::desk(12)
    };
    let mut ckpt = Checkpoint::<f64>::init(config, 0, "demo")?;
    // Larger weights than the default init so every partial is well above
    // rounding noise.
    for (_, t) in ckpt.params.tensors_mut() {
        for (i, x) in t.iter_mut().enumerate() {
            *x += 0.3 * ((i * 7919 % 101) as f64 / 50.0 - 1.0);
        }
    }
    let seqs = vec![vec![1, 5, 3, 8, 2, 9], vec![4, 4, 7, 1]];
    let h = 1e-3;
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional, AttentionMode::Prefix(3)] {
        for (name, mut batch) in [("causal", causal_batch(&seqs)?), ("mntp", mntp_batch(&seqs, 0.3, 11, 7)?)] {
            batch.modes = vec![mode; seqs.len()];
            let (_, grads) = loss_and_grads(&ckpt, &batch, &Trainable::All)?;
            let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
            let mut probe = ckpt.clone();
            let mut worst = 0f64;
            // Every 7th entry keeps the demo quick.
            for (ti, a) in analytic.iter().enumerate() {
                for i in (0..a.len()).step_by(7) {
                    let orig = probe.params.tensors_mut()[ti].1[i];
                    let mut at = |x: f64| {
                        probe.params.tensors_mut()[ti].1[i] = x;
                        loss(&probe, &batch)
                    };
                    let numeric =
                        (8.0 * (at(orig + h) - at(orig - h)) - (at(orig + 2.0 * h) - at(orig - 2.0 * h))) / (12.0 * h);
                    probe.params.tensors_mut()[ti].1[i] = orig;
                    let rel = (a[i] - numeric).abs() / (a[i].abs() + numeric.abs()).max(1e-8);
                    worst = worst.max(rel);
                }
            }
            println!("{mode:<16} {name:<7} max relative error {worst:.2e}", mode = format!("{mode:?}"));
        }
    }
    Ok(())
}

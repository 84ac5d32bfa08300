//! Causal and masked next-token prediction mixed on a fixed schedule.
//!
//! cargo run --release --example hybrid_objectives

use langadapt::model::{Checkpoint, ModelConfig};
use langadapt::objectives::{mntp_batch, HybridSchedule, ObjectiveKind};
use langadapt::pipeline::{AdamWConfig, ObjectiveConfig, StageKind, StageSpec, Trainer};

fn main() -> langadapt::Result<()> {
    let schedule = HybridSchedule::new(0.9, 42)?;
    let pattern: String = (0..40)
        .map(|s| match schedule.objective_at(s) {
            ObjectiveKind::Causal => 'c',
            ObjectiveKind::Mntp => 'M',
        })
        .collect();
    println!("first 40 steps at 90% causal: {pattern}");

    let mask_id = 31;
    let seq: Vec<u32> = (0..12).map(|i| (i * 5 % 30) as u32).collect();
    let batch = mntp_batch(&[seq.clone()], 0.25, mask_id, 3)?;
    println!("\ninput  {seq:?}\nmasked {:?}", batch.input_ids[0]);
    for t in &batch.targets {
        println!("  output at {} predicts {} (hidden at {})", t.pos, t.token, t.pos + 1);
    }

    let config = ModelConfig {
        d_model: 32,
        d_ff: 64,
        n_q_heads: 4,
        n_kv_heads: 2,
        head_dim: 8,
        ..ModelConfig::desk(32)
    };
    let ckpt = Checkpoint::init(config, 0, "demo")?;
    let stage = StageSpec::new(StageKind::Full, 60, 3e-3, 6, 12).with_objective(ObjectiveConfig::hybrid(0.9));
    let mut trainer = Trainer::new(ckpt, stage, AdamWConfig::default(), 7, Some(mask_id))?;
    // Repeating patterns that both objectives can learn.
    let mut batches = (0..).map(|s: u32| -> Vec<Vec<u32>> {
        (0..4).map(|b| (0..16).map(|i| (s + b + i * 3) % 30).collect()).collect()
    });
    trainer.run(&mut batches, 60)?;
    println!();
    for row in trainer.trace().iter().step_by(5) {
        println!("step {:>3}  {:<6}  lr {:.2e}  loss {:.4}", row.step, row.objective, row.lr, row.loss);
    }
    Ok(())
}

//! Interrupting training, saving weights and optimizer state, and resuming
//! gives exactly the same model as an uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use langadapt::model::{Checkpoint, ModelConfig};
use langadapt::pipeline::{
    load_for_resume, save_checkpoint, AdamWConfig, ObjectiveConfig, StageKind, StageSpec, Trainer,
};

fn batch(step: usize) -> Vec<Vec<u32>> {
    (0..4).map(|b| (0..24).map(|i| ((step * 7 + b * 3 + i * i) % 47) as u32).collect()).collect()
}

fn main() -> langadapt::Result<()> {
    let (steps, split, mask_id) = (80, 30, 47);
    let ckpt = Checkpoint::init(ModelConfig::desk(48), 5, "demo-tokenizer")?;
    let stage = StageSpec::new(StageKind::Full, steps, 2e-3, 8, 16).with_objective(ObjectiveConfig::hybrid(0.9));
    let adamw = AdamWConfig::default();

    let mut straight = Trainer::new(ckpt.clone(), stage.clone(), adamw, 9, Some(mask_id))?;
    straight.run(&mut (0..).map(batch), steps)?;

    let dir = std::env::temp_dir().join(format!("langadapt-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("step30.ckpt");
    let mut first = Trainer::new(ckpt, stage.clone(), adamw, 9, Some(mask_id))?;
    first.run(&mut (0..).map(batch), split)?;
    save_checkpoint(&path, &first.ckpt, Some(&first.optimizer))?;
    println!("saved after {} steps to {}", first.steps_done(), path.display());

    let loaded = load_for_resume(&path, "demo-tokenizer", false)?;
    let optimizer = loaded.optimizer.expect("checkpoint carries optimizer state");
    let mut resumed = Trainer::resume(loaded.ckpt, optimizer, stage, 9, Some(mask_id))?;
    resumed.run(&mut (split..).map(batch), steps - split)?;

    let same = straight.ckpt.params == resumed.ckpt.params;
    println!(
        "final loss uninterrupted {:.6}, resumed {:.6}; weights identical: {same}",
        straight.trace().last().unwrap().loss,
        resumed.trace().last().unwrap().loss
    );
    match load_for_resume(&path, "another-tokenizer", false) {
        Err(e) => println!("resuming with a different tokenizer is refused: {e}"),
        Ok(_) => println!("unexpected: mismatched tokenizer accepted"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

//! Finetuning on a sequence-copy task with causal and prefix attention, as
//! full finetuning and with LoRA adapters.
//!
//! cargo run --release --example finetune

use langadapt::finetune::{
    exact_match, finetune, greedy_complete, lora_attach, FinetuneConfig, FinetuneMode, FinetuneModel,
};
use langadapt::model::{Checkpoint, ModelConfig, Projection};
use langadapt::synthetic::{copy_examples, copy_vocab_size};

fn shift(symbols: &mut [u32], alphabet: usize) {
    for s in symbols {
        *s = 2 + (*s - 1) % alphabet as u32;
    }
}

fn main() -> langadapt::Result<()> {
    let (alphabet, length, steps, batch) = (8, 5, 200, 16);
    let config = ModelConfig {
        d_ff: 128,
        ..ModelConfig::desk(copy_vocab_size(alphabet))
    };
    let train = copy_examples(steps * batch, alphabet, length, 100);
    let test = copy_examples(200, alphabet, length, 900);

    for mode in [FinetuneMode::Causal, FinetuneMode::Prefix] {
        let ckpt = Checkpoint::init(config.clone(), 0, "copy")?;
        let cfg = FinetuneConfig {
            mode,
            epochs: 1,
            peak_lr: 3e-3,
            batch_size: batch,
            seq_len: 64,
            warmup_steps: steps / 10,
            decay_steps: steps / 5,
            ..Default::default()
        };
        let (model, metrics) = finetune(FinetuneModel::Full(ckpt), &train, &cfg)?;
        let model = model.effective();
        let em = exact_match(&model, &test, mode)?;
        println!(
            "{:<6} full: {} steps, final loss {:.4}, held-out exact match {em:.3}",
            mode.as_str(),
            metrics.steps,
            metrics.final_loss().unwrap_or(f64::NAN)
        );
        let ex = &test[0];
        println!("  prompt {:?} -> {:?}", ex.prompt, greedy_complete(&model, &ex.prompt, length, mode)?);

        // Teach the copy model to shift every symbol by one, with LoRA only.
        let shifted: Vec<_> = copy_examples(steps * batch * 2, alphabet, length, 7)
            .into_iter()
            .map(|mut e| {
                shift(&mut e.completion, alphabet);
                e
            })
            .collect();
        let adapted = lora_attach(&model, 8, 16.0, &Projection::ALL, 0)?;
        let lora_cfg = FinetuneConfig {
            peak_lr: 5e-3,
            warmup_steps: 20,
            decay_steps: 80,
            ..cfg
        };
        let (tuned, metrics) = finetune(FinetuneModel::Lora(adapted), &shifted, &lora_cfg)?;
        let shifted_test: Vec<_> = copy_examples(200, alphabet, length, 901)
            .into_iter()
            .map(|mut e| {
                shift(&mut e.completion, alphabet);
                e
            })
            .collect();
        println!(
            "  LoRA to shifted copy: {} trainable params, exact match {:.3}",
            metrics.trainable_params,
            exact_match(&tuned.effective(), &shifted_test, mode)?
        );
    }
    Ok(())
}

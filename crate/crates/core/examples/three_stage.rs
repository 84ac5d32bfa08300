//! The toy adaptation experiment: pretrain a base model mostly on language
//! `a`, swap to a tokenizer trained on language `b`, then adapt with and
//! without the embedding-only stage and compare the loss spike at the start
//! of full training.
//!
//! cargo run --release --example three_stage [seed] [out_dir]

use langadapt::eval::compare_runs;
use langadapt::pipeline::write_trace_csv;
use langadapt::synthetic::{ToyExperimentConfig, ToySetup};

fn main() -> langadapt::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(0);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "three_stage_out".into()));
    std::fs::create_dir_all(&out)?;

    let setup = ToySetup::new(ToyExperimentConfig::default())?;
    println!("pretraining base model (seed {seed})");
    let base = setup.pretrain_base(seed)?;
    println!("held-out perplexity on language b:");

    let with = setup.adapt(&base, seed, true)?;
    let without = setup.adapt(&base, seed, false)?;
    println!("  swapped, untrained   {:>10.2}", setup.held_out_perplexity(&with.swapped)?);
    println!("  swap → embed → full  {:>10.2}", setup.held_out_perplexity(&with.ckpt)?);
    println!("  swap → full          {:>10.2}", setup.held_out_perplexity(&without.ckpt)?);

    for (name, outcome) in [("three_stage", &with), ("swap_then_full", &without)] {
        let r = &outcome.report;
        println!(
            "{name:<15} reference {:.3}  before full {:.3}  first full {:.3}  spike {:+.3}",
            r.base_reference_loss,
            r.pre_full_loss,
            r.first_full_loss.unwrap_or(f64::NAN),
            r.spike.unwrap_or(f64::NAN)
        );
        write_trace_csv(out.join(format!("{name}.csv")), &outcome.trace)?;
    }

    let cmp = compare_runs(&with.trace, &without.trace)?;
    print!("\n{}", cmp.to_table());
    std::fs::write(out.join("plot.csv"), cmp.plot_csv())?;
    println!("traces written to {}", out.display());
    Ok(())
}

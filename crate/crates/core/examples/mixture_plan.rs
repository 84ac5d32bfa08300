//! Data budgeting: a priority-ordered mixture under a repetition cap, and
//! the scaling check for an 11B-parameter run.
//!
//! cargo run --release --example mixture_plan

use langadapt::corpus::{chinchilla_ratio, plan_mixture, repetition_warning, LanguageSlice};
use langadapt::eval::estimate_flops;

fn main() -> langadapt::Result<()> {
    // A scarce target language first, a large related one fills the rest.
    let slices = [LanguageSlice::new("b", 10, 0), LanguageSlice::new("a", 1000, 1)];
    let plan = plan_mixture(&slices, 1200, 16)?;
    print!("{}", plan.to_table());
    for w in repetition_warning(&plan) {
        println!("{} repeated ×{:.2}: {}", w.lang, w.factor, w.severity.as_str());
    }

    let (params, tokens) = (11.4e9, 250e9);
    let (ratio, verdict) = chinchilla_ratio(params, tokens)?;
    let cost = estimate_flops(params, tokens)?;
    println!("\n{params:.3e} params on {tokens:.3e} tokens");
    println!("tokens per parameter: {ratio:.2} ({})", verdict.as_str());
    println!("training compute: {:.3e} FLOPs", cost.total_flops);

    // Utilization for a hypothetical run of 30 days on 64 GPUs at 1 PFLOP/s peak each.
    let seconds = 30.0 * 86_400.0;
    let timed = cost.with_timing(tokens, seconds, 64.0 * 1e15)?;
    println!("MFU over 30 days on 64 × 1 PFLOP/s: {:.1}%", 100.0 * timed.mfu.unwrap());
    Ok(())
}

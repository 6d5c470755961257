//! Plain vs identity-paired vs bipartite-matched distillation on the toy task.
//!
//!     cargo run --release --example compare -- 5

use kcd_core::lab::{run_from_pair, train_pair, RunConfig};
use kcd_core::Strategy;

fn main() -> kcd_core::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    for seed in 0..seeds {
        let mut cfg = RunConfig::reference(seed);
        let pair = train_pair(&cfg)?;
        let matched = run_from_pair(&cfg, &pair)?;
        cfg.distill.strategy = Strategy::Identity;
        let ident = run_from_pair(&cfg, &pair)?;
        println!(
            "seed {seed}: teacher {:.3}  plain {:.3}  identity {:.3}  bipartite {:.3}  gamma {:.2} -> {:.2}",
            matched.teacher_test_acc,
            matched.baseline_test_acc,
            ident.distilled_test_acc,
            matched.distilled_test_acc,
            matched.gamma.identity,
            matched.gamma.transformed,
        );
    }
    Ok(())
}

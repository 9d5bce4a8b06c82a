//! Runs the default recipe once and prints the NSN frontier next to the
//! native and truncated baselines.
//!
//! ```text
//! cargo run --release -p nsn-core --example recipe -- [seed]
//! ```

use nsn_core::config::RunConfig;
use nsn_core::experiments::{run_baseline, run_train, BaselineKind};

fn main() -> nsn_core::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.train.seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");

    let run = run_train(&cfg, None)?;
    let native = run_baseline(&cfg, BaselineKind::Native)?.table;
    let truncate = run_baseline(&cfg, BaselineKind::Truncate)?.table;

    println!("{:>5} {:>8} {:>8} {:>8} {:>9}", "rank", "flops", "nsn", "native", "truncated");
    for row in &run.frontier.rows {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.3}"));
        println!(
            "{:>5} {:>8} {:>8.3} {:>8} {:>9}",
            row.rank,
            row.flops,
            row.accuracy,
            fmt(native.accuracy_at(row.rank)),
            fmt(truncate.accuracy_at(row.rank))
        );
    }
    println!("s_k: {:?}", run.summary.s);
    Ok(())
}

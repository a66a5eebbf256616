//! Runs the synthetic replication and prints the report.
//!
//! `cargo run --release --example replicate -- [seed] [epochs] [lambda_a] [k]`

use nluadv_core::experiment::{run_replication, ReplicationConfig};
use nluadv_core::Execution;

fn main() -> nluadv_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = ReplicationConfig::default();
    if let Some(s) = args.first() {
        cfg.seed = s.parse().expect("seed");
    }
    if let Some(e) = args.get(1) {
        cfg.tagger.epochs = e.parse().expect("epochs");
    }
    if let Some(l) = args.get(2) {
        cfg.alp.lambda_a = l.parse().expect("lambda_a");
    }
    if let Some(k) = args.get(3) {
        cfg.k = k.parse().expect("k");
    }
    let r = run_replication(&cfg, Execution::default())?;
    print!("{}", r.report.to_table());
    println!("augmented {} perturbed {} in {:.1}s", r.augmented, r.corpus.perturbed.len(), r.seconds);
    Ok(())
}

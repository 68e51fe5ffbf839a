//! Benchmark, verification, and batch-probing harness for the training engines.

pub mod bench;
pub mod config;
pub mod probe;
pub mod stats;
pub mod verify;

pub use bench::{run_bench, BenchOutcome, BenchRecord};
pub use config::{BenchConfig, Overrides};
pub use probe::{operating_band, probe_max_batch};
pub use verify::{run_verify, VerifyOptions, VerifyReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] revprop_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

/// Fixed-width summary of bench records.
pub fn summary_table(out: &BenchOutcome) -> String {
    let mut s = format!(
        "{:<9} {:>6} {:>6} {:>6} {:>14} {:>12} {:>12} {:>14}\n",
        "engine", "batch", "depth", "width", "samples/s", "± std", "peak bytes", "ns/step"
    );
    for r in &out.records {
        s.push_str(&format!(
            "{:<9} {:>6} {:>6} {:>6} {:>14.2} {:>12.2} {:>12} {:>14}\n",
            r.engine, r.batch, r.depth, r.width, r.throughput_mean, r.throughput_std, r.peak_bytes, r.wall_ns_per_step
        ));
    }
    for i in &out.infeasible {
        s.push_str(&format!(
            "{:<9} {:>6}  infeasible: predicted peak {} > budget {}\n",
            i.engine.name(),
            i.batch,
            i.predicted_peak,
            i.budget
        ));
    }
    for w in &out.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

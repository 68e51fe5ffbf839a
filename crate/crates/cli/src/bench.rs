//! Throughput sweeps over engines and batch sizes.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use revprop_core::{build_model, sgd_update, step, Batch, DType, EngineKind, MemoryLedger, ModelConfig, Rng, Scalar};

use crate::config::BenchConfig;
use crate::probe::{probe_max_batch, PeakModel};
use crate::stats::{mean, sample_std};
use crate::CliError;

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub engine: String,
    pub batch: usize,
    pub depth: usize,
    pub width: usize,
    pub seq_len: usize,
    /// Samples per second.
    pub throughput_mean: f64,
    pub throughput_std: f64,
    pub peak_bytes: u64,
    pub wall_ns_per_step: u64,
}

/// A point skipped because its predicted peak exceeds the budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Infeasible {
    pub engine: EngineKind,
    pub batch: usize,
    pub predicted_peak: u64,
    pub budget: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub engine: EngineKind,
    pub batch: usize,
    /// Loss of every timed step, repeat by repeat.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    pub infeasible: Vec<Infeasible>,
    pub traces: Vec<LossTrace>,
    pub warnings: Vec<String>,
}

/// Runs the sweep and writes the CSV to `cfg.out_path`.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome, CliError> {
    let outcome = sweep(cfg)?;
    write_csv(Path::new(&cfg.out_path), &outcome.records)?;
    Ok(outcome)
}

/// The sweep without writing anything.
pub fn sweep(cfg: &BenchConfig) -> Result<BenchOutcome, CliError> {
    cfg.validate()?;
    match cfg.model.dtype {
        DType::F32 => sweep_as::<f32>(cfg),
        DType::F64 => sweep_as::<f64>(cfg),
    }
}

fn sweep_as<T: Scalar>(cfg: &BenchConfig) -> Result<BenchOutcome, CliError> {
    let initial = build_model::<T>(&cfg.model)?;
    let mut out = BenchOutcome::default();
    for &engine in &cfg.engines {
        let limit = match cfg.budget_bytes {
            Some(budget) => Some((budget, PeakModel::measure(&cfg.model, engine)?, probe_max_batch(&cfg.model, engine, budget).ok())),
            None => None,
        };
        for &batch in &cfg.batch_sizes {
            if let Some((budget, peaks, max_batch)) = &limit {
                let predicted_peak = peaks.peak_at(batch);
                if predicted_peak > *budget {
                    out.infeasible.push(Infeasible { engine, batch, predicted_peak, budget: *budget });
                    continue;
                }
                if let Some(max) = max_batch {
                    if 2 * batch > *max {
                        out.warnings.push(format!(
                            "{engine} batch {batch} is above half of the probed maximum {max}"
                        ));
                    }
                }
            }
            let (record, trace) = measure(cfg, &initial, engine, batch)?;
            out.records.push(record);
            out.traces.push(trace);
        }
    }
    Ok(out)
}

/// Seeded batches for one sweep point; the same for every engine and repeat.
fn batches<T: Scalar>(model: &ModelConfig, batch: usize, count: usize) -> Vec<Batch<T>> {
    let mut rng = Rng::new(model.seed, 0x6261_7463_6800_0000 | batch as u64);
    (0..count).map(|_| Batch::synthetic(model, batch, &mut rng)).collect()
}

fn measure<T: Scalar>(
    cfg: &BenchConfig,
    initial: &revprop_core::Model<T>,
    engine: EngineKind,
    batch: usize,
) -> Result<(BenchRecord, LossTrace), CliError> {
    let data = batches::<T>(&cfg.model, batch, cfg.warmup + cfg.steps);
    let mut ledger = MemoryLedger::new();
    let mut throughputs = Vec::with_capacity(cfg.repeats);
    let mut losses = Vec::with_capacity(cfg.repeats * cfg.steps);
    let mut peak = 0;
    let mut total_ns: u128 = 0;
    for _ in 0..cfg.repeats {
        let mut model = initial.clone();
        for b in &data[..cfg.warmup] {
            let (grads, _) = step(engine, &model, b, &mut ledger, cfg.threads)?;
            sgd_update(&mut model, &grads, cfg.lr)?;
        }
        let start = Instant::now();
        for b in &data[cfg.warmup..] {
            let (grads, stats) = step(engine, &model, b, &mut ledger, cfg.threads)?;
            sgd_update(&mut model, &grads, cfg.lr)?;
            losses.push(stats.loss);
            peak = peak.max(stats.peak_activation_bytes);
        }
        let elapsed = start.elapsed();
        total_ns += elapsed.as_nanos();
        throughputs.push((batch * cfg.steps) as f64 / elapsed.as_secs_f64().max(1e-12));
    }
    let record = BenchRecord {
        engine: engine.to_string(),
        batch,
        depth: cfg.model.total_depth(),
        width: cfg.model.width,
        seq_len: cfg.model.seq_len,
        throughput_mean: mean(&throughputs),
        throughput_std: sample_std(&throughputs),
        peak_bytes: peak,
        wall_ns_per_step: (total_ns / (cfg.repeats * cfg.steps) as u128) as u64,
    };
    Ok((record, LossTrace { engine, batch, losses }))
}

/// Header row followed by one row per record.
pub fn write_csv(path: &Path, records: &[BenchRecord]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    w.write_record(CSV_HEADER).map_err(|e| CliError::Io(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

pub const CSV_HEADER: [&str; 9] = [
    "engine",
    "batch",
    "depth",
    "width",
    "seq_len",
    "throughput_mean",
    "throughput_std",
    "peak_bytes",
    "wall_ns_per_step",
];

/// Column indices that depend on timing.
pub const TIMING_COLUMNS: [usize; 3] = [5, 6, 8];

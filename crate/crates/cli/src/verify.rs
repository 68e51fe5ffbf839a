//! Correctness suites over a small model: reconstruction, finite
//! differences, engine parity, and memory scaling.

use std::fmt;

use revprop_core::gradcheck::{fd_gradient, FD_STEP};
use revprop_core::model::{build_model_with_std, loss_and_grad_head};
use revprop_core::rev::{rev_forward, rev_inverse, Coupled};
use revprop_core::{
    max_block_footprint, step, Batch, DType, EngineKind, GradStore, MemoryLedger, Model, ModelConfig, ModelKind,
    Rng, Scalar, Tensor,
};

use crate::config::BenchConfig;
use crate::stats::linear_slope;
use crate::CliError;

pub const MAX_VERIFY_DEPTH: usize = 4;
pub const MAX_VERIFY_WIDTH: usize = 8;

/// Depths of the isotropic models used for the memory fits.
pub const SLOPE_DEPTHS: [usize; 4] = [2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub criterion: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, measured: f64, passed: bool, criterion: String) {
        self.checks.push(Check { name: name.into(), passed, measured, criterion });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            writeln!(
                f,
                "{}  {:width$}  {:>12.3e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.criterion,
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    /// Perturbs the analytic cotangents handed to the finite-difference
    /// suite. For testing that the suite can fail.
    pub corrupt_vjp: bool,
}

pub fn run_verify(cfg: &BenchConfig, opts: VerifyOptions) -> Result<VerifyReport, CliError> {
    cfg.validate()?;
    let m = &cfg.model;
    let max_width = m.stage_shapes().iter().map(|s| s.width).max().unwrap_or(0);
    if m.total_depth() > MAX_VERIFY_DEPTH || max_width > MAX_VERIFY_WIDTH {
        return Err(CliError::Config(format!(
            "verify needs a small model (depth ≤ {MAX_VERIFY_DEPTH}, width ≤ {MAX_VERIFY_WIDTH}), got depth {} and width {max_width}",
            m.total_depth()
        )));
    }
    let mut report = VerifyReport::default();
    match m.dtype {
        DType::F32 => round_trip::<f32>(m, 1e-5, &mut report)?,
        DType::F64 => round_trip::<f64>(m, 1e-12, &mut report)?,
    }
    finite_differences(m, opts, &mut report)?;
    match m.dtype {
        DType::F32 => parity::<f32>(m, cfg.threads, 1e-4, &mut report)?,
        DType::F64 => parity::<f64>(m, cfg.threads, 1e-12, &mut report)?,
    }
    match m.dtype {
        DType::F32 => memory::<f32>(m, &mut report)?,
        DType::F64 => memory::<f64>(m, &mut report)?,
    }
    Ok(report)
}

/// Blocks are drawn with a larger init than training uses so that `F` and
/// `G` move the pair by O(1) and the inverse has real work to undo.
const ROUND_TRIP_STD: f64 = 0.5;

fn round_trip<T: Scalar>(m: &ModelConfig, tol: f64, report: &mut VerifyReport) -> Result<(), CliError> {
    let model = build_model_with_std::<T>(m, ROUND_TRIP_STD)?;
    let shapes = m.stage_shapes();
    let mut rng = Rng::new(m.seed, 1);
    let mut worst = 0.0f64;
    for (stage, shape) in model.stages.iter().zip(&shapes) {
        for block in &stage.blocks {
            let dims = [2, shape.tokens, shape.width];
            let x1 = Tensor::from_fn(&dims, |_| T::lit(rng.normal()));
            let x2 = Tensor::from_fn(&dims, |_| T::lit(rng.normal()));
            let inp = Coupled::new(x1, x2)?;
            let back = rev_inverse(block, &rev_forward(block, &inp)?)?;
            worst = worst.max(back.rel_err(&inp)?);
        }
    }
    report.push("round-trip", worst, worst <= tol, format!("rel ≤ {tol:e}"));
    Ok(())
}

/// Central differences of the loss for every parameter entry against the
/// analytic cotangents, per tensor. Always in f64.
fn finite_differences(m: &ModelConfig, opts: VerifyOptions, report: &mut VerifyReport) -> Result<(), CliError> {
    const TOL: f64 = 1e-6;
    let cfg = ModelConfig { dtype: DType::F64, ..m.clone() };
    let model = build_model_with_std::<f64>(&cfg, 0.2)?;
    let batch = Batch::<f64>::synthetic(&cfg, 2, &mut Rng::new(cfg.seed, 2));
    let (mut grads, _) = step(EngineKind::Reprop, &model, &batch, &mut MemoryLedger::new(), 1)?;
    if opts.corrupt_vjp {
        corrupt(&mut grads);
    }
    let by_name: std::collections::BTreeMap<String, &Tensor<f64>> = grads.named().into_iter().collect();
    let params: Vec<(String, Tensor<f64>)> = model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let mut worst = 0.0f64;
    for (i, (name, value)) in params.into_iter().enumerate() {
        let analytic = by_name
            .get(&name)
            .ok_or_else(|| revprop_core::Error::MissingGrad(name.clone()))?;
        let mut inputs = [value];
        let numeric = fd_gradient(&mut inputs, FD_STEP, |t| loss_with(&model, &batch, i, &t[0]))?;
        worst = worst.max(analytic.rel_err(&numeric[0])?);
    }
    report.push("finite-differences", worst, worst <= TOL, format!("rel ≤ {TOL:e}"));
    Ok(())
}

fn loss_with(model: &Model<f64>, batch: &Batch<f64>, index: usize, value: &Tensor<f64>) -> revprop_core::Result<f64> {
    let mut m = model.clone();
    *m.named_params_mut().swap_remove(index).1 = value.clone();
    let (logits, _) = m.forward_full(batch)?;
    Ok(loss_and_grad_head(&logits, &batch.labels)?.0)
}

/// Scales the first block's attention cotangents by 1%.
fn corrupt(grads: &mut GradStore<f64>) {
    if let Some(g) = grads.blocks.values_mut().next() {
        for v in g.d_f.w_qkv.data_mut() {
            *v *= 1.01;
        }
    }
}

fn parity<T: Scalar>(m: &ModelConfig, threads: usize, tol: f64, report: &mut VerifyReport) -> Result<(), CliError> {
    let model = build_model_with_std::<T>(m, 0.2)?;
    let batch = Batch::<T>::synthetic(m, 2, &mut Rng::new(m.seed, 4));
    let mut ledger = MemoryLedger::new();
    let (gv, _) = step(EngineKind::Vanilla, &model, &batch, &mut ledger, 1)?;
    let (gr, _) = step(EngineKind::Reprop, &model, &batch, &mut ledger, 1)?;
    let (gp, _) = step(EngineKind::Pareprop, &model, &batch, &mut ledger, threads.max(2))?;
    let (g1, _) = step(EngineKind::Pareprop, &model, &batch, &mut ledger, 1)?;
    let err = gr.max_rel_err(&gv)?;
    report.push("parity reprop/vanilla", err, err <= tol, format!("rel ≤ {tol:e}"));
    report.push("parity pareprop/reprop", gp.max_rel_err(&gr)?, gp.bit_eq(&gr), "bit-identical".into());
    report.push("pareprop one lane/two", g1.max_rel_err(&gp)?, g1.bit_eq(&gp), "bit-identical".into());
    Ok(())
}

/// Memory fits over isotropic depths at the configured first-stage shape.
/// Slopes are reported in block footprints per block.
fn memory<T: Scalar>(m: &ModelConfig, report: &mut VerifyReport) -> Result<(), CliError> {
    let fits = memory_fits::<T>(m)?;
    report.push("memory slope vanilla", fits.slope(EngineKind::Vanilla), fits.slope(EngineKind::Vanilla) > 1.0, "> 1".into());
    for engine in [EngineKind::Reprop, EngineKind::Pareprop] {
        let s = fits.slope(engine);
        report.push(&format!("memory slope {engine}"), s, s.abs() < 0.1, "|·| < 0.1".into());
    }
    let extra = fits.max_pipeline_extra();
    report.push("pareprop extra memory", extra, extra <= 2.0, "≤ 2 footprints".into());
    Ok(())
}

/// Peak activation bytes of every engine at each depth in [`SLOPE_DEPTHS`].
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryFits {
    pub depths: Vec<usize>,
    /// Largest block footprint over all depths.
    pub footprint: u64,
    pub peaks: Vec<(EngineKind, Vec<u64>)>,
}

impl MemoryFits {
    pub fn peaks(&self, engine: EngineKind) -> &[u64] {
        &self.peaks.iter().find(|(e, _)| *e == engine).expect("all engines measured").1
    }

    /// Least-squares slope of peak bytes against depth, in footprints.
    pub fn slope(&self, engine: EngineKind) -> f64 {
        let x: Vec<f64> = self.depths.iter().map(|&d| d as f64).collect();
        let y: Vec<f64> = self.peaks(engine).iter().map(|&p| p as f64).collect();
        linear_slope(&x, &y) / self.footprint as f64
    }

    /// Largest `peak(pareprop) − peak(reprop)` over depths, in footprints.
    pub fn max_pipeline_extra(&self) -> f64 {
        self.peaks(EngineKind::Pareprop)
            .iter()
            .zip(self.peaks(EngineKind::Reprop))
            .map(|(&p, &r)| (p as f64 - r as f64) / self.footprint as f64)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn memory_fits<T: Scalar>(m: &ModelConfig) -> Result<MemoryFits, CliError> {
    let shape = m.stage_shapes()[0];
    let mut peaks: Vec<(EngineKind, Vec<u64>)> = EngineKind::ALL.iter().map(|&e| (e, Vec::new())).collect();
    let mut footprint = 0;
    for &depth in &SLOPE_DEPTHS {
        let cfg = ModelConfig {
            kind: ModelKind::Isotropic,
            depths: vec![depth],
            seq_len: shape.tokens,
            ..m.clone()
        };
        let model = revprop_core::build_model::<T>(&cfg)?;
        let batch = Batch::<T>::synthetic(&cfg, 1, &mut Rng::new(cfg.seed, 5));
        footprint = footprint.max(max_block_footprint(&model, &batch)?);
        for (engine, p) in peaks.iter_mut() {
            let (_, stats) = step(*engine, &model, &batch, &mut MemoryLedger::new(), 1)?;
            p.push(stats.peak_activation_bytes);
        }
    }
    Ok(MemoryFits { depths: SLOPE_DEPTHS.to_vec(), footprint, peaks })
}

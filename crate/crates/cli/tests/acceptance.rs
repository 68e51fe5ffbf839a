//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails, except the live overlap benchmark on a
//! host with fewer than two cores, which is reported but cannot gate.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use revprop_cli::bench::{run_bench, TIMING_COLUMNS};
use revprop_cli::verify::memory_fits;
use revprop_cli::BenchConfig;
use revprop_core::engine::schedule::{format_slots, makespan, pipelined_tasks, sequential_tasks, BlockCosts};
use revprop_core::gradcheck::{fd_gradient, FD_STEP};
use revprop_core::layers::{AttentionParams, FusionKind, MlpParams};
use revprop_core::model::{build_model_with_std, loss_and_grad_head};
use revprop_core::rev::{rev_backward_local, rev_forward, rev_inverse, Coupled, RevBlock, TransformerBlock};
use revprop_core::{
    build_model, max_block_footprint, sgd_update, step, step_pareprop_with, step_reprop, Batch, DType, EngineKind,
    MemoryLedger, Model, ModelConfig, Rng, Scalar, Tensor,
};

struct Outcome {
    passed: bool,
    detail: String,
    /// Set when the host cannot run the check as written.
    waived: Option<String>,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail, waived: None }
    }
}

fn main() {
    let criteria: Vec<(&str, &str, fn() -> Outcome, Duration)> = vec![
        ("1", "reconstruction", reconstruction, Duration::from_secs(10)),
        ("2", "gradient correctness", gradients, Duration::from_secs(60)),
        ("3", "engine parity", parity, Duration::from_secs(60)),
        ("4", "memory decoupling", memory_decoupling, Duration::from_secs(30)),
        ("5", "pipeline extra memory", pipeline_extra, Duration::from_secs(60)),
        ("6a", "makespan oracle", makespan_oracle, Duration::from_secs(300)),
        ("6b", "live overlap speedup", live_overlap, Duration::from_secs(300)),
        ("7", "pipeline schedule shape", schedule_shape, Duration::from_secs(60)),
        ("8", "determinism", determinism, Duration::from_secs(60)),
        ("9", "descent smoke test", descent, Duration::from_secs(60)),
    ];
    let mut gating_failures = 0;
    for (id, name, run, limit) in criteria {
        let start = Instant::now();
        let mut out = run();
        let elapsed = start.elapsed();
        if elapsed > limit {
            out.passed = false;
            out.detail.push_str(&format!("; over time limit {limit:?}"));
        }
        let verdict = if out.passed { "PASS" } else { "FAIL" };
        let note = out.waived.as_deref().map(|w| format!(" [not gating: {w}]")).unwrap_or_default();
        println!("criterion {id:<3} {verdict}  {name}: {} ({:.2?}){note}", out.detail, elapsed);
        if !out.passed && out.waived.is_none() {
            gating_failures += 1;
        }
    }
    if gating_failures > 0 {
        println!("{gating_failures} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn random_block<T: Scalar>(d: usize, heads: usize, std: f64, rng: &mut Rng) -> TransformerBlock<T> {
    RevBlock::new(
        AttentionParams::init(d, heads, None, std, rng).unwrap(),
        MlpParams::init(d, 4, std, rng).unwrap(),
        0,
    )
}

fn normal<T: Scalar>(dims: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(dims, |_| T::lit(rng.normal()))
}

fn round_trip_errors<T: Scalar>(trials: usize) -> f64 {
    let mut rng = Rng::new(2024, 1);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let heads = [1, 2, 4][rng.below(3)];
        let d = heads * (1 + rng.below(16 / heads));
        let n = 1 + rng.below(16);
        let std = 0.02 + 0.48 * rng.uniform();
        let block = random_block::<T>(d, heads, std, &mut rng);
        let dims = [2, n, d];
        let inp = Coupled::new(normal(&dims, &mut rng), normal(&dims, &mut rng)).unwrap();
        let back = rev_inverse(&block, &rev_forward(&block, &inp).unwrap()).unwrap();
        worst = worst.max(back.rel_err(&inp).unwrap());
    }
    worst
}

fn reconstruction() -> Outcome {
    let e64 = round_trip_errors::<f64>(100);
    let e32 = round_trip_errors::<f32>(100);
    Outcome::new(
        e64 <= 1e-12 && e32 <= 1e-5,
        format!("100 blocks, max rel f64 {e64:.2e} (≤ 1e-12), f32 {e32:.2e} (≤ 1e-5)"),
    )
}

/// Every input and parameter of a block against central differences of
/// `⟨out, cotangent⟩`.
fn block_fd_error(n: usize, d: usize, heads: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed, 2);
    let block = random_block::<f64>(d, heads, 0.3, &mut rng);
    let dims = [1, n, d];
    let inp = Coupled::new(normal(&dims, &mut rng), normal(&dims, &mut rng)).unwrap();
    let cot = Coupled::new(normal(&dims, &mut rng), normal(&dims, &mut rng)).unwrap();
    let out = rev_forward(&block, &inp).unwrap();
    let (_, d_inp, grads) = rev_backward_local(&block, &out, &cot).unwrap();

    let mut analytic: Vec<Tensor<f64>> = vec![d_inp.x1, d_inp.x2];
    analytic.extend(grads.named::<f64>().into_iter().map(|(_, t)| t.clone()));
    let mut inputs: Vec<Tensor<f64>> = vec![inp.x1.clone(), inp.x2.clone()];
    inputs.extend(block.named::<f64>().into_iter().map(|(_, t)| t.clone()));
    let numeric = fd_gradient(&mut inputs, FD_STEP, |ts| {
        let mut b = block.clone();
        for ((_, p), t) in b.named_mut::<f64>().into_iter().zip(&ts[2..]) {
            *p = t.clone();
        }
        let o = rev_forward(&b, &Coupled::new(ts[0].clone(), ts[1].clone())?)?;
        Ok(o.x1.dot(&cot.x1)? + o.x2.dot(&cot.x2)?)
    })
    .unwrap();
    analytic.iter().zip(&numeric).map(|(a, n)| a.rel_err(n).unwrap()).fold(0.0, f64::max)
}

fn model_fd_error() -> f64 {
    let cfg = ModelConfig { in_dim: 3, num_classes: 3, ..ModelConfig::isotropic(2, 4, 2, 4) };
    let model = build_model_with_std::<f64>(&cfg, 0.3).unwrap();
    let batch = Batch::<f64>::synthetic(&cfg, 2, &mut Rng::new(3, 3));
    let (grads, _) = step_reprop(&model, &batch, &mut MemoryLedger::new()).unwrap();
    let by_name: BTreeMap<String, &Tensor<f64>> = grads.named().into_iter().collect();
    let mut worst = 0.0f64;
    for (i, (name, value)) in model.named_params().into_iter().enumerate() {
        let mut inputs = [value.clone()];
        let numeric = fd_gradient(&mut inputs, FD_STEP, |t| {
            let mut m = model.clone();
            *m.named_params_mut().swap_remove(i).1 = t[0].clone();
            let (logits, _) = m.forward_full(&batch)?;
            Ok(loss_and_grad_head(&logits, &batch.labels)?.0)
        })
        .unwrap();
        worst = worst.max(by_name[&name].rel_err(&numeric[0]).unwrap());
    }
    worst
}

fn gradients() -> Outcome {
    let mut block_worst = 0.0f64;
    let mut count = 0;
    for n in 1..=4 {
        for (d, heads) in [(4, 1), (4, 2), (4, 4)] {
            block_worst = block_worst.max(block_fd_error(n, d, heads, (n * 10 + heads) as u64));
            count += 1;
        }
    }
    let model_worst = model_fd_error();
    Outcome::new(
        block_worst <= 1e-6 && model_worst <= 1e-6,
        format!("{count} blocks max rel {block_worst:.2e}, depth-2 model max rel {model_worst:.2e} (≤ 1e-6)"),
    )
}

fn trial_config(seed: u64, dtype: DType) -> ModelConfig {
    let base = if seed.is_multiple_of(2) {
        ModelConfig::isotropic(1 + (seed as usize % 4), 8, 2, 4)
    } else {
        ModelConfig { window: Some(4), fusion: FusionKind::Mlp, ..ModelConfig::hierarchical(&[2, 1], 4, 2, 8) }
    };
    ModelConfig { seed, dtype, ..base }
}

fn engine_grads<T: Scalar>(cfg: &ModelConfig, seed: u64) -> [revprop_core::GradStore<T>; 3] {
    let model = build_model_with_std::<T>(cfg, 0.2).unwrap();
    let batch = Batch::<T>::synthetic(cfg, 2, &mut Rng::new(seed, 4));
    let mut ledger = MemoryLedger::new();
    EngineKind::ALL.map(|e| step(e, &model, &batch, &mut ledger, 2).unwrap().0)
}

fn parity() -> Outcome {
    let mut bit_identical = 0;
    let mut f32_worst = 0.0f64;
    let mut f64_worst = 0.0f64;
    for seed in 0..50 {
        let [v, r, p] = engine_grads::<f32>(&trial_config(seed, DType::F32), seed);
        bit_identical += p.bit_eq(&r) as usize;
        f32_worst = f32_worst.max(r.max_rel_err(&v).unwrap());
        let [v, r, _] = engine_grads::<f64>(&trial_config(seed, DType::F64), seed);
        f64_worst = f64_worst.max(r.max_rel_err(&v).unwrap());
    }
    Outcome::new(
        bit_identical == 50 && f64_worst <= 1e-12 && f32_worst <= 1e-4,
        format!(
            "pipeline bit-identical to sequential in {bit_identical}/50 f32 trials; \
             sequential vs stored max rel f64 {f64_worst:.2e} (≤ 1e-12), f32 {f32_worst:.2e} (≤ 1e-4)"
        ),
    )
}

fn memory_decoupling() -> Outcome {
    let cfg = ModelConfig { width: 16, heads: 4, seq_len: 8, ..ModelConfig::default() };
    let fits = memory_fits::<f64>(&cfg).unwrap();
    let sv = fits.slope(EngineKind::Vanilla);
    let sr = fits.slope(EngineKind::Reprop);
    let sp = fits.slope(EngineKind::Pareprop);
    let last = fits.depths.len() - 1;
    let ratio = fits.peaks(EngineKind::Vanilla)[last] as f64 / fits.peaks(EngineKind::Reprop)[last] as f64;
    Outcome::new(
        sv > 1.0 && sr.abs() < 0.1 && sp.abs() < 0.1 && ratio > 3.0,
        format!(
            "slopes per block in footprints: stored {sv:.3} (> 1), sequential {sr:.3}, pipeline {sp:.3} (|·| < 0.1); \
             depth-16 stored/sequential peak {ratio:.2} (> 3)"
        ),
    )
}

fn extra_for<T: Scalar>(cfg: &ModelConfig, batch: usize) -> f64 {
    let model = build_model::<T>(cfg).unwrap();
    let data = Batch::<T>::synthetic(cfg, batch, &mut Rng::new(cfg.seed, 6));
    let phi = max_block_footprint(&model, &data).unwrap() as f64;
    let mut ledger = MemoryLedger::new();
    let r = step(EngineKind::Reprop, &model, &data, &mut ledger, 1).unwrap().1.peak_activation_bytes;
    let p = step(EngineKind::Pareprop, &model, &data, &mut ledger, 2).unwrap().1.peak_activation_bytes;
    (p as f64 - r as f64) / phi
}

fn pipeline_extra() -> Outcome {
    let mut configs = Vec::new();
    for depth in [1, 2, 3, 4, 8, 16] {
        for width in [4, 8, 16] {
            configs.push(ModelConfig::isotropic(depth, width, 2, 8));
        }
    }
    configs.push(ModelConfig { window: Some(2), ..ModelConfig::isotropic(6, 8, 2, 8) });
    configs.push(ModelConfig::hierarchical(&[2, 2], 4, 2, 8));
    configs.push(ModelConfig { fusion: FusionKind::Mlp, ..ModelConfig::hierarchical(&[1, 3, 2], 4, 2, 16) });
    configs.push(ModelConfig { merge_factor: 4, ..ModelConfig::hierarchical(&[3, 1], 4, 2, 16) });
    let mut worst = f64::NEG_INFINITY;
    let mut runs = 0;
    for cfg in &configs {
        for batch in [1, 3] {
            worst = worst.max(extra_for::<f64>(cfg, batch));
            worst = worst.max(extra_for::<f32>(&ModelConfig { dtype: DType::F32, ..cfg.clone() }, batch));
            runs += 2;
        }
    }
    Outcome::new(worst <= 2.0, format!("{runs} runs, max extra {worst:.3} footprints (≤ 2)"))
}

fn makespan_oracle() -> Outcome {
    let mut exact = true;
    let mut ratios = Vec::new();
    for depth in 1..=64u64 {
        let costs = BlockCosts::uniform(depth as usize, 7, 7);
        let seq = makespan(&sequential_tasks(&costs));
        let pipe = makespan(&pipelined_tasks(&costs));
        exact &= (depth + 1) * seq == 2 * depth * pipe;
        if [1, 4, 16, 64].contains(&depth) {
            ratios.push(format!("L={depth}: {pipe}/{seq}"));
        }
    }
    Outcome::new(exact, format!("pipelined/sequential == (L+1)/(2L) exactly for L = 1..64 ({})", ratios.join(", ")))
}

fn live_overlap() -> Outcome {
    let cfg = ModelConfig {
        mlp_ratio: 4,
        in_dim: 16,
        num_classes: 10,
        dtype: DType::F32,
        ..ModelConfig::isotropic(12, 64, 4, 16)
    };
    let model = build_model::<f32>(&cfg).unwrap();
    let (steps, batch) = (4, 8);
    let mut rng = Rng::new(cfg.seed, 7);
    let data: Vec<Batch<f32>> = (0..steps + 1).map(|_| Batch::synthetic(&cfg, batch, &mut rng)).collect();
    let throughput = |kind: EngineKind| -> f64 {
        let mut ledger = MemoryLedger::new();
        step(kind, &model, &data[0], &mut ledger, 2).unwrap();
        let start = Instant::now();
        for b in &data[1..] {
            step(kind, &model, b, &mut ledger, 2).unwrap();
        }
        (batch * steps) as f64 / start.elapsed().as_secs_f64()
    };
    let mut ratios = Vec::new();
    for _ in 0..3 {
        let r = throughput(EngineKind::Reprop);
        let p = throughput(EngineKind::Pareprop);
        ratios.push(p / r);
    }
    let mean = ratios.iter().sum::<f64>() / 3.0;
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut out = Outcome::new(
        mean >= 1.05 && min >= 0.98,
        format!("pipeline/sequential throughput mean {mean:.3} (≥ 1.05), min {min:.3} (≥ 0.98), {cores} core(s)"),
    );
    if cores < 2 {
        out.waived = Some("host exposes one core, so the two lanes time-share".into());
    }
    out
}

fn schedule_shape() -> Outcome {
    let cfg = ModelConfig::isotropic(3, 8, 2, 4);
    let model: Model<f64> = build_model(&cfg).unwrap();
    let batch = Batch::synthetic(&cfg, 2, &mut Rng::new(0, 8));
    let mut logs = Vec::new();
    for lanes in [1, 2] {
        let (_, stats) = step_pareprop_with(&model, &batch, &mut MemoryLedger::new(), lanes).unwrap();
        logs.push(stats.slots);
    }
    let slots = &logs[1][0];
    let shape = format_slots(slots);
    let last = slots.len() - 1;
    let idle_ok = slots
        .iter()
        .enumerate()
        .all(|(k, s)| s.grad.is_none() == (k == 0) && s.recompute.is_none() == (k == last));
    Outcome::new(
        shape == "[R3],[G3‖R2],[G2‖R1],[G1]" && idle_ok && logs[0] == logs[1],
        format!("slot log {shape}; lane G idle only in slot 0, lane R only in the last: {idle_ok}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let cfg = BenchConfig {
            model: ModelConfig { seed: 42, ..ModelConfig::hierarchical(&[2, 2], 4, 2, 8) },
            batch_sizes: vec![1, 4],
            steps: 3,
            warmup: 1,
            repeats: 2,
            out_path: dir.path().join(name).to_string_lossy().into_owned(),
            ..BenchConfig::default()
        };
        let out = run_bench(&cfg).unwrap();
        let csv = std::fs::read_to_string(&cfg.out_path).unwrap();
        let stable: Vec<Vec<String>> = csv
            .lines()
            .map(|l| {
                l.split(',')
                    .enumerate()
                    .filter(|(i, _)| !TIMING_COLUMNS.contains(i))
                    .map(|(_, v)| v.to_string())
                    .collect()
            })
            .collect();
        let traces: Vec<Vec<u64>> = out.traces.iter().map(|t| t.losses.iter().map(|l| l.to_bits()).collect()).collect();
        runs.push((stable, traces));
    }
    let rows = runs[0].0.len() - 1;
    Outcome::new(
        runs[0] == runs[1],
        format!("{rows} CSV rows and all loss traces identical between runs outside timing columns"),
    )
}

fn descent() -> Outcome {
    const LR: f64 = 1.0;
    let cfg = ModelConfig { num_classes: 4, ..ModelConfig::isotropic(4, 8, 2, 4) };
    let initial = build_model::<f64>(&cfg).unwrap();
    let batch = Batch::synthetic(&cfg, 8, &mut Rng::new(9, 9));
    let mut finals = Vec::new();
    let mut curve = Vec::new();
    for engine in EngineKind::ALL {
        let mut model = initial.clone();
        let mut losses = Vec::new();
        for _ in 0..20 {
            let (grads, stats) = step(engine, &model, &batch, &mut MemoryLedger::new(), 2).unwrap();
            losses.push(stats.loss);
            sgd_update(&mut model, &grads, LR).unwrap();
        }
        let (logits, _) = model.forward_full(&batch).unwrap();
        finals.push(loss_and_grad_head(&logits, &batch.labels).unwrap().0);
        curve = losses;
    }
    let first = curve[0];
    let last = finals[1];
    let early = curve[..10].iter().sum::<f64>() / 10.0;
    let late = curve[10..].iter().sum::<f64>() / 10.0;
    let spread = finals.iter().map(|f| (f - last).abs() / last.abs()).fold(0.0, f64::max);
    Outcome::new(
        last < 0.8 * first && late < early && spread <= 1e-10,
        format!(
            "loss {first:.4} → {last:.4} ({:.1}% drop, ≥ 20%), mean of later half below earlier half; \
             final losses across engines within rel {spread:.1e} (≤ 1e-10)",
            100.0 * (1.0 - last / first)
        ),
    )
}


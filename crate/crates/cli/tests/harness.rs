use revprop_cli::bench::sweep;
use revprop_cli::probe::{probe_max_batch, PeakModel};
use revprop_cli::{run_verify, BenchConfig, VerifyOptions};
use revprop_core::{DType, EngineKind, ModelConfig};

fn tiny() -> BenchConfig {
    BenchConfig {
        model: ModelConfig::isotropic(3, 4, 2, 4),
        batch_sizes: vec![2],
        steps: 3,
        warmup: 1,
        repeats: 3,
        ..BenchConfig::default()
    }
}

#[test]
fn loss_traces_agree_across_engines() {
    let out = sweep(&tiny()).unwrap();
    let trace = |e| &out.traces.iter().find(|t| t.engine == e).unwrap().losses;
    let (v, r, p) = (trace(EngineKind::Vanilla), trace(EngineKind::Reprop), trace(EngineKind::Pareprop));
    assert_eq!(r, p);
    assert_eq!(v[0].to_bits(), r[0].to_bits());
    for (a, b) in v.iter().zip(r) {
        assert!((a - b).abs() <= 1e-10 * b.abs());
    }
}

#[test]
fn loss_traces_repeat_across_runs() {
    let a = sweep(&tiny()).unwrap();
    let b = sweep(&tiny()).unwrap();
    assert_eq!(a.traces, b.traces);
    let peaks = |o: &revprop_cli::BenchOutcome| o.records.iter().map(|r| r.peak_bytes).collect::<Vec<_>>();
    assert_eq!(peaks(&a), peaks(&b));
}

#[test]
fn record_peak_equals_ledger_prediction() {
    let out = sweep(&tiny()).unwrap();
    for r in &out.records {
        let engine = r.engine.parse().unwrap();
        assert_eq!(r.peak_bytes, PeakModel::measure(&tiny().model, engine).unwrap().peak_at(r.batch));
    }
}

#[test]
fn recompute_extends_the_batch_at_depth() {
    let model = ModelConfig::isotropic(8, 8, 2, 8);
    let budget = 4 << 20;
    let vanilla = probe_max_batch(&model, EngineKind::Vanilla, budget).unwrap();
    let reprop = probe_max_batch(&model, EngineKind::Reprop, budget).unwrap();
    assert!(reprop > vanilla, "{reprop} vs {vanilla}");
}

#[test]
fn f32_round_trip_is_in_the_rounding_regime() {
    let mut cfg = tiny();
    cfg.model.dtype = DType::F32;
    let report = run_verify(&cfg, VerifyOptions::default()).unwrap();
    let rt = report.get("round-trip").unwrap();
    assert!((1e-8..=1e-4).contains(&rt.measured), "{}", rt.measured);
    assert!(report.passed(), "{report}");
}

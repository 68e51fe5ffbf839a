//! Largest batch whose predicted activation peak fits a byte budget.

use revprop_core::engine::replay_peak;
use revprop_core::{build_model, step, Batch, DType, EngineKind, Error, MemoryLedger, ModelConfig, Rng, Scalar};

use crate::CliError;

/// Doubling stops here even if the budget would allow more.
pub const MAX_PROBE_BATCH: usize = 1 << 24;

/// Peak activation bytes of one step as a function of batch size.
///
/// Every tracked activation is proportional to the batch, so the event log of
/// a single batch-1 step, scaled, predicts every other batch exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeakModel {
    deltas: Vec<i64>,
}

impl PeakModel {
    pub fn measure(model: &ModelConfig, engine: EngineKind) -> Result<Self, CliError> {
        match model.dtype {
            DType::F32 => Self::measure_as::<f32>(model, engine),
            DType::F64 => Self::measure_as::<f64>(model, engine),
        }
    }

    fn measure_as<T: Scalar>(cfg: &ModelConfig, engine: EngineKind) -> Result<Self, CliError> {
        let model = build_model::<T>(cfg)?;
        let batch = Batch::<T>::synthetic(cfg, 1, &mut Rng::new(cfg.seed, 0));
        let mut ledger = MemoryLedger::new();
        // One lane records the same events as two.
        step(engine, &model, &batch, &mut ledger, 1)?;
        Ok(Self { deltas: ledger.events().iter().map(|e| e.delta).collect() })
    }

    pub fn peak_at(&self, batch: usize) -> u64 {
        replay_peak(self.deltas.iter().copied(), batch as u64)
    }
}

/// Largest power-of-two batch whose predicted peak is within `budget`.
pub fn probe_max_batch(model: &ModelConfig, engine: EngineKind, budget: u64) -> Result<usize, CliError> {
    if budget == 0 {
        return Err(CliError::Config("budget must be positive".into()));
    }
    let peaks = PeakModel::measure(model, engine)?;
    let needed = peaks.peak_at(1);
    if needed > budget {
        return Err(Error::Budget { budget, needed }.into());
    }
    let mut b = 1;
    while b * 2 <= MAX_PROBE_BATCH && peaks.peak_at(b * 2) <= budget {
        b *= 2;
    }
    Ok(b)
}

/// Recommended batch range: a third to a half of the probed maximum.
pub fn operating_band(max_batch: usize) -> (usize, usize) {
    let lo = max_batch.div_ceil(3).max(1);
    let hi = (max_batch / 2).max(lo);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::isotropic(4, 8, 2, 4)
    }

    #[test]
    fn exact_budget_is_feasible() {
        for engine in EngineKind::ALL {
            let peak8 = PeakModel::measure(&cfg(), engine).unwrap().peak_at(8);
            assert_eq!(probe_max_batch(&cfg(), engine, peak8).unwrap(), 8);
            assert_eq!(probe_max_batch(&cfg(), engine, peak8 - 1).unwrap(), 4);
        }
    }

    #[test]
    fn result_is_tight() {
        let peaks = PeakModel::measure(&cfg(), EngineKind::Reprop).unwrap();
        let budget = 1_000_000;
        let b = probe_max_batch(&cfg(), EngineKind::Reprop, budget).unwrap();
        assert!(peaks.peak_at(b) <= budget && peaks.peak_at(2 * b) > budget);
    }

    #[test]
    fn too_small_budget_is_an_error() {
        assert!(matches!(
            probe_max_batch(&cfg(), EngineKind::Vanilla, 16),
            Err(CliError::Core(Error::Budget { budget: 16, .. }))
        ));
        assert!(probe_max_batch(&cfg(), EngineKind::Vanilla, 0).is_err());
    }

    #[test]
    fn band() {
        assert_eq!(operating_band(64), (22, 32));
        assert_eq!(operating_band(1), (1, 1));
        assert_eq!(operating_band(3), (1, 1));
    }
}

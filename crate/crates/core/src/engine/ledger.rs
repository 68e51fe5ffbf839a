use crate::error::{Error, Result};

/// One signed change to the live activation bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub tag: String,
    pub delta: i64,
}

/// Counts activation bytes held across operations during a step.
///
/// Only the controlling thread records events, so the log order is fixed by
/// the schedule rather than by thread timing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryLedger {
    live: u64,
    peak: u64,
    events: Vec<LedgerEvent>,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn track(&mut self, tag: impl Into<String>, delta: i64) -> Result<()> {
        let tag = tag.into();
        let live = self.live as i128 + delta as i128;
        if live < 0 {
            return Err(Error::Accounting(format!(
                "`{tag}` frees {} bytes with only {} live",
                -delta, self.live
            )));
        }
        self.live = live as u64;
        self.peak = self.peak.max(self.live);
        self.events.push(LedgerEvent { tag, delta });
        Ok(())
    }

    pub fn alloc(&mut self, tag: impl Into<String>, bytes: u64) -> Result<()> {
        self.track(tag, bytes as i64)
    }

    pub fn free(&mut self, tag: impl Into<String>, bytes: u64) -> Result<()> {
        self.track(tag, -(bytes as i64))
    }

    pub fn live_bytes(&self) -> u64 {
        self.live
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    /// Clears counters and log before a new step.
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Peak of the same event sequence with every delta multiplied by `scale`.
    ///
    /// Every tracked tensor has the batch as its leading dimension, so a log
    /// recorded at batch 1 replayed at scale `B` gives the peak at batch `B`.
    pub fn replay_peak(&self, scale: u64) -> u64 {
        replay_peak(self.events.iter().map(|e| e.delta), scale)
    }
}

/// Maximum prefix sum of `deltas · scale`, starting from zero.
pub fn replay_peak(deltas: impl IntoIterator<Item = i64>, scale: u64) -> u64 {
    let mut live: i128 = 0;
    let mut peak: i128 = 0;
    for d in deltas {
        live += d as i128 * scale as i128;
        peak = peak.max(live);
    }
    peak.max(0) as u64
}

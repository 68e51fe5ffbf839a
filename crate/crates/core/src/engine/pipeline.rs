//! Two-lane backward pass over one stage.
//!
//! Lane R walks the blocks last to first, reconstructing each block's input
//! and intermediates. Lane G consumes them in the same order and computes
//! cotangents. A zero-capacity channel joins the lanes, so R holds at most
//! one finished block while G works on the previous one.

use std::sync::mpsc::sync_channel;
use std::time::Instant;

use super::schedule::Slot;
use super::{tag, Acts, GradStore, MemoryLedger};
use crate::error::{Error, Result};
use crate::layers::Footprint;
use crate::model::{Stage, StageRecord};
use crate::rev::{forward_with_caches, recompute_from_output, rev_vjp, Coupled};
use crate::tensor::Scalar;

/// What lane R hands to lane G for block `pos` (1-based).
pub(super) struct Handoff<T: Scalar> {
    pos: usize,
    acts: Acts<T>,
    busy_ns: u64,
}

/// Lane R as an iterator over blocks `L..=1`.
struct RecomputeLane<'a, T: Scalar> {
    stage: &'a Stage<T>,
    record: &'a StageRecord<T>,
    out: Option<Coupled<T>>,
    pos: usize,
}

impl<'a, T: Scalar> RecomputeLane<'a, T> {
    fn new(stage: &'a Stage<T>, record: &'a StageRecord<T>) -> Self {
        Self { stage, record, out: None, pos: stage.blocks.len() }
    }
}

impl<T: Scalar> Iterator for RecomputeLane<'_, T> {
    type Item = Result<Handoff<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos == 0 {
            return None;
        }
        let pos = self.pos;
        self.pos -= 1;
        let start = Instant::now();
        let block = &self.stage.blocks[pos - 1];
        let result = if pos > 1 {
            let src = self.out.as_ref().unwrap_or(&self.record.output);
            recompute_from_output(block, src).map(|(inp, acts)| (Some(inp), acts))
        } else {
            forward_with_caches(block, &self.record.input).map(|(_, acts)| (None, acts))
        };
        Some(result.map(|(inp, acts)| {
            self.out = inp;
            Handoff { pos, acts, busy_ns: start.elapsed().as_nanos() as u64 }
        }))
    }
}

pub(super) struct StageOutcome<T> {
    pub d_in: Coupled<T>,
    pub slots: Vec<Slot>,
    pub grad_busy_ns: u64,
    pub recompute_busy_ns: u64,
}

pub(super) fn run_stage<T: Scalar>(
    s: usize,
    stage: &Stage<T>,
    record: &StageRecord<T>,
    d_out: Coupled<T>,
    ledger: &mut MemoryLedger,
    grads: &mut GradStore<T>,
    threaded: bool,
) -> Result<StageOutcome<T>> {
    let lane = RecomputeLane::new(stage, record);
    if threaded {
        run_threaded(lane, |next| drive(s, stage, record, d_out, ledger, grads, next))
    } else {
        let mut lane = lane;
        let mut next = || lane.next().unwrap_or_else(|| Err(Error::Scheduler("recompute lane exhausted".into())));
        drive(s, stage, record, d_out, ledger, grads, &mut next)
    }
}

/// Runs `lane` on a scoped thread and hands its items to `consume` through
/// a rendezvous channel.
fn run_threaded<T, I, R>(lane: I, consume: impl FnOnce(&mut dyn FnMut() -> Result<Handoff<T>>) -> Result<R>) -> Result<R>
where
    T: Scalar,
    I: Iterator<Item = Result<Handoff<T>>> + Send,
{
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<Result<Handoff<T>>>(0);
        let worker = scope.spawn(move || {
            for item in lane {
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        let mut next = move || {
            rx.recv()
                .map_err(|_| Error::Scheduler("recompute lane stopped before handing off".into()))?
        };
        let result = consume(&mut next);
        // Dropping the receiver releases a lane blocked on the hand-off.
        drop(next);
        match worker.join() {
            Ok(()) => result,
            Err(_) => Err(Error::Scheduler("recompute lane panicked".into())),
        }
    })
}

/// Lane G plus the ledger. Events are recorded per slot in a fixed order:
/// R allocations, G allocations, G frees, R frees.
fn drive<T: Scalar>(
    s: usize,
    stage: &Stage<T>,
    record: &StageRecord<T>,
    d_out: Coupled<T>,
    ledger: &mut MemoryLedger,
    grads: &mut GradStore<T>,
    next: &mut dyn FnMut() -> Result<Handoff<T>>,
) -> Result<StageOutcome<T>> {
    let depth = stage.blocks.len();
    let c = record.output.bytes();
    let mut recv = |expect: usize| -> Result<Handoff<T>> {
        let h = next()?;
        if h.pos != expect {
            return Err(Error::Scheduler(format!("expected block {expect}, lane delivered {}", h.pos)));
        }
        Ok(h)
    };

    let mut slots = Vec::with_capacity(depth + 1);
    let mut recompute_busy_ns = 0;
    let mut grad_busy_ns = 0;

    let first = recv(depth)?;
    recompute_busy_ns += first.busy_ns;
    r_alloc(s, stage, &first, c, ledger)?;
    r_free(s, stage, &first, c, ledger)?;
    slots.push(Slot { grad: None, recompute: Some(depth) });

    let mut pending = Some(first);
    let mut d = d_out;
    for pos in (1..=depth).rev() {
        let h = pending.take().expect("a hand-off per block");
        let block = &stage.blocks[pos - 1];
        let start = Instant::now();
        let (d_in, g) = rev_vjp(block, &h.acts, &d)?;
        grad_busy_ns += start.elapsed().as_nanos() as u64;

        let incoming = if pos > 1 { Some(recv(pos - 1)?) } else { None };
        if let Some(r) = &incoming {
            recompute_busy_ns += r.busy_ns;
            r_alloc(s, stage, r, c, ledger)?;
        }
        ledger.alloc(tag(s, &format!("b{}.d_in", block.id)), d_in.bytes())?;
        ledger.free(tag(s, &format!("b{}.d_out", block.id)), d.bytes())?;
        ledger.free(tag(s, &format!("b{}.acts", block.id)), h.acts.bytes())?;
        if let Some(r) = &incoming {
            r_free(s, stage, r, c, ledger)?;
        }
        grads.insert_block(block.id, g)?;
        slots.push(Slot { grad: Some(pos), recompute: incoming.as_ref().map(|r| r.pos) });
        d = d_in;
        pending = incoming;
    }
    Ok(StageOutcome { d_in: d, slots, grad_busy_ns, recompute_busy_ns })
}

fn r_alloc<T: Scalar>(s: usize, stage: &Stage<T>, h: &Handoff<T>, c: u64, ledger: &mut MemoryLedger) -> Result<()> {
    let id = stage.blocks[h.pos - 1].id;
    ledger.alloc(tag(s, &format!("b{id}.acts")), h.acts.bytes())?;
    if h.pos > 1 {
        ledger.alloc(tag(s, &format!("b{id}.input")), c)?;
    }
    Ok(())
}

/// Lane R is done with the output it reconstructed from; block 1 also
/// releases the stored stage input.
fn r_free<T: Scalar>(s: usize, stage: &Stage<T>, h: &Handoff<T>, c: u64, ledger: &mut MemoryLedger) -> Result<()> {
    let depth = stage.blocks.len();
    let id = stage.blocks[h.pos - 1].id;
    let src = if h.pos == depth { "output".to_string() } else { format!("b{}.input", id + 1) };
    ledger.free(tag(s, &src), c)?;
    if h.pos == 1 {
        ledger.free(tag(s, "input"), c)?;
    }
    Ok(())
}

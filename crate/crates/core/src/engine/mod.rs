//! Training steps: forward, loss, backward, and the memory ledger that
//! observes them.

mod ledger;
mod pipeline;
pub mod schedule;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

pub use ledger::{replay_peak, LedgerEvent, MemoryLedger};
pub use schedule::Slot;

use crate::error::{Error, Result};
use crate::layers::{AttentionParams, BoundaryGrads, Footprint, MlpParams, ParamSet};
use crate::model::{loss_and_grad_head, Batch, Model, Stage, StageRecord};
use crate::rev::{
    forward_with_caches, recompute_from_output, rev_forward, rev_vjp, BlockActivations, Coupled,
    TransformerBlockGrads,
};
use crate::tensor::{Scalar, Tensor};

pub(crate) type Acts<T> = BlockActivations<T, AttentionParams<T>, MlpParams<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EngineKind {
    Vanilla,
    Reprop,
    Pareprop,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::Vanilla, EngineKind::Reprop, EngineKind::Pareprop];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Vanilla => "vanilla",
            EngineKind::Reprop => "reprop",
            EngineKind::Pareprop => "pareprop",
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vanilla" => Ok(EngineKind::Vanilla),
            "reprop" => Ok(EngineKind::Reprop),
            "pareprop" => Ok(EngineKind::Pareprop),
            other => Err(format!("unknown engine `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub wall_ns: u64,
    pub peak_activation_bytes: u64,
    /// One entry for single-lane engines; `[grad, recompute]` for the pipeline.
    pub lane_busy_ns: Vec<u64>,
    pub blocks_processed: usize,
    /// Pipeline slots per stage, last stage first. Empty for other engines.
    pub slots: Vec<Vec<Slot>>,
}

/// Parameter cotangents of one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradStore<T> {
    pub embed_w: Option<Tensor<T>>,
    pub blocks: BTreeMap<usize, TransformerBlockGrads<T>>,
    pub boundaries: BTreeMap<usize, BoundaryGrads<T>>,
    pub head_w: Option<Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn new() -> Self {
        Self { embed_w: None, blocks: BTreeMap::new(), boundaries: BTreeMap::new(), head_w: None }
    }

    pub fn insert_block(&mut self, id: usize, g: TransformerBlockGrads<T>) -> Result<()> {
        if self.blocks.insert(id, g).is_some() {
            return Err(Error::Contract(format!("block {id} received two gradients")));
        }
        Ok(())
    }

    pub fn insert_boundary(&mut self, stage: usize, g: BoundaryGrads<T>) -> Result<()> {
        if self.boundaries.insert(stage, g).is_some() {
            return Err(Error::Contract(format!("boundary {stage} received two gradients")));
        }
        Ok(())
    }

    /// Cotangents under the same names as [`Model::named_params`].
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        if let Some(t) = &self.embed_w {
            v.push(("embed_w".to_string(), t));
        }
        for (id, g) in &self.blocks {
            v.extend(g.named().into_iter().map(|(n, t)| (format!("block{id}.{n}"), t)));
        }
        for (s, g) in &self.boundaries {
            v.extend(g.tensors().into_iter().map(|(n, t)| (format!("boundary{s}.{n}"), t)));
        }
        if let Some(t) = &self.head_w {
            v.push(("head_w".to_string(), t));
        }
        v
    }

    /// Largest norm-wise relative error over all tensors, against `reference`.
    pub fn max_rel_err(&self, reference: &Self) -> Result<f64> {
        let mine = self.named();
        let theirs = reference.named();
        if mine.len() != theirs.len() {
            return Err(Error::Contract(format!(
                "grad stores hold {} and {} tensors",
                mine.len(),
                theirs.len()
            )));
        }
        let mut worst = 0.0f64;
        for ((na, a), (nb, b)) in mine.iter().zip(&theirs) {
            if na != nb {
                return Err(Error::Contract(format!("grad `{na}` paired with `{nb}`")));
            }
            worst = worst.max(a.rel_err(b)?);
        }
        Ok(worst)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let a = self.named();
        let b = other.named();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, x), (nb, y))| na == nb && x.bit_eq(y))
    }
}

/// θ ← θ − lr·g for every parameter. Nothing is updated unless every
/// parameter has a gradient of the right shape.
pub fn sgd_update<T: Scalar>(model: &mut Model<T>, grads: &GradStore<T>, lr: f64) -> Result<()> {
    let named: BTreeMap<String, &Tensor<T>> = grads.named().into_iter().collect();
    let mut params = model.named_params_mut();
    for (name, p) in &params {
        match named.get(name) {
            None => return Err(Error::MissingGrad(name.clone())),
            Some(g) if !g.same_shape(p) => {
                return Err(Error::Shape(format!(
                    "grad `{name}` is {:?}, parameter is {:?}",
                    g.dims(),
                    p.dims()
                )))
            }
            Some(_) => {}
        }
    }
    let lr = T::lit(lr);
    for (name, p) in params.iter_mut() {
        let g = named[name.as_str()];
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v = *v - lr * d;
        }
    }
    Ok(())
}

/// Runs one training step with the chosen engine. `threads` caps the
/// pipeline's lane count; other engines ignore it.
pub fn step<T: Scalar>(
    kind: EngineKind,
    model: &Model<T>,
    batch: &Batch<T>,
    ledger: &mut MemoryLedger,
    threads: usize,
) -> Result<(GradStore<T>, StepStats)> {
    match kind {
        EngineKind::Vanilla => step_vanilla(model, batch, ledger),
        EngineKind::Reprop => step_reprop(model, batch, ledger),
        EngineKind::Pareprop => step_pareprop_with(model, batch, ledger, threads),
    }
}

/// Keeps every block's input and intermediates from the forward pass.
pub fn step_vanilla<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    ledger: &mut MemoryLedger,
) -> Result<(GradStore<T>, StepStats)> {
    run_step(model, batch, ledger, Mode::Vanilla)
}

/// Keeps stage boundaries only and reconstructs each block's input from its
/// output, one block at a time.
pub fn step_reprop<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    ledger: &mut MemoryLedger,
) -> Result<(GradStore<T>, StepStats)> {
    run_step(model, batch, ledger, Mode::Reprop)
}

/// Reconstruction runs on a second lane, one block ahead of the gradients.
pub fn step_pareprop<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    ledger: &mut MemoryLedger,
) -> Result<(GradStore<T>, StepStats)> {
    step_pareprop_with(model, batch, ledger, 2)
}

/// With `lanes == 1` the same slots run in order on the calling thread.
pub fn step_pareprop_with<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    ledger: &mut MemoryLedger,
    lanes: usize,
) -> Result<(GradStore<T>, StepStats)> {
    if lanes == 0 {
        return Err(Error::Config("pipeline needs at least one lane".into()));
    }
    run_step(model, batch, ledger, Mode::Pipeline { threaded: lanes >= 2 })
}

/// Largest F+G intermediate set of any block for this batch: the unit in
/// which memory differences between engines are measured.
pub fn max_block_footprint<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<u64> {
    let (_, records) = model.forward_full(batch)?;
    let mut best = 0;
    for (stage, record) in model.stages.iter().zip(&records.stages) {
        let mut x = record.input.clone();
        for block in &stage.blocks {
            let (next, acts) = forward_with_caches(block, &x)?;
            best = best.max(acts.bytes());
            x = next;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Vanilla,
    Reprop,
    Pipeline { threaded: bool },
}

/// What the vanilla forward keeps per stage: inputs of blocks 2..L (block 1's
/// input is the stage record) and every block's intermediates.
struct Kept<T: Scalar> {
    inputs: Vec<Coupled<T>>,
    acts: Vec<Acts<T>>,
}

fn tag(s: usize, what: &str) -> String {
    format!("s{s}.{what}")
}

fn run_step<T: Scalar>(
    model: &Model<T>,
    batch: &Batch<T>,
    ledger: &mut MemoryLedger,
    mode: Mode,
) -> Result<(GradStore<T>, StepStats)> {
    let start = Instant::now();
    ledger.reset();
    let keep = mode == Mode::Vanilla;
    let last = model.stages.len() - 1;

    // Forward.
    let first = Coupled::duplicate(model.embed(batch)?);
    ledger.alloc(tag(0, "input"), first.bytes())?;
    let mut cur = Some(first);
    let mut records: Vec<StageRecord<T>> = Vec::with_capacity(model.stages.len());
    let mut kept: Vec<Kept<T>> = Vec::new();
    for (s, stage) in model.stages.iter().enumerate() {
        let input = cur.take().expect("every stage has an input");
        let mut k = Kept { inputs: Vec::new(), acts: Vec::new() };
        let mut out: Option<Coupled<T>> = None;
        for block in &stage.blocks {
            let src = out.as_ref().unwrap_or(&input);
            let next = if keep {
                let (next, acts) = forward_with_caches(block, src)?;
                ledger.alloc(tag(s, &format!("b{}.acts", block.id)), acts.bytes())?;
                k.acts.push(acts);
                next
            } else {
                rev_forward(block, src)?
            };
            if let Some(prev) = out.replace(next) {
                if keep {
                    ledger.alloc(tag(s, &format!("b{}.input", block.id)), prev.bytes())?;
                    k.inputs.push(prev);
                }
            }
        }
        let output = out.expect("stages are non-empty");
        ledger.alloc(tag(s, "output"), output.bytes())?;
        if s < last {
            let next = model.boundary_forward(s, &output)?;
            ledger.alloc(tag(s + 1, "input"), next.bytes())?;
            cur = Some(next);
        }
        records.push(StageRecord { input, output });
        kept.push(k);
    }
    let (logits, head_cache) = model.head(&records[last].output)?;
    ledger.alloc("head", head_cache.bytes())?;
    let (loss, d_logits) = loss_and_grad_head(&logits, &batch.labels)?;

    // Backward.
    let mut grads = GradStore::new();
    let (mut d, d_head_w) = model.head_backward(&head_cache, &d_logits)?;
    ledger.alloc("head.d_out", d.bytes())?;
    ledger.free("head", head_cache.bytes())?;
    drop(head_cache);
    grads.head_w = Some(d_head_w);

    let mut lane_busy = [0u64; 2];
    let mut slots = Vec::new();
    let mut blocks_processed = 0;
    for s in (0..=last).rev() {
        let record = records.pop().expect("one record per stage");
        let stage = &model.stages[s];
        if s < last {
            let (d_out, bg) = model.boundary_backward(s, &record.output, &d)?;
            ledger.alloc(tag(s, "d_out"), d_out.bytes())?;
            ledger.free(tag(s + 1, "d_in"), d.bytes())?;
            grads.insert_boundary(s, bg)?;
            d = d_out;
        }
        d = match mode {
            Mode::Vanilla => {
                let k = kept.pop().expect("one kept set per stage");
                vanilla_stage(s, stage, record, k, d, ledger, &mut grads)?
            }
            Mode::Reprop => reprop_stage(s, stage, record, d, ledger, &mut grads)?,
            Mode::Pipeline { threaded } => {
                let out = pipeline::run_stage(s, stage, &record, d, ledger, &mut grads, threaded)?;
                lane_busy[0] += out.grad_busy_ns;
                lane_busy[1] += out.recompute_busy_ns;
                slots.push(out.slots);
                out.d_in
            }
        };
        blocks_processed += stage.blocks.len();
    }
    grads.embed_w = Some(model.embed_backward(batch, &d)?);
    ledger.free(tag(0, "d_in"), d.bytes())?;

    if ledger.live_bytes() != 0 {
        return Err(Error::Accounting(format!(
            "{} bytes still live after the step",
            ledger.live_bytes()
        )));
    }
    let wall_ns = start.elapsed().as_nanos() as u64;
    let lane_busy_ns = match mode {
        Mode::Pipeline { .. } => lane_busy.to_vec(),
        _ => vec![wall_ns],
    };
    Ok((
        grads,
        StepStats {
            loss,
            wall_ns,
            peak_activation_bytes: ledger.peak_bytes(),
            lane_busy_ns,
            blocks_processed,
            slots,
        },
    ))
}

fn vanilla_stage<T: Scalar>(
    s: usize,
    stage: &Stage<T>,
    record: StageRecord<T>,
    mut kept: Kept<T>,
    mut d: Coupled<T>,
    ledger: &mut MemoryLedger,
    grads: &mut GradStore<T>,
) -> Result<Coupled<T>> {
    ledger.free(tag(s, "output"), record.output.bytes())?;
    for (pos, block) in stage.blocks.iter().enumerate().rev() {
        let acts = kept.acts.pop().expect("one cache per block");
        let (d_in, g) = rev_vjp(block, &acts, &d)?;
        ledger.alloc(tag(s, &format!("b{}.d_in", block.id)), d_in.bytes())?;
        ledger.free(tag(s, &format!("b{}.d_out", block.id)), d.bytes())?;
        ledger.free(tag(s, &format!("b{}.acts", block.id)), acts.bytes())?;
        if pos > 0 {
            let inp = kept.inputs.pop().expect("one input per block after the first");
            ledger.free(tag(s, &format!("b{}.input", block.id)), inp.bytes())?;
        } else {
            ledger.free(tag(s, "input"), record.input.bytes())?;
        }
        grads.insert_block(block.id, g)?;
        d = d_in;
    }
    Ok(d)
}

/// Block `i > 1` is reconstructed from its output; block 1 is re-run from
/// the stored stage input.
fn reprop_stage<T: Scalar>(
    s: usize,
    stage: &Stage<T>,
    record: StageRecord<T>,
    mut d: Coupled<T>,
    ledger: &mut MemoryLedger,
    grads: &mut GradStore<T>,
) -> Result<Coupled<T>> {
    let c = record.output.bytes();
    let mut out: Option<Coupled<T>> = None;
    for (pos, block) in stage.blocks.iter().enumerate().rev() {
        let src = out.as_ref().unwrap_or(&record.output);
        let (inp, acts) = if pos > 0 {
            let (inp, acts) = recompute_from_output(block, src)?;
            (Some(inp), acts)
        } else {
            (None, forward_with_caches(block, &record.input)?.1)
        };
        ledger.alloc(tag(s, &format!("b{}.acts", block.id)), acts.bytes())?;
        if inp.is_some() {
            ledger.alloc(tag(s, &format!("b{}.input", block.id)), c)?;
        }
        let out_tag = if out.is_some() { format!("b{}.input", block.id + 1) } else { "output".into() };
        ledger.free(tag(s, &out_tag), c)?;
        if pos == 0 {
            ledger.free(tag(s, "input"), c)?;
        }
        let (d_in, g) = rev_vjp(block, &acts, &d)?;
        ledger.alloc(tag(s, &format!("b{}.d_in", block.id)), d_in.bytes())?;
        ledger.free(tag(s, &format!("b{}.d_out", block.id)), d.bytes())?;
        ledger.free(tag(s, &format!("b{}.acts", block.id)), acts.bytes())?;
        drop(acts);
        grads.insert_block(block.id, g)?;
        d = d_in;
        out = inp;
    }
    Ok(d)
}

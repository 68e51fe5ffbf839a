//! The two-lane backward pipeline as a task graph, and a discrete-event
//! simulator for its makespan.

use std::fmt;

/// One pipeline slot. Block positions are 1-based within a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub grad: Option<usize>,
    pub recompute: Option<usize>,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.grad, self.recompute) {
            (Some(g), Some(r)) => write!(f, "[G{g}‖R{r}]"),
            (Some(g), None) => write!(f, "[G{g}]"),
            (None, Some(r)) => write!(f, "[R{r}]"),
            (None, None) => f.write_str("[]"),
        }
    }
}

/// `[RL], [GL‖R(L-1)], …, [G2‖R1], [G1]`.
pub fn pipeline_slots(depth: usize) -> Vec<Slot> {
    if depth == 0 {
        return Vec::new();
    }
    let mut slots = vec![Slot { grad: None, recompute: Some(depth) }];
    for pos in (1..=depth).rev() {
        slots.push(Slot { grad: Some(pos), recompute: (pos > 1).then(|| pos - 1) });
    }
    slots
}

pub fn format_slots(slots: &[Slot]) -> String {
    slots.iter().map(Slot::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    Recompute,
    Grad,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub lane: Lane,
    pub duration: u64,
    /// Indices of tasks that must finish before this one starts.
    pub deps: Vec<usize>,
}

/// Start and finish time of every task.
///
/// Tasks on one lane run in list order; a task starts once its lane is free
/// and all its dependencies have finished. Dependencies must point backwards
/// in the list.
pub fn simulate(tasks: &[Task]) -> Vec<(u64, u64)> {
    let mut times: Vec<(u64, u64)> = Vec::with_capacity(tasks.len());
    let mut lane_free = [0u64; 2];
    for (i, t) in tasks.iter().enumerate() {
        let lane = t.lane as usize;
        let ready = t
            .deps
            .iter()
            .map(|&d| {
                assert!(d < i, "task {i} depends on later task {d}");
                times[d].1
            })
            .max()
            .unwrap_or(0);
        let start = ready.max(lane_free[lane]);
        let end = start + t.duration;
        lane_free[lane] = end;
        times.push((start, end));
    }
    times
}

pub fn makespan(tasks: &[Task]) -> u64 {
    simulate(tasks).iter().map(|&(_, e)| e).max().unwrap_or(0)
}

/// Per-block costs of one backward pass, indexed by block position − 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCosts {
    pub recompute: Vec<u64>,
    pub grad: Vec<u64>,
}

impl BlockCosts {
    pub fn uniform(depth: usize, recompute: u64, grad: u64) -> Self {
        Self { recompute: vec![recompute; depth], grad: vec![grad; depth] }
    }

    fn depth(&self) -> usize {
        assert_eq!(self.recompute.len(), self.grad.len());
        self.recompute.len()
    }
}

/// Recompute then gradient for each block in turn, on one lane.
pub fn sequential_tasks(costs: &BlockCosts) -> Vec<Task> {
    let mut tasks: Vec<Task> = Vec::new();
    for pos in (1..=costs.depth()).rev() {
        for duration in [costs.recompute[pos - 1], costs.grad[pos - 1]] {
            let deps = tasks.len().checked_sub(1).into_iter().collect();
            tasks.push(Task { lane: Lane::Grad, duration, deps });
        }
    }
    tasks
}

/// Two lanes joined by a hand-off of depth one.
///
/// `G(i)` needs `R(i)` and `G(i+1)`. `R(i)` cannot start until the result of
/// `R(i+1)` has been taken, which happens when `G(i+2)` finishes.
pub fn pipelined_tasks(costs: &BlockCosts) -> Vec<Task> {
    let depth = costs.depth();
    let mut tasks = Vec::with_capacity(2 * depth);
    // Index of R(pos) and G(pos) in `tasks`.
    let mut r_idx = vec![usize::MAX; depth + 2];
    let mut g_idx = vec![usize::MAX; depth + 2];
    let push = |tasks: &mut Vec<Task>, lane, duration, deps: Vec<usize>| {
        tasks.push(Task { lane, duration, deps: deps.into_iter().filter(|&d| d != usize::MAX).collect() });
        tasks.len() - 1
    };
    for pos in (1..=depth).rev() {
        let r_deps = if pos + 2 <= depth { vec![g_idx[pos + 2]] } else { vec![] };
        r_idx[pos] = push(&mut tasks, Lane::Recompute, costs.recompute[pos - 1], r_deps);
        if pos < depth {
            let next = pos + 1;
            let g_deps = vec![r_idx[next], g_idx[next + 1]];
            g_idx[next] = push(&mut tasks, Lane::Grad, costs.grad[next - 1], g_deps);
        }
    }
    if depth > 0 {
        g_idx[1] = push(&mut tasks, Lane::Grad, costs.grad[0], vec![r_idx[1], g_idx[2]]);
    }
    tasks
}

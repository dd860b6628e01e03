//! Tabular discounted MDPs: construction, exact solving, trajectory sampling
//! and trajectory probabilities.
//!
//! Transitions are stored sparsely, one outcome list per `(state, action)`
//! pair. Terminal states are absorbing: every action self-loops with
//! probability one and reward zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StateId = usize;
pub type ActionId = usize;

/// Probability mass tolerance used by every validity check.
pub const PROB_TOL: f64 = 1e-9;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 100_000;
pub const ENUMERATION_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub next: StateId,
    pub prob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    /// Indexed by `state * n_actions + action`.
    rows: Vec<Vec<Outcome>>,
    discount: f64,
    initial: Vec<f64>,
    terminal: Vec<bool>,
}

impl Mdp {
    /// Builds and validates an MDP. `rows` is indexed by
    /// `state * n_actions + action`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        rows: Vec<Vec<Outcome>>,
        discount: f64,
        initial: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let mdp = Mdp {
            n_states,
            n_actions,
            rows,
            discount,
            initial,
            terminal,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidMdp(msg));
        if self.n_states == 0 || self.n_actions == 0 {
            return bad("empty state or action set".into());
        }
        if self.rows.len() != self.n_states * self.n_actions {
            return bad(format!(
                "expected {} transition rows, found {}",
                self.n_states * self.n_actions,
                self.rows.len()
            ));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount {} outside [0, 1)", self.discount));
        }
        if self.initial.len() != self.n_states || self.terminal.len() != self.n_states {
            return bad("initial distribution or terminal mask has wrong length".into());
        }
        check_distribution(&self.initial).map_err(|m| Error::InvalidMdp(format!("initial distribution {m}")))?;
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(s, a);
                let mut total = 0.0;
                for o in row {
                    if o.next >= self.n_states {
                        return bad(format!("T({s},{a}) points at unknown state {}", o.next));
                    }
                    if !(o.prob >= 0.0) || !o.reward.is_finite() {
                        return bad(format!("T({s},{a},{}) has invalid entry {o:?}", o.next));
                    }
                    total += o.prob;
                }
                if (total - 1.0).abs() > PROB_TOL {
                    return bad(format!("T({s},{a},·) sums to {total}"));
                }
                if self.terminal[s] {
                    let absorbing = row
                        .iter()
                        .filter(|o| o.prob > 0.0)
                        .all(|o| o.next == s && o.reward == 0.0);
                    if !absorbing {
                        return bad(format!("terminal state {s} is not absorbing with zero reward"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn row(&self, s: StateId, a: ActionId) -> &[Outcome] {
        &self.rows[s * self.n_actions + a]
    }

    pub(crate) fn rows(&self) -> &[Vec<Outcome>] {
        &self.rows
    }

    /// `T(s, a, s')`, summing duplicate entries.
    pub fn prob(&self, s: StateId, a: ActionId, next: StateId) -> f64 {
        self.row(s, a).iter().filter(|o| o.next == next).map(|o| o.prob).sum()
    }

    /// `R(s, a, s')`; zero for pairs without an explicit entry.
    pub fn reward(&self, s: StateId, a: ActionId, next: StateId) -> f64 {
        self.row(s, a).iter().find(|o| o.next == next).map_or(0.0, |o| o.reward)
    }

    /// Expected one-step backup `Σ T(s,a,s')(R + γ V(s'))`.
    pub fn backup(&self, s: StateId, a: ActionId, values: &[f64]) -> f64 {
        self.row(s, a)
            .iter()
            .map(|o| o.prob * (o.reward + self.discount * values[o.next]))
            .sum()
    }
}

fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if p.iter().any(|&x| !(x >= 0.0)) {
        return Err("has a negative or NaN entry".into());
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

/// Solved action values. `values[s] == max_a q(s, a)` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_actions: usize,
    q: Vec<f64>,
    values: Vec<f64>,
}

impl QTable {
    /// Builds a table from per-state action values; `V` is the row maximum.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n_actions = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_actions), "ragged Q rows");
        let values = rows
            .iter()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        QTable {
            n_actions,
            q: rows.into_iter().flatten().collect(),
            values,
        }
    }

    pub fn n_states(&self) -> usize {
        self.values.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn q(&self, s: StateId, a: ActionId) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn actions(&self, s: StateId) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn value(&self, s: StateId) -> f64 {
        self.values[s]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Synchronous value iteration. Stops once `max_s |V_{k+1}(s) - V_k(s)| < tol`.
pub fn value_iteration(mdp: &Mdp, tol: f64, max_iter: usize) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let n = mdp.n_states();
    let mut values = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        residual = 0.0;
        for s in 0..n {
            next[s] = if mdp.is_terminal(s) {
                0.0
            } else {
                (0..mdp.n_actions())
                    .map(|a| mdp.backup(s, a, &values))
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            residual = f64::max(residual, (next[s] - values[s]).abs());
        }
        std::mem::swap(&mut values, &mut next);
        if residual < tol {
            let rows = (0..n)
                .map(|s| {
                    (0..mdp.n_actions())
                        .map(|a| {
                            if mdp.is_terminal(s) {
                                0.0
                            } else {
                                mdp.backup(s, a, &values)
                            }
                        })
                        .collect()
                })
                .collect();
            return Ok(QTable::from_rows(rows));
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual,
    })
}

pub fn solve(mdp: &Mdp) -> Result<QTable> {
    solve_with(mdp, SolveOptions::default())
}

pub fn solve_with(mdp: &Mdp, opts: SolveOptions) -> Result<QTable> {
    value_iteration(mdp, opts.tol, opts.max_iter)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
    HighestIndex,
}

/// Deterministic stationary policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy(Vec<ActionId>);

impl Policy {
    pub fn new(actions: Vec<ActionId>) -> Self {
        Policy(actions)
    }

    pub fn action(&self, s: StateId) -> ActionId {
        self.0[s]
    }

    pub fn actions(&self) -> &[ActionId] {
        &self.0
    }
}

pub fn greedy_policy(q: &QTable, tie_break: TieBreak) -> Policy {
    let actions = (0..q.n_states())
        .map(|s| {
            let row = q.actions(s);
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut hits = row.iter().enumerate().filter(|(_, &v)| v == best).map(|(a, _)| a);
            match tie_break {
                TieBreak::LowestIndex => hits.next().unwrap_or(0),
                TieBreak::HighestIndex => hits.next_back().unwrap_or(0),
            }
        })
        .collect();
    Policy(actions)
}

/// `{ a : Q(s,a) >= max_a' Q(s,a') - eps }`, in ascending action order.
pub fn optimal_action_set(q: &QTable, s: StateId, eps: f64) -> Vec<ActionId> {
    let best = q.value(s);
    q.actions(s)
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= best - eps)
        .map(|(a, _)| a)
        .collect()
}

pub fn is_optimal_action(q: &QTable, s: StateId, a: ActionId, eps: f64) -> bool {
    q.q(s, a) >= q.value(s) - eps
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Step {
    pub state: StateId,
    pub action: ActionId,
    pub next: StateId,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: StateId,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn empty(start: StateId) -> Self {
        Trajectory {
            start,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last_state(&self) -> StateId {
        self.steps.last().map_or(self.start, |s| s.next)
    }

    /// Each step must start where the previous one ended.
    pub fn is_chain_consistent(&self) -> bool {
        let mut at = self.start;
        for step in &self.steps {
            if step.state != at {
                return false;
            }
            at = step.next;
        }
        true
    }
}

pub fn sample_trajectory(mdp: &Mdp, policy: &Policy, start: StateId, max_len: usize, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_trajectory_with(mdp, policy, start, max_len, &mut rng)
}

pub fn sample_trajectory_with<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &Policy,
    start: StateId,
    max_len: usize,
    rng: &mut R,
) -> Trajectory {
    let mut traj = Trajectory::empty(start);
    let mut at = start;
    while traj.len() < max_len && !mdp.is_terminal(at) {
        let action = policy.action(at);
        let next = sample_outcome(mdp.row(at, action), rng);
        traj.steps.push(Step {
            state: at,
            action,
            next,
        });
        at = next;
    }
    traj
}

fn sample_outcome<R: Rng + ?Sized>(row: &[Outcome], rng: &mut R) -> StateId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut fallback = row[0].next;
    for o in row {
        if o.prob <= 0.0 {
            continue;
        }
        fallback = o.next;
        acc += o.prob;
        if u < acc {
            return o.next;
        }
    }
    fallback
}

/// Draws a state from a categorical distribution.
pub fn sample_categorical<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut fallback = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        fallback = i;
        acc += p;
        if u < acc {
            return i;
        }
    }
    fallback
}

/// Follows the policy, always taking the most probable outcome (lowest
/// state index on ties).
pub fn most_likely_trajectory(mdp: &Mdp, policy: &Policy, start: StateId, max_len: usize) -> Trajectory {
    let mut traj = Trajectory::empty(start);
    let mut at = start;
    while traj.len() < max_len && !mdp.is_terminal(at) {
        let action = policy.action(at);
        let mut best: Option<Outcome> = None;
        for o in mdp.row(at, action) {
            let better = match best {
                None => true,
                Some(b) => o.prob > b.prob || (o.prob == b.prob && o.next < b.next),
            };
            if better {
                best = Some(*o);
            }
        }
        let next = best.map_or(at, |o| o.next);
        traj.steps.push(Step {
            state: at,
            action,
            next,
        });
        at = next;
    }
    traj
}

/// `P(τ | π)`: product of `T(s_t, a_t, s_{t+1})`, zero whenever an action
/// disagrees with the policy. The start-state probability is not included.
pub fn trajectory_probability(mdp: &Mdp, policy: &Policy, traj: &Trajectory) -> f64 {
    let mut p = 1.0;
    for step in &traj.steps {
        if policy.action(step.state) != step.action {
            return 0.0;
        }
        p *= mdp.prob(step.state, step.action, step.next);
        if p == 0.0 {
            return 0.0;
        }
    }
    p
}

/// Every trajectory of length `max_len` (or ending early at a terminal
/// state) reachable under the policy, with its probability. Zero-probability
/// outcomes are skipped.
pub fn enumerate_trajectories(
    mdp: &Mdp,
    policy: &Policy,
    start: StateId,
    max_len: usize,
) -> Result<Vec<(Trajectory, f64)>> {
    enumerate_trajectories_with_budget(mdp, policy, start, max_len, ENUMERATION_BUDGET)
}

pub fn enumerate_trajectories_with_budget(
    mdp: &Mdp,
    policy: &Policy,
    start: StateId,
    max_len: usize,
    budget: usize,
) -> Result<Vec<(Trajectory, f64)>> {
    let mut out = Vec::new();
    let mut stack = vec![(Trajectory::empty(start), 1.0)];
    while let Some((traj, p)) = stack.pop() {
        let at = traj.last_state();
        if traj.len() == max_len || mdp.is_terminal(at) {
            if out.len() == budget {
                return Err(Error::EnumerationBudget { budget });
            }
            out.push((traj, p));
            continue;
        }
        let action = policy.action(at);
        // reversed so the lowest-index outcome is expanded first
        for o in mdp.row(at, action).iter().rev() {
            if o.prob <= 0.0 {
                continue;
            }
            let mut t = traj.clone();
            t.steps.push(Step {
                state: at,
                action,
                next: o.next,
            });
            stack.push((t, p * o.prob));
        }
    }
    Ok(out)
}

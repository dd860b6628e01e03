//! Independent oracles shared by the integration tests. Nothing here calls
//! the solver, the reconciliation search or the checks under test.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use explicable::domains::{build_mdp, DomainSpec, ParamAssignment};
use explicable::mdp::{Mdp, Outcome, Trajectory};
use rand::Rng;

/// Random MDP with at most `max_states` states and `max_actions` actions.
/// Terminal states are absorbing with zero reward.
pub fn random_mdp<R: Rng>(rng: &mut R, max_states: usize, max_actions: usize) -> Mdp {
    let n = rng.gen_range(1..=max_states);
    let m = rng.gen_range(1..=max_actions);
    let terminal: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
    random_mdp_on(rng, n, m, &terminal)
}

/// Random MDP over a fixed state/action space and terminal mask.
pub fn random_mdp_on<R: Rng>(rng: &mut R, n: usize, m: usize, terminal: &[bool]) -> Mdp {
    let mut rows = Vec::with_capacity(n * m);
    for (s, &absorbing) in terminal.iter().enumerate() {
        for _ in 0..m {
            if absorbing {
                rows.push(vec![Outcome {
                    next: s,
                    prob: 1.0,
                    reward: 0.0,
                }]);
                continue;
            }
            let support: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.6)).collect();
            let support = if support.is_empty() {
                vec![rng.gen_range(0..n)]
            } else {
                support
            };
            let weights: Vec<f64> = support.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            rows.push(
                support
                    .iter()
                    .zip(&weights)
                    .map(|(&next, w)| Outcome {
                        next,
                        prob: w / total,
                        reward: rng.gen_range(-1.0..1.0),
                    })
                    .collect(),
            );
        }
    }
    let discount = rng.gen_range(0.5..0.95);
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let initial = weights.iter().map(|w| w / total).collect();
    Mdp::new(n, m, rows, discount, initial, terminal.to_vec()).unwrap()
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            let (upper, lower) = a.split_at_mut(row);
            for (x, y) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                *x -= f * y;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let tail: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - tail) / a[i][i];
    }
    x
}

/// Exact value of a deterministic policy: `(I - γ P_π) v = r_π`, with
/// terminal states pinned to zero.
pub fn policy_value(mdp: &Mdp, actions: &[usize]) -> Vec<f64> {
    let n = mdp.n_states();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        a[s][s] = 1.0;
        if mdp.is_terminal(s) {
            continue;
        }
        for o in mdp.row(s, actions[s]) {
            a[s][o.next] -= mdp.discount() * o.prob;
            b[s] += o.prob * o.reward;
        }
    }
    solve_linear(a, b)
}

/// Optimal values by evaluating every deterministic policy. Also returns
/// one policy attaining them in every state.
pub fn enumerate_optimum(mdp: &Mdp) -> (Vec<f64>, Vec<usize>) {
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let total = m.pow(n as u32);
    let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
    for code in 0..total {
        let actions: Vec<usize> = (0..n).map(|s| code / m.pow(s as u32) % m).collect();
        let v = policy_value(mdp, &actions);
        let better = match &best {
            None => true,
            Some((bv, _)) => v.iter().sum::<f64>() > bv.iter().sum::<f64>(),
        };
        if better {
            best = Some((v, actions));
        }
    }
    best.unwrap()
}

/// Action values by in-place (Gauss-Seidel) value iteration, run far past
/// any tolerance the library uses.
pub fn oracle_q(mdp: &Mdp) -> Vec<Vec<f64>> {
    let n = mdp.n_states();
    let m = mdp.n_actions();
    let gamma = mdp.discount();
    let q_of = |v: &[f64], s: usize, a: usize| -> f64 {
        mdp.row(s, a)
            .iter()
            .map(|o| o.prob * (o.reward + gamma * v[o.next]))
            .sum()
    };
    let mut v = vec![0.0; n];
    loop {
        let mut residual: f64 = 0.0;
        for s in 0..n {
            if mdp.is_terminal(s) {
                continue;
            }
            let new = (0..m).map(|a| q_of(&v, s, a)).fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((new - v[s]).abs());
            v[s] = new;
        }
        if residual < 1e-12 {
            break;
        }
    }
    (0..n)
        .map(|s| {
            (0..m)
                .map(|a| if mdp.is_terminal(s) { 0.0 } else { q_of(&v, s, a) })
                .collect()
        })
        .collect()
}

pub fn oracle_optimal(q: &[Vec<f64>], s: usize, a: usize, eps: f64) -> bool {
    let best = q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    q[s][a] >= best - eps
}

/// A model under an assignment, solved by the oracle.
pub struct OracleModel {
    pub mdp: Mdp,
    pub q: Vec<Vec<f64>>,
}

impl OracleModel {
    pub fn new(spec: &DomainSpec, params: &ParamAssignment) -> Self {
        let mdp = build_mdp(spec, params).unwrap();
        let q = oracle_q(&mdp);
        OracleModel { mdp, q }
    }

    /// Per-step labels: 1 when the action is optimal and the observed
    /// outcome has probability above `delta`.
    pub fn labels(&self, trace: &Trajectory, delta: f64, eps: f64) -> Vec<u8> {
        trace
            .steps
            .iter()
            .map(|t| {
                let ok =
                    oracle_optimal(&self.q, t.state, t.action, eps) && self.mdp.prob(t.state, t.action, t.next) > delta;
                u8::from(ok)
            })
            .collect()
    }

    /// Whether the traces are explicable as whole behavior: every action
    /// optimal, one action per state, and probability above `delta`.
    pub fn behavior_complete(&self, traces: &[Trajectory], delta: f64, eps: f64) -> bool {
        traces.iter().all(|t| {
            let mut chosen = HashMap::new();
            let mut p = 1.0;
            for step in &t.steps {
                if !oracle_optimal(&self.q, step.state, step.action, eps) {
                    return false;
                }
                if *chosen.entry(step.state).or_insert(step.action) != step.action {
                    return false;
                }
                p *= self.mdp.prob(step.state, step.action, step.next);
            }
            p > delta
        })
    }

    /// Whether `robot_actions` is optimal in every non-terminal state.
    pub fn policy_complete(&self, robot_actions: &[usize], eps: f64) -> bool {
        (0..self.mdp.n_states())
            .filter(|&s| !self.mdp.is_terminal(s))
            .all(|s| oracle_optimal(&self.q, s, robot_actions[s], eps))
    }
}

/// `human` with every message in `subset` applied, written out directly.
pub fn told(spec: &DomainSpec, human: &ParamAssignment, subset: &[usize]) -> ParamAssignment {
    let mut out = human.clone();
    for &i in subset {
        for p in &spec.messages()[i].params {
            out.set(p.param_id.clone(), p.value.clone());
        }
    }
    out
}

/// Brute force over every message subset: the cheapest subset for which
/// `complete` holds, ties broken by the sorted id list.
pub fn brute_force_minimum(
    spec: &DomainSpec,
    human: &ParamAssignment,
    complete: impl Fn(&OracleModel) -> bool,
) -> Option<(Vec<String>, f64)> {
    let n = spec.messages().len();
    let mut solved: BTreeMap<String, bool> = BTreeMap::new();
    let mut best: Option<(Vec<String>, f64)> = None;
    for mask in 0u32..(1 << n) {
        let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let params = told(spec, human, &subset);
        let key = serde_json::to_string(&params).unwrap();
        let ok = *solved
            .entry(key)
            .or_insert_with(|| complete(&OracleModel::new(spec, &params)));
        if !ok {
            continue;
        }
        let cost: f64 = subset.iter().map(|&i| spec.messages()[i].cost).sum();
        let mut ids: Vec<String> = subset.iter().map(|&i| spec.messages()[i].id.clone()).collect();
        ids.sort();
        let better = match &best {
            None => true,
            Some((bids, bcost)) => cost < *bcost - 1e-12 || ((cost - bcost).abs() <= 1e-12 && ids < *bids),
        };
        if better {
            best = Some((ids, cost));
        }
    }
    best
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Compares two models entry by entry within `tol`.
pub fn models_close(a: &Mdp, b: &Mdp, tol: f64) -> bool {
    if a.n_states() != b.n_states() || a.n_actions() != b.n_actions() {
        return false;
    }
    if (a.discount() - b.discount()).abs() > tol || max_abs_diff(a.initial(), b.initial()) > tol {
        return false;
    }
    for s in 0..a.n_states() {
        for act in 0..a.n_actions() {
            for n in 0..a.n_states() {
                if (a.prob(s, act, n) - b.prob(s, act, n)).abs() > tol {
                    return false;
                }
                let weighted = a.prob(s, act, n) > 0.0 || b.prob(s, act, n) > 0.0;
                if weighted && (a.reward(s, act, n) - b.reward(s, act, n)).abs() > tol {
                    return false;
                }
            }
        }
    }
    true
}

//! Subset search strategies shared by minimal-explanation search and
//! message selection.
//!
//! Strategies are trait objects looked up by name in a [`SearchRegistry`],
//! so the CLI and experiment configs can pick one at runtime.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Exhaustive search enumerates `2^n` subsets; refuse beyond this.
pub const EXHAUSTIVE_LIMIT: usize = 24;

/// Subsets are sorted candidate indices.
pub type Subset = Vec<usize>;

/// Minimize `score(subset)` over all subsets of the candidates.
pub struct ObjectiveProblem<'a> {
    pub ids: &'a [String],
    pub score: &'a (dyn Fn(&[usize]) -> Result<f64> + Sync),
}

/// Find the cheapest subset with zero violations.
pub struct FeasibilityProblem<'a> {
    pub ids: &'a [String],
    pub costs: &'a [f64],
    pub violations: &'a (dyn Fn(&[usize]) -> Result<usize> + Sync),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Best subset found; `None` when no feasible subset exists.
    pub best: Option<Subset>,
    /// Objective (or cost) of `best`.
    pub value: f64,
    /// When infeasible: the subset with the fewest violations.
    pub best_effort: Option<(Subset, usize)>,
    pub evaluated: usize,
    /// Whether the result is a proven global optimum.
    pub optimal: bool,
}

pub trait SubsetSearch: Send + Sync {
    fn name(&self) -> &'static str;

    fn minimize(&self, problem: &ObjectiveProblem<'_>) -> Result<SearchOutcome>;

    fn cheapest_feasible(&self, problem: &FeasibilityProblem<'_>) -> Result<SearchOutcome>;
}

pub fn subset_cost(costs: &[f64], subset: &[usize]) -> f64 {
    subset.iter().map(|&i| costs[i]).sum()
}

fn sorted_ids<'a>(ids: &'a [String], subset: &[usize]) -> Vec<&'a str> {
    let mut v: Vec<&str> = subset.iter().map(|&i| ids[i].as_str()).collect();
    v.sort_unstable();
    v
}

fn lexicographic(ids: &[String], a: &[usize], b: &[usize]) -> Ordering {
    sorted_ids(ids, a).cmp(&sorted_ids(ids, b))
}

fn mask_to_subset(mask: u32, n: usize) -> Subset {
    (0..n).filter(|i| mask >> i & 1 == 1).collect()
}

/// Enumerates every subset.
#[derive(Debug, Clone, Copy, Default)]
pub struct Exhaustive;

impl SubsetSearch for Exhaustive {
    fn name(&self) -> &'static str {
        "exhaustive"
    }

    /// Global minimum; ties go to fewer candidates, then the
    /// lexicographically smallest id set.
    fn minimize(&self, p: &ObjectiveProblem<'_>) -> Result<SearchOutcome> {
        let n = p.ids.len();
        if n > EXHAUSTIVE_LIMIT {
            return Err(Error::SearchBudget(n, EXHAUSTIVE_LIMIT));
        }
        let scored = (0..1u32 << n)
            .into_par_iter()
            .map(|mask| {
                let subset = mask_to_subset(mask, n);
                (p.score)(&subset).map(|v| (v, subset))
            })
            .collect::<Result<Vec<_>>>()?;
        let evaluated = scored.len();
        let (value, best) = scored
            .into_iter()
            .min_by(|(va, a), (vb, b)| {
                va.total_cmp(vb)
                    .then(a.len().cmp(&b.len()))
                    .then_with(|| lexicographic(p.ids, a, b))
            })
            .expect("at least the empty subset");
        Ok(SearchOutcome {
            best: Some(best),
            value,
            best_effort: None,
            evaluated,
            optimal: true,
        })
    }

    /// Visits subsets in (cost, lexicographic) order and stops at the first
    /// feasible one. Feasibility is not assumed monotone, so nothing is
    /// pruned by inclusion.
    fn cheapest_feasible(&self, p: &FeasibilityProblem<'_>) -> Result<SearchOutcome> {
        let n = p.ids.len();
        if n > EXHAUSTIVE_LIMIT {
            return Err(Error::SearchBudget(n, EXHAUSTIVE_LIMIT));
        }
        let mut order: Vec<(f64, Subset)> = (0..1u32 << n)
            .map(|mask| {
                let s = mask_to_subset(mask, n);
                (subset_cost(p.costs, &s), s)
            })
            .collect();
        order.sort_by(|(ca, a), (cb, b)| ca.total_cmp(cb).then_with(|| lexicographic(p.ids, a, b)));

        const BATCH: usize = 32;
        let mut evaluated = 0;
        let mut best_effort: Option<(Subset, usize, f64)> = None;
        for chunk in order.chunks(BATCH) {
            let results = chunk
                .par_iter()
                .map(|(_, s)| (p.violations)(s))
                .collect::<Result<Vec<usize>>>()?;
            for ((cost, subset), v) in chunk.iter().zip(results) {
                evaluated += 1;
                if v == 0 {
                    return Ok(SearchOutcome {
                        best: Some(subset.clone()),
                        value: *cost,
                        best_effort: None,
                        evaluated,
                        optimal: true,
                    });
                }
                if best_effort.as_ref().is_none_or(|(_, bv, _)| v < *bv) {
                    best_effort = Some((subset.clone(), v, *cost));
                }
            }
        }
        Ok(SearchOutcome {
            best: None,
            value: f64::INFINITY,
            best_effort: best_effort.map(|(s, v, _)| (s, v)),
            evaluated,
            optimal: true,
        })
    }
}

/// Forward selection for objectives, backward elimination for
/// feasibility. Results are local optima.
#[derive(Debug, Clone, Copy, Default)]
pub struct Greedy;

impl SubsetSearch for Greedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    /// Adds the single candidate that lowers the objective most; stops when
    /// no addition lowers it.
    fn minimize(&self, p: &ObjectiveProblem<'_>) -> Result<SearchOutcome> {
        let n = p.ids.len();
        let mut current: Subset = Vec::new();
        let mut value = (p.score)(&current)?;
        let mut evaluated = 1;
        loop {
            let mut step: Option<(f64, Subset)> = None;
            for i in (0..n).filter(|i| !current.contains(i)) {
                let mut cand = current.clone();
                cand.push(i);
                cand.sort_unstable();
                let v = (p.score)(&cand)?;
                evaluated += 1;
                let better = match &step {
                    None => true,
                    Some((bv, b)) => v < *bv || (v == *bv && lexicographic(p.ids, &cand, b) == Ordering::Less),
                };
                if better {
                    step = Some((v, cand));
                }
            }
            match step {
                Some((v, cand)) if v < value => {
                    value = v;
                    current = cand;
                }
                _ => break,
            }
        }
        Ok(SearchOutcome {
            best: Some(current),
            value,
            best_effort: None,
            evaluated,
            optimal: false,
        })
    }

    /// Starts from the full set and drops candidates, most expensive first,
    /// while the set stays feasible. The result has no removable element.
    fn cheapest_feasible(&self, p: &FeasibilityProblem<'_>) -> Result<SearchOutcome> {
        let n = p.ids.len();
        let mut current: Subset = (0..n).collect();
        let v = (p.violations)(&current)?;
        let mut evaluated = 1;
        if v > 0 {
            return Ok(SearchOutcome {
                best: None,
                value: f64::INFINITY,
                best_effort: Some((current, v)),
                evaluated,
                optimal: false,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| p.costs[b].total_cmp(&p.costs[a]).then_with(|| p.ids[b].cmp(&p.ids[a])));
        loop {
            let mut removed = false;
            for &i in &order {
                if !current.contains(&i) {
                    continue;
                }
                let cand: Subset = current.iter().copied().filter(|&j| j != i).collect();
                evaluated += 1;
                if (p.violations)(&cand)? == 0 {
                    current = cand;
                    removed = true;
                }
            }
            if !removed {
                break;
            }
        }
        Ok(SearchOutcome {
            value: subset_cost(p.costs, &current),
            best: Some(current),
            best_effort: None,
            evaluated,
            optimal: false,
        })
    }
}

/// Named search strategies.
#[derive(Clone)]
pub struct SearchRegistry {
    entries: BTreeMap<&'static str, Arc<dyn SubsetSearch>>,
}

impl Default for SearchRegistry {
    fn default() -> Self {
        let mut r = SearchRegistry {
            entries: BTreeMap::new(),
        };
        r.register(Arc::new(Exhaustive));
        r.register(Arc::new(Greedy));
        r
    }
}

impl SearchRegistry {
    pub fn register(&mut self, strategy: Arc<dyn SubsetSearch>) {
        self.entries.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SubsetSearch>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: "search strategy",
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

/// Looks a strategy up in the default registry.
pub fn strategy(name: &str) -> Result<Arc<dyn SubsetSearch>> {
    SearchRegistry::default().get(name)
}

//! Message selection against a learned labeling tree.
//!
//! The objective for a subset `M` of messages over a trace is
//! `cost(M) + α · Σ (1 − L̂(t, M))`, summed over the trace's transitions
//! (and over traces when several are given).

use serde::{Deserialize, Serialize};

use crate::domains::DomainSpec;
use crate::error::{Error, Result};
use crate::learner::{encode_features, DecisionTree};
use crate::mdp::Trajectory;
use crate::reconciliation::{cost, Message};
use crate::search::{ObjectiveProblem, SubsetSearch};
use crate::sim_user::MessageMask;

pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationResult {
    pub messages: Vec<String>,
    pub texts: Vec<String>,
    pub objective: f64,
    pub cost: f64,
    /// `α` times the number of transitions predicted inexplicable.
    pub penalty: f64,
    pub alpha: f64,
    /// Predicted labels under the chosen subset, per trace and step.
    pub predicted: Vec<Vec<u8>>,
    pub mode: String,
    pub evaluated: usize,
    pub optimal: bool,
}

fn check(spec: &DomainSpec, tree: &DecisionTree, alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("α must be a non-negative number, got {alpha}")));
    }
    if tree.schema.domain != spec.name() || tree.schema.catalog.len() != spec.messages().len() {
        return Err(Error::SchemaMismatch(format!(
            "tree trained for `{}` with {} messages",
            tree.schema.domain,
            tree.schema.catalog.len()
        )));
    }
    let ids: Vec<&str> = spec.messages().iter().map(|m| m.id.as_str()).collect();
    if tree.schema.catalog != ids {
        return Err(Error::SchemaMismatch("tree catalog differs from the domain's".into()));
    }
    tree.check_schema(&tree.schema)
}

pub fn predict_trace(
    spec: &DomainSpec,
    tree: &DecisionTree,
    trace: &Trajectory,
    mask: &MessageMask,
) -> Result<Vec<u8>> {
    trace
        .steps
        .iter()
        .map(|&t| tree.predict(&encode_features(spec, &tree.schema, t, mask)?))
        .collect()
}

/// Objective of one message subset over the traces.
pub fn objective(
    spec: &DomainSpec,
    tree: &DecisionTree,
    traces: &[Trajectory],
    mask: &MessageMask,
    alpha: f64,
) -> Result<f64> {
    check(spec, tree, alpha)?;
    score(spec, tree, traces, mask, alpha)
}

fn score(spec: &DomainSpec, tree: &DecisionTree, traces: &[Trajectory], mask: &MessageMask, alpha: f64) -> Result<f64> {
    let mut inexplicable = 0usize;
    for t in traces {
        inexplicable += predict_trace(spec, tree, t, mask)?.iter().filter(|&&l| l == 0).count();
    }
    Ok(cost(mask.messages(spec.messages())) + alpha * inexplicable as f64)
}

/// Minimizes the objective with the given search strategy.
pub fn select_messages(
    spec: &DomainSpec,
    tree: &DecisionTree,
    traces: &[Trajectory],
    alpha: f64,
    search: &dyn SubsetSearch,
) -> Result<ExplanationResult> {
    check(spec, tree, alpha)?;
    let catalog: &[Message] = spec.messages();
    let ids: Vec<String> = catalog.iter().map(|m| m.id.clone()).collect();
    let width = catalog.len();
    let f = |subset: &[usize]| score(spec, tree, traces, &MessageMask::from_indices(width, subset), alpha);
    let outcome = search.minimize(&ObjectiveProblem { ids: &ids, score: &f })?;
    let best = outcome.best.expect("minimize always returns a subset");
    let mask = MessageMask::from_indices(width, &best);
    let chosen = mask.messages(catalog);
    let predicted = traces
        .iter()
        .map(|t| predict_trace(spec, tree, t, &mask))
        .collect::<Result<Vec<_>>>()?;
    let c = cost(chosen.iter().copied());
    let mut named: Vec<&Message> = chosen;
    named.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(ExplanationResult {
        messages: named.iter().map(|m| m.id.clone()).collect(),
        texts: named.iter().map(|m| m.text.clone()).collect(),
        objective: outcome.value,
        cost: c,
        penalty: outcome.value - c,
        alpha,
        predicted,
        mode: search.name().to_string(),
        evaluated: outcome.evaluated,
        optimal: outcome.optimal,
    })
}

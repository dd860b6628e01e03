//! Explanation as model reconciliation.
//!
//! A human model and a robot model are parameter assignments over the same
//! domain. Explaining means overwriting some of the human's parameters with
//! the robot's values ([`reconcile`]). A parameter subset is a complete
//! policy explanation when the robot's optimal policy is optimal in the
//! reconciled model, and a complete behavior explanation when every observed
//! trace is sampleable (probability above `δ`) by some optimal deterministic
//! policy of the reconciled model.

pub mod theta;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::domains::{build_mdp, DomainSpec, ParamAssignment, ParamId, ParamValue};
use crate::error::{Error, Result};
use crate::mdp::{greedy_policy, is_optimal_action, solve, Mdp, Policy, QTable, StateId, TieBreak, Trajectory};
use crate::search::{FeasibilityProblem, SubsetSearch};

pub const DEFAULT_EPS_OPT: f64 = 1e-6;
pub const DEFAULT_DELTA: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageParam {
    pub param_id: ParamId,
    pub value: ParamValue,
}

/// An explanatory utterance: the parameter values it communicates and what
/// it costs to say.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    pub id: String,
    pub text: String,
    pub params: Vec<MessageParam>,
    #[serde(default = "unit_cost")]
    pub cost: f64,
}

fn unit_cost() -> f64 {
    1.0
}

impl Message {
    pub fn validate(&self) -> Result<()> {
        if self.params.is_empty() {
            return Err(Error::InvalidLayout(format!(
                "message `{}` communicates no parameters",
                self.id
            )));
        }
        if !(self.cost >= 0.0) || !self.cost.is_finite() {
            return Err(Error::InvalidLayout(format!(
                "message `{}` has invalid cost {}",
                self.id, self.cost
            )));
        }
        Ok(())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.iter().map(|p| &p.param_id)
    }
}

/// Union of the parameter values carried by the messages.
pub fn message_params<'a>(msgs: impl IntoIterator<Item = &'a Message>) -> Result<ParamAssignment> {
    let mut out = ParamAssignment::default();
    for m in msgs {
        for p in &m.params {
            match out.get(p.param_id.as_str()) {
                Some(v) if *v != p.value => return Err(Error::ConflictingMessages(p.param_id.to_string())),
                _ => {
                    out.set(p.param_id.clone(), p.value.clone());
                }
            }
        }
    }
    Ok(out)
}

/// Additive communication cost; the empty set costs nothing.
pub fn cost<'a>(msgs: impl IntoIterator<Item = &'a Message>) -> f64 {
    msgs.into_iter().map(|m| m.cost).sum()
}

/// `human` with every parameter in `subset` replaced by the robot's value.
pub fn reconcile<'a>(
    human: &ParamAssignment,
    robot: &ParamAssignment,
    subset: impl IntoIterator<Item = &'a ParamId>,
) -> Result<ParamAssignment> {
    let mut out = human.clone();
    for id in subset {
        let value = robot
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownParam(id.to_string()))?;
        if !human.contains(id.as_str()) {
            return Err(Error::UnknownParam(id.to_string()));
        }
        out.set(id.clone(), value.clone());
    }
    Ok(out)
}

/// `human` updated with the values the messages communicate.
pub fn apply_messages<'a>(
    human: &ParamAssignment,
    msgs: impl IntoIterator<Item = &'a Message>,
) -> Result<ParamAssignment> {
    let told = message_params(msgs)?;
    let mut out = human.clone();
    for (id, v) in told.iter() {
        if !human.contains(id.as_str()) {
            return Err(Error::UnknownParam(id.to_string()));
        }
        out.set(id.clone(), v.clone());
    }
    Ok(out)
}

/// A model built and solved under some assignment.
#[derive(Debug, Clone)]
pub struct SolvedModel {
    pub params: ParamAssignment,
    pub mdp: Mdp,
    pub q: QTable,
}

impl SolvedModel {
    pub fn new(spec: &DomainSpec, params: ParamAssignment) -> Result<Self> {
        let mdp = build_mdp(spec, &params)?;
        let q = solve(&mdp)?;
        Ok(SolvedModel { params, mdp, q })
    }

    pub fn policy(&self) -> Policy {
        greedy_policy(&self.q, TieBreak::LowestIndex)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    Policy,
    Behavior,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyCheck {
    pub complete: bool,
    /// Non-terminal states where the robot's action is not optimal in the
    /// reconciled model.
    pub violations: Vec<StateId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The action is not optimal in the reconciled model.
    NotOptimal,
    /// A state recurs with a different action; no deterministic policy
    /// produces the trace.
    Inconsistent,
    /// The trace probability under the reconciled model is at most `δ`.
    Probability,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFailure {
    /// Step index; `None` for whole-trace failures.
    pub step: Option<usize>,
    pub kind: FailureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDiagnosis {
    pub trace: usize,
    pub explicable: bool,
    pub probability: f64,
    pub failures: Vec<StepFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorCheck {
    pub complete: bool,
    pub traces: Vec<TraceDiagnosis>,
}

impl BehaviorCheck {
    pub fn violation_count(&self) -> usize {
        self.traces.iter().map(|t| t.failures.len()).sum()
    }
}

/// Thresholds shared by both checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckParams {
    pub delta: f64,
    pub eps_opt: f64,
}

impl Default for CheckParams {
    fn default() -> Self {
        CheckParams {
            delta: DEFAULT_DELTA,
            eps_opt: DEFAULT_EPS_OPT,
        }
    }
}

impl CheckParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!("δ must lie in [0, 1), got {}", self.delta)));
        }
        if !(self.eps_opt >= 0.0) {
            return Err(Error::Config(format!(
                "eps_opt must be non-negative, got {}",
                self.eps_opt
            )));
        }
        Ok(())
    }
}

/// Policy completeness of a reconciled model against the robot policy.
pub fn policy_violations(robot_policy: &Policy, reconciled: &SolvedModel, eps_opt: f64) -> PolicyCheck {
    let violations: Vec<StateId> = (0..reconciled.mdp.n_states())
        .filter(|&s| !reconciled.mdp.is_terminal(s))
        .filter(|&s| !is_optimal_action(&reconciled.q, s, robot_policy.action(s), eps_opt))
        .collect();
    PolicyCheck {
        complete: violations.is_empty(),
        violations,
    }
}

/// Behavior completeness of a reconciled model against observed traces.
pub fn behavior_diagnosis(reconciled: &SolvedModel, traces: &[Trajectory], params: CheckParams) -> BehaviorCheck {
    let diagnoses: Vec<TraceDiagnosis> = traces
        .iter()
        .enumerate()
        .map(|(i, t)| diagnose_trace(i, reconciled, t, params))
        .collect();
    BehaviorCheck {
        complete: diagnoses.iter().all(|d| d.explicable),
        traces: diagnoses,
    }
}

fn diagnose_trace(index: usize, m: &SolvedModel, traj: &Trajectory, params: CheckParams) -> TraceDiagnosis {
    let mut failures = Vec::new();
    let mut chosen: HashMap<StateId, usize> = HashMap::new();
    let mut probability = 1.0;
    for (i, step) in traj.steps.iter().enumerate() {
        if !is_optimal_action(&m.q, step.state, step.action, params.eps_opt) {
            failures.push(StepFailure {
                step: Some(i),
                kind: FailureKind::NotOptimal,
            });
        }
        if let Some(&prev) = chosen.get(&step.state) {
            if prev != step.action {
                failures.push(StepFailure {
                    step: Some(i),
                    kind: FailureKind::Inconsistent,
                });
            }
        } else {
            chosen.insert(step.state, step.action);
        }
        probability *= m.mdp.prob(step.state, step.action, step.next);
    }
    if !(probability > params.delta) {
        failures.push(StepFailure {
            step: None,
            kind: FailureKind::Probability,
        });
    }
    TraceDiagnosis {
        trace: index,
        explicable: failures.is_empty(),
        probability,
        failures,
    }
}

pub fn check_policy_complete<'a>(
    spec: &DomainSpec,
    human: &ParamAssignment,
    robot: &ParamAssignment,
    subset: impl IntoIterator<Item = &'a ParamId>,
    eps_opt: f64,
) -> Result<PolicyCheck> {
    let robot_policy = SolvedModel::new(spec, robot.clone())?.policy();
    let reconciled = SolvedModel::new(spec, reconcile(human, robot, subset)?)?;
    Ok(policy_violations(&robot_policy, &reconciled, eps_opt))
}

pub fn check_behavior_complete<'a>(
    spec: &DomainSpec,
    human: &ParamAssignment,
    robot: &ParamAssignment,
    subset: impl IntoIterator<Item = &'a ParamId>,
    traces: &[Trajectory],
    params: CheckParams,
) -> Result<BehaviorCheck> {
    params.validate()?;
    if let Some(bad) = traces.iter().position(|t| !t.is_chain_consistent()) {
        return Err(Error::Config(format!("trace {bad} is not chain-consistent")));
    }
    let reconciled = SolvedModel::new(spec, reconcile(human, robot, subset)?)?;
    Ok(behavior_diagnosis(&reconciled, traces, params))
}

/// Units an explanation may be assembled from.
#[derive(Debug, Clone, PartialEq)]
pub enum Candidates {
    Messages(Vec<Message>),
    /// Raw parameters, each with unit cost.
    Params(Vec<ParamId>),
}

impl Candidates {
    pub fn catalog(spec: &DomainSpec) -> Self {
        Candidates::Messages(spec.messages().to_vec())
    }

    pub fn len(&self) -> usize {
        match self {
            Candidates::Messages(m) => m.len(),
            Candidates::Params(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<String> {
        match self {
            Candidates::Messages(m) => m.iter().map(|m| m.id.clone()).collect(),
            Candidates::Params(p) => p.iter().map(ToString::to_string).collect(),
        }
    }

    pub fn costs(&self) -> Vec<f64> {
        match self {
            Candidates::Messages(m) => m.iter().map(|m| m.cost).collect(),
            Candidates::Params(p) => vec![1.0; p.len()],
        }
    }

    /// Parameters a subset of candidates communicates.
    pub fn params_of(&self, subset: &[usize]) -> BTreeSet<ParamId> {
        match self {
            Candidates::Messages(m) => subset.iter().flat_map(|&i| m[i].param_ids().cloned()).collect(),
            Candidates::Params(p) => subset.iter().map(|&i| p[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target<'a> {
    Policy,
    Behavior { traces: &'a [Trajectory] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimalExplanation {
    pub mode: CheckMode,
    pub strategy: String,
    /// Chosen candidate ids; `None` when no complete subset exists.
    pub subset: Option<Vec<String>>,
    pub cost: f64,
    /// Whether the result is a proven cost minimum.
    pub optimal: bool,
    /// When incomplete: the subset with the fewest residual violations.
    pub best_effort: Option<Vec<String>>,
    pub residual_violations: usize,
    pub evaluated: usize,
}

type ViolationCache = BTreeMap<Vec<ParamId>, Arc<Result<usize, String>>>;

/// Cheapest complete explanation over the candidates, by the given search
/// strategy. Reconciled models are solved once per distinct effective
/// parameter set.
pub fn minimal_complete_explanation(
    spec: &DomainSpec,
    human: &ParamAssignment,
    robot: &ParamAssignment,
    candidates: &Candidates,
    target: Target<'_>,
    params: CheckParams,
    search: &dyn SubsetSearch,
) -> Result<MinimalExplanation> {
    params.validate()?;
    let differing: BTreeSet<ParamId> = human.differing(robot).into_iter().collect();
    let robot_policy = match target {
        Target::Policy => Some(SolvedModel::new(spec, robot.clone())?.policy()),
        Target::Behavior { .. } => None,
    };
    let cache: Mutex<ViolationCache> = Mutex::new(BTreeMap::new());

    let evaluate = |effective: &[ParamId]| -> Result<usize> {
        let reconciled = SolvedModel::new(spec, reconcile(human, robot, effective)?)?;
        Ok(match (&target, &robot_policy) {
            (Target::Policy, Some(pi)) => policy_violations(pi, &reconciled, params.eps_opt).violations.len(),
            (Target::Behavior { traces }, _) => behavior_diagnosis(&reconciled, traces, params).violation_count(),
            _ => unreachable!("policy target always has a robot policy"),
        })
    };
    let violations = |subset: &[usize]| -> Result<usize> {
        let effective: Vec<ParamId> = candidates
            .params_of(subset)
            .into_iter()
            .filter(|id| differing.contains(id))
            .collect();
        if let Some(hit) = cache.lock().expect("cache lock").get(&effective).cloned() {
            return hit.as_ref().clone().map_err(Error::Config);
        }
        let result = evaluate(&effective).map_err(|e| e.to_string());
        cache
            .lock()
            .expect("cache lock")
            .insert(effective, Arc::new(result.clone()));
        result.map_err(Error::Config)
    };

    let ids = candidates.ids();
    let costs = candidates.costs();
    let outcome = search.cheapest_feasible(&FeasibilityProblem {
        ids: &ids,
        costs: &costs,
        violations: &violations,
    })?;
    let named = |s: &[usize]| -> Vec<String> {
        let mut v: Vec<String> = s.iter().map(|&i| ids[i].clone()).collect();
        v.sort();
        v
    };
    Ok(MinimalExplanation {
        mode: match target {
            Target::Policy => CheckMode::Policy,
            Target::Behavior { .. } => CheckMode::Behavior,
        },
        strategy: search.name().to_string(),
        subset: outcome.best.as_deref().map(named),
        cost: outcome.value,
        optimal: outcome.optimal,
        best_effort: outcome.best_effort.as_ref().map(|(s, _)| named(s)),
        residual_violations: outcome.best_effort.as_ref().map_or(0, |(_, v)| *v),
        evaluated: outcome.evaluated,
    })
}

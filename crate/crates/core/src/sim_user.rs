//! Simulated users: a hidden human parameter assignment that takes in
//! explanation messages and labels robot transitions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domains::{param_space, DomainSpec, ParamAssignment, ParamId};
use crate::error::{Error, Result};
use crate::mdp::{is_optimal_action, sample_categorical, sample_trajectory_with, Step, Trajectory};
use crate::reconciliation::{apply_messages, CheckParams, Message, SolvedModel};

/// Which catalog messages are active, one bit per message in catalog order.
/// Serialized as a string of `0`/`1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MessageMask(Vec<bool>);

impl MessageMask {
    pub fn empty(width: usize) -> Self {
        MessageMask(vec![false; width])
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        MessageMask(bits)
    }

    pub fn from_indices(width: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; width];
        for &i in indices {
            bits[i] = true;
        }
        MessageMask(bits)
    }

    pub fn from_ids(catalog: &[Message], ids: &[impl AsRef<str>]) -> Result<Self> {
        let mut mask = Self::empty(catalog.len());
        for id in ids {
            let i = catalog
                .iter()
                .position(|m| m.id == id.as_ref())
                .ok_or_else(|| Error::UnknownMessage(id.as_ref().to_string()))?;
            mask.0[i] = true;
        }
        Ok(mask)
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.0[i] = on;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&i| self.0[i]).collect()
    }

    pub fn union(&self, other: &MessageMask) -> MessageMask {
        MessageMask(self.0.iter().zip(&other.0).map(|(a, b)| *a || *b).collect())
    }

    pub fn messages<'a>(&self, catalog: &'a [Message]) -> Vec<&'a Message> {
        self.indices().into_iter().map(|i| &catalog[i]).collect()
    }
}

impl fmt::Display for MessageMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl From<MessageMask> for String {
    fn from(m: MessageMask) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for MessageMask {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(format!("invalid mask character `{other}`")),
            })
            .collect::<std::result::Result<Vec<bool>, String>>()
            .map(MessageMask)
    }
}

/// One learner training row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledTransition {
    pub transition: Step,
    pub messages: MessageMask,
    /// 1 = explicable, 0 = inexplicable.
    pub label: u8,
}

/// A user whose model is a hidden parameter assignment.
#[derive(Debug)]
pub struct SimulatedUser {
    spec: Arc<DomainSpec>,
    human: ParamAssignment,
    received: MessageMask,
    current: Arc<SolvedModel>,
    cache: HashMap<Vec<ParamId>, Arc<SolvedModel>>,
}

impl SimulatedUser {
    pub fn new(spec: Arc<DomainSpec>, human: ParamAssignment) -> Result<Self> {
        human.check_against(&spec)?;
        let current = Arc::new(SolvedModel::new(&spec, human.clone())?);
        let received = MessageMask::empty(spec.messages().len());
        let mut cache = HashMap::new();
        cache.insert(Vec::new(), current.clone());
        Ok(SimulatedUser {
            spec,
            human,
            received,
            current,
            cache,
        })
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn human(&self) -> &ParamAssignment {
        &self.human
    }

    pub fn received(&self) -> &MessageMask {
        &self.received
    }

    /// The reconciled model under the current message set.
    pub fn model(&self) -> &SolvedModel {
        &self.current
    }

    /// Replaces the active message set and re-solves if it changes the
    /// effective model.
    pub fn receive(&mut self, mask: &MessageMask) -> Result<()> {
        let catalog = self.spec.messages();
        if mask.width() != catalog.len() {
            return Err(Error::SchemaMismatch(format!(
                "mask width {} but catalog has {} messages",
                mask.width(),
                catalog.len()
            )));
        }
        if *mask == self.received {
            return Ok(());
        }
        let reconciled = apply_messages(&self.human, mask.messages(catalog))?;
        let key = self.human.differing(&reconciled);
        let model = match self.cache.get(&key) {
            Some(m) => m.clone(),
            None => {
                let m = Arc::new(SolvedModel::new(&self.spec, reconciled)?);
                self.cache.insert(key, m.clone());
                m
            }
        };
        self.current = model;
        self.received = mask.clone();
        Ok(())
    }

    /// Inexplicable iff the action is not optimal in the reconciled model or
    /// the observed successor has probability at most `δ` there.
    pub fn label(&self, t: Step, params: CheckParams) -> u8 {
        let m = &self.current;
        let optimal = is_optimal_action(&m.q, t.state, t.action, params.eps_opt);
        let possible = m.mdp.prob(t.state, t.action, t.next) > params.delta;
        u8::from(optimal && possible)
    }

    pub fn label_transition(&mut self, t: Step, mask: &MessageMask, params: CheckParams) -> Result<LabeledTransition> {
        self.receive(mask)?;
        Ok(LabeledTransition {
            transition: t,
            messages: mask.clone(),
            label: self.label(t, params),
        })
    }
}

/// Draws a user differing from `robot` on exactly `k` parameters, each set
/// to a candidate other than the robot's value.
pub fn make_user(spec: Arc<DomainSpec>, robot: &ParamAssignment, k: usize, seed: u64) -> Result<SimulatedUser> {
    let human = sample_human_params(&spec, robot, k, seed)?;
    SimulatedUser::new(spec, human)
}

pub fn sample_human_params(spec: &DomainSpec, robot: &ParamAssignment, k: usize, seed: u64) -> Result<ParamAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<(ParamId, Vec<_>)> = param_space(spec)
        .into_iter()
        .filter_map(|(id, cands)| {
            let robot_value = robot.get(id.as_str())?;
            let others: Vec<_> = cands.into_iter().filter(|c| c != robot_value).collect();
            (!others.is_empty()).then_some((id, others))
        })
        .collect();
    if k > eligible.len() {
        return Err(Error::Config(format!(
            "cannot vary {k} parameters; only {} have alternative values",
            eligible.len()
        )));
    }
    let mut human = robot.clone();
    for (id, others) in eligible.choose_multiple(&mut rng, k) {
        let value = others.choose(&mut rng).expect("non-empty").clone();
        human.set(id.clone(), value);
    }
    Ok(human)
}

/// Draws the message subset shown alongside a trace.
pub trait MessageSampler: Send + Sync {
    fn name(&self) -> &'static str;

    fn sample(&self, width: usize, rng: &mut ChaCha8Rng) -> MessageMask;
}

/// Uniform over all `2^n` subsets.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSubsets;

impl MessageSampler for UniformSubsets {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn sample(&self, width: usize, rng: &mut ChaCha8Rng) -> MessageMask {
        MessageMask((0..width).map(|_| rng.gen_bool(0.5)).collect())
    }
}

/// Uniform over subsets of one size (clamped to the catalog size).
#[derive(Debug, Clone, Copy)]
pub struct FixedSize(pub usize);

impl MessageSampler for FixedSize {
    fn name(&self) -> &'static str {
        "fixed-size"
    }

    fn sample(&self, width: usize, rng: &mut ChaCha8Rng) -> MessageMask {
        let picked: Vec<usize> = rand::seq::index::sample(rng, width, self.0.min(width)).into_vec();
        MessageMask::from_indices(width, &picked)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            name: "uniform".into(),
            size: None,
        }
    }
}

type SamplerFactory = fn(&SamplerSpec) -> Result<Box<dyn MessageSampler>>;

pub struct SamplerRegistry {
    factories: BTreeMap<&'static str, SamplerFactory>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        let mut r = SamplerRegistry {
            factories: BTreeMap::new(),
        };
        r.register("uniform", |_| Ok(Box::new(UniformSubsets)));
        r.register("fixed-size", |spec| {
            let size = spec
                .size
                .ok_or_else(|| Error::Config("fixed-size sampler needs `size`".into()))?;
            Ok(Box::new(FixedSize(size)))
        });
        r
    }
}

impl SamplerRegistry {
    pub fn register(&mut self, name: &'static str, factory: SamplerFactory) {
        self.factories.insert(name, factory);
    }

    pub fn build(&self, spec: &SamplerSpec) -> Result<Box<dyn MessageSampler>> {
        let factory = self
            .factories
            .get(spec.name.as_str())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "message sampler",
                name: spec.name.clone(),
            })?;
        factory(spec)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }
}

pub fn sampler(spec: &SamplerSpec) -> Result<Box<dyn MessageSampler>> {
    SamplerRegistry::default().build(spec)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionParams {
    pub n_traces: usize,
    pub max_len: usize,
    pub check: CheckParams,
}

/// Samples traces from the robot's greedy policy, pairs each with a message
/// subset, and labels every transition.
pub fn simulate_session(
    user: &mut SimulatedUser,
    robot: &SolvedModel,
    sampler: &dyn MessageSampler,
    params: SessionParams,
    seed: u64,
) -> Result<Vec<LabeledTransition>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    simulate_into(user, robot, sampler, params, &mut rng, &mut rows)?;
    Ok(rows)
}

/// Like [`simulate_session`] but continues an existing rng stream.
pub fn simulate_into(
    user: &mut SimulatedUser,
    robot: &SolvedModel,
    sampler: &dyn MessageSampler,
    params: SessionParams,
    rng: &mut ChaCha8Rng,
    rows: &mut Vec<LabeledTransition>,
) -> Result<()> {
    let policy = robot.policy();
    let width = user.spec().messages().len();
    for _ in 0..params.n_traces {
        let start = sample_categorical(robot.mdp.initial(), rng);
        let trace: Trajectory = sample_trajectory_with(&robot.mdp, &policy, start, params.max_len, rng);
        let mask = sampler.sample(width, rng);
        user.receive(&mask)?;
        for &step in &trace.steps {
            rows.push(LabeledTransition {
                transition: step,
                messages: mask.clone(),
                label: user.label(step, params.check),
            });
        }
    }
    Ok(())
}

/// Keeps the first row for each (transition, mask) pair.
pub fn dedupe(rows: Vec<LabeledTransition>) -> Vec<LabeledTransition> {
    let mut seen = HashSet::new();
    rows.into_iter()
        .filter(|r| seen.insert((r.transition, r.messages.clone())))
        .collect()
}

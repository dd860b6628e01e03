use std::collections::BTreeMap;
use std::sync::Arc;

use super::grid::Grid;
use super::params::{ParamAssignment, ParamKind};
use super::DomainSpec;
use crate::error::{Error, Result};
use crate::mdp::{Mdp, Outcome, StateId};

/// Declared name and inclusive range of one state feature. Terminal sink
/// states encode every feature as `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDecl {
    pub name: &'static str,
    pub min: i64,
    pub max: i64,
}

/// State-space mechanics of a gridworld family.
///
/// Implementations must keep the state and action spaces independent of
/// the parameter assignment so that models built under different
/// assignments are comparable state-by-state.
pub trait Dynamics: Send + Sync {
    fn name(&self) -> &'static str;

    fn actions(&self) -> &'static [&'static str];

    fn features(&self) -> &'static [FeatureDecl];

    /// Parameters the mechanics read by id, with their required kind.
    fn required_params(&self) -> &'static [(&'static str, ParamKind)];

    /// Extra layout checks beyond the generic ones.
    fn validate(&self, _spec: &DomainSpec) -> Result<()> {
        Ok(())
    }

    fn n_states(&self, grid: &Grid) -> usize;

    fn features_of(&self, grid: &Grid, s: StateId) -> Vec<i64>;

    fn state_of(&self, grid: &Grid, features: &[i64]) -> Option<StateId>;

    fn build(&self, spec: &DomainSpec, params: &ParamAssignment) -> Result<Mdp>;
}

/// Dynamics implementations selectable by name from a layout file.
#[derive(Clone, Default)]
pub struct DynamicsRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Dynamics>>,
}

impl DynamicsRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(super::Warehouse));
        r.register(Arc::new(super::FourRooms));
        r.register(Arc::new(super::Taxi));
        r
    }

    pub fn register(&mut self, dynamics: Arc<dyn Dynamics>) {
        self.entries.insert(dynamics.name(), dynamics);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Dynamics>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownStrategy {
            kind: "dynamics",
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

/// Accumulates sparse transition rows, merging duplicate successors.
pub(crate) struct RowBuilder {
    n_actions: usize,
    rows: Vec<Vec<Outcome>>,
}

impl RowBuilder {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        RowBuilder {
            n_actions,
            rows: vec![Vec::new(); n_states * n_actions],
        }
    }

    pub fn add(&mut self, s: StateId, a: usize, next: StateId, prob: f64, reward: f64) {
        if prob <= 0.0 {
            return;
        }
        let row = &mut self.rows[s * self.n_actions + a];
        match row.iter_mut().find(|o| o.next == next) {
            Some(o) => {
                // merged outcomes keep the probability-weighted reward
                let total = o.prob + prob;
                o.reward = (o.reward * o.prob + reward * prob) / total;
                o.prob = total;
            }
            None => row.push(Outcome { next, prob, reward }),
        }
    }

    pub fn absorbing(&mut self, s: StateId) {
        for a in 0..self.n_actions {
            self.add(s, a, s, 1.0, 0.0);
        }
    }

    pub fn finish(self) -> Vec<Vec<Outcome>> {
        self.rows
    }
}

pub(crate) fn required_scalar(params: &ParamAssignment, id: &str) -> Result<f64> {
    params.scalar(id).ok_or_else(|| Error::MissingParam(id.to_string()))
}

pub(crate) fn required_cell(params: &ParamAssignment, id: &str) -> Result<super::Pos> {
    params.cell(id).ok_or_else(|| Error::MissingParam(id.to_string()))
}

pub(crate) fn required_categorical<'a>(params: &'a ParamAssignment, id: &str) -> Result<&'a [f64]> {
    params
        .categorical(id)
        .ok_or_else(|| Error::MissingParam(id.to_string()))
}

/// Uniform distribution over the given states.
pub(crate) fn uniform_over(n_states: usize, states: &[StateId]) -> Vec<f64> {
    let mut dist = vec![0.0; n_states];
    for &s in states {
        dist[s] += 1.0 / states.len() as f64;
    }
    dist
}

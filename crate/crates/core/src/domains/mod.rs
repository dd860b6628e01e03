//! Data-driven gridworld domains.
//!
//! A layout file describes the grid, its cell annotations, the editable
//! parameters with their candidate values, and the explanatory message
//! catalog. The `dynamics` field selects the state-space mechanics from a
//! [`DynamicsRegistry`]; the shipped registry knows `warehouse`,
//! `four_rooms` and `taxi`.

mod dynamics;
mod four_rooms;
mod grid;
mod params;
mod taxi;
mod warehouse;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use dynamics::{Dynamics, DynamicsRegistry, FeatureDecl};
pub use four_rooms::FourRooms;
pub use grid::{CellKind, Grid, Pos};
pub use params::{ParamAssignment, ParamDecl, ParamId, ParamKind, ParamValue};
pub use taxi::Taxi;
pub use warehouse::Warehouse;

use crate::error::{Error, Result};
use crate::mdp::{Mdp, StateId};
use crate::reconciliation::Message;

pub const LAYOUT_SCHEMA_VERSION: u32 = 1;

pub const SHIPPED: &[(&str, &str)] = &[
    ("warehouse", include_str!("../../layouts/warehouse.layout.json")),
    ("four_rooms", include_str!("../../layouts/four_rooms.layout.json")),
    ("taxi", include_str!("../../layouts/taxi.layout.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellDecl {
    pub x: usize,
    pub y: usize,
    pub kind: CellKind,
    #[serde(default)]
    pub param_refs: Vec<ParamId>,
}

/// A named human model, given as overrides of the robot defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub human: std::collections::BTreeMap<ParamId, ParamValue>,
}

/// On-disk layout document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFile {
    pub schema_version: u32,
    pub name: String,
    pub dynamics: String,
    pub width: usize,
    pub height: usize,
    pub actions: Vec<String>,
    pub features: Vec<String>,
    #[serde(default)]
    pub cells: Vec<CellDecl>,
    pub params: Vec<ParamDecl>,
    #[serde(default)]
    pub messages: Vec<Message>,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
}

/// A validated domain: grid, parameter space, message catalog and the
/// dynamics that compile it to an [`Mdp`].
#[derive(Clone)]
pub struct DomainSpec {
    layout: LayoutFile,
    grid: Grid,
    dynamics: Arc<dyn Dynamics>,
}

impl std::fmt::Debug for DomainSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DomainSpec")
            .field("name", &self.layout.name)
            .field("dynamics", &self.dynamics.name())
            .field("width", &self.grid.width())
            .field("height", &self.grid.height())
            .finish()
    }
}

pub fn load_layout(path: impl AsRef<Path>) -> Result<DomainSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_layout(&text)
}

pub fn parse_layout(text: &str) -> Result<DomainSpec> {
    parse_layout_with(text, &DynamicsRegistry::builtin())
}

pub fn parse_layout_with(text: &str, registry: &DynamicsRegistry) -> Result<DomainSpec> {
    let layout: LayoutFile = serde_json::from_str(text).map_err(|e| Error::LayoutParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    DomainSpec::from_layout(layout, registry)
}

/// One of the layouts bundled with the crate.
pub fn shipped(name: &str) -> Result<DomainSpec> {
    let (_, text) = SHIPPED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::UnknownStrategy {
            kind: "domain",
            name: name.to_string(),
        })?;
    parse_layout(text)
}

/// Resolves a shipped domain name, falling back to a layout file path.
pub fn resolve(name_or_path: &str) -> Result<DomainSpec> {
    if SHIPPED.iter().any(|(n, _)| *n == name_or_path) {
        shipped(name_or_path)
    } else {
        load_layout(name_or_path)
    }
}

impl DomainSpec {
    pub fn from_layout(layout: LayoutFile, registry: &DynamicsRegistry) -> Result<Self> {
        if layout.schema_version != LAYOUT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: layout.schema_version,
                expected: LAYOUT_SCHEMA_VERSION,
            });
        }
        let dynamics = registry.get(&layout.dynamics)?;
        let grid = Grid::from_cells(layout.width, layout.height, &layout.cells)?;
        let spec = DomainSpec { layout, grid, dynamics };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidLayout(m));
        let actions: Vec<&str> = self.layout.actions.iter().map(String::as_str).collect();
        if actions != self.dynamics.actions() {
            return invalid(format!(
                "actions {:?} do not match `{}` dynamics {:?}",
                actions,
                self.dynamics.name(),
                self.dynamics.actions()
            ));
        }
        let features: Vec<&str> = self.layout.features.iter().map(String::as_str).collect();
        let expected: Vec<&str> = self.dynamics.features().iter().map(|f| f.name).collect();
        if features != expected {
            return invalid(format!("features {features:?} do not match dynamics {expected:?}"));
        }

        let mut seen = BTreeSet::new();
        for p in &self.layout.params {
            if !seen.insert(p.id.clone()) {
                return invalid(format!("parameter `{}` declared twice", p.id));
            }
            p.validate(&self.grid)?;
        }
        for (id, kind) in self.dynamics.required_params() {
            match self.param(id) {
                None => return invalid(format!("`{}` dynamics requires parameter `{id}`", self.dynamics.name())),
                Some(p) if p.kind != *kind => {
                    return invalid(format!("parameter `{id}` must have kind {kind:?}, found {:?}", p.kind))
                }
                _ => {}
            }
        }
        for cell in &self.layout.cells {
            for r in &cell.param_refs {
                if self.param(r.as_str()).is_none() {
                    return invalid(format!(
                        "cell ({}, {}) of kind {:?} references unknown parameter `{r}`",
                        cell.x, cell.y, cell.kind
                    ));
                }
            }
        }
        self.dynamics.validate(self)?;

        let mut ids = BTreeSet::new();
        for m in &self.layout.messages {
            if !ids.insert(m.id.as_str()) {
                return invalid(format!("message `{}` declared twice", m.id));
            }
            m.validate()?;
            for mp in &m.params {
                let decl = self
                    .param(mp.param_id.as_str())
                    .ok_or_else(|| Error::UnknownParam(mp.param_id.to_string()))?;
                if mp.value != decl.default {
                    return invalid(format!(
                        "message `{}` states {} for `{}` but the robot model uses {}",
                        m.id, mp.value, mp.param_id, decl.default
                    ));
                }
            }
        }
        // catalog must not contradict itself
        crate::reconciliation::message_params(self.layout.messages.iter())?;
        for sc in &self.layout.scenarios {
            self.robot_params().with_overrides(self, sc.human.clone())?;
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.layout.name
    }

    pub fn layout(&self) -> &LayoutFile {
        &self.layout
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn actions(&self) -> &[String] {
        &self.layout.actions
    }

    pub fn action_index(&self, name: &str) -> Option<usize> {
        self.layout.actions.iter().position(|a| a == name)
    }

    pub fn feature_decls(&self) -> &'static [FeatureDecl] {
        self.dynamics.features()
    }

    pub fn params(&self) -> &[ParamDecl] {
        &self.layout.params
    }

    pub fn param(&self, id: &str) -> Option<&ParamDecl> {
        self.layout.params.iter().find(|p| p.id.as_str() == id)
    }

    pub fn messages(&self) -> &[Message] {
        &self.layout.messages
    }

    pub fn message(&self, id: &str) -> Option<&Message> {
        self.layout.messages.iter().find(|m| m.id == id)
    }

    pub fn scenario(&self, name: &str) -> Result<&Scenario> {
        self.layout
            .scenarios
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("domain `{}` has no scenario `{name}`", self.name())))
    }

    /// Human model of a named scenario.
    pub fn scenario_params(&self, name: &str) -> Result<ParamAssignment> {
        let sc = self.scenario(name)?;
        self.robot_params().with_overrides(self, sc.human.clone())
    }

    /// The robot model: every parameter at its declared default.
    pub fn robot_params(&self) -> ParamAssignment {
        ParamAssignment::from_values(self.layout.params.iter().map(|p| (p.id.clone(), p.default.clone())))
    }

    pub fn n_states(&self) -> usize {
        self.dynamics.n_states(&self.grid)
    }

    pub fn state_features(&self, s: StateId) -> Vec<i64> {
        self.dynamics.features_of(&self.grid, s)
    }

    pub fn state_from_features(&self, features: &[i64]) -> Option<StateId> {
        self.dynamics.state_of(&self.grid, features)
    }
}

/// Compiles the domain under a parameter assignment.
pub fn build_mdp(spec: &DomainSpec, params: &ParamAssignment) -> Result<Mdp> {
    params.check_against(spec)?;
    let mdp = spec.dynamics.build(spec, params)?;
    debug_assert!(mdp.validate().is_ok());
    Ok(mdp)
}

pub fn state_features(spec: &DomainSpec, s: StateId) -> Vec<i64> {
    spec.state_features(s)
}

/// Editable parameters with their candidate values, in declaration order.
pub fn param_space(spec: &DomainSpec) -> Vec<(ParamId, Vec<ParamValue>)> {
    spec.layout
        .params
        .iter()
        .map(|p| (p.id.clone(), p.candidates.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{greedy_policy, optimal_action_set, solve, TieBreak};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn minimal_layout() -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "name": "tiny",
            "dynamics": "four_rooms",
            "width": 1,
            "height": 1,
            "actions": ["up", "down", "left", "right"],
            "features": ["x", "y"],
            "params": [
                {"id": "goal_pos", "kind": "transition", "candidates": [{"cell": [0, 0]}], "default": {"cell": [0, 0]}},
                {"id": "goal_reward", "kind": "reward", "candidates": [{"scalar": 10.0}], "default": {"scalar": 10.0}},
                {"id": "step_cost", "kind": "reward", "candidates": [{"scalar": -1.0}], "default": {"scalar": -1.0}},
                {"id": "discount", "kind": "discount", "candidates": [{"scalar": 0.9}], "default": {"scalar": 0.9}}
            ]
        })
    }

    #[test]
    fn shipped_layouts_have_expected_sizes() {
        for (name, w, h) in [("warehouse", 9, 9), ("four_rooms", 9, 9), ("taxi", 6, 6)] {
            let spec = shipped(name).unwrap();
            assert_eq!((spec.grid().width(), spec.grid().height()), (w, h), "{name}");
            build_mdp(&spec, &spec.robot_params()).unwrap();
        }
    }

    #[test]
    fn warehouse_catalog_has_seven_messages() {
        let spec = shipped("warehouse").unwrap();
        assert_eq!(spec.messages().len(), 7);
        assert!(spec.grid().cells_of(CellKind::Slip).count() > 0);
        assert!(spec.grid().cells_of(CellKind::Chute).count() == 1);
        assert!(spec.grid().cells_of(CellKind::Rack).count() > 0);
    }

    #[test]
    fn minimal_layout_is_single_state() {
        let spec = parse_layout(&minimal_layout().to_string()).unwrap();
        let mdp = build_mdp(&spec, &spec.robot_params()).unwrap();
        assert_eq!(mdp.n_states(), 1);
        assert!(mdp.is_terminal(0));
    }

    #[test]
    fn parse_errors_carry_position() {
        match parse_layout("{\n  \"schema_version\": 1,\n  \"name\": }") {
            Err(Error::LayoutParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_annotations_are_rejected() {
        let mut v = minimal_layout();
        v["cells"] = serde_json::json!([{"x": 0, "y": 0, "kind": "lava"}]);
        assert!(matches!(parse_layout(&v.to_string()), Err(Error::LayoutParse { .. })));
    }

    #[test]
    fn transition_group_must_sum_to_one() {
        let mut v = minimal_layout();
        v["params"].as_array_mut().unwrap().push(serde_json::json!({
            "id": "slip", "kind": "transition",
            "candidates": [{"categorical": [0.8, 0.4]}],
            "default": {"categorical": [0.8, 0.4]}
        }));
        let err = parse_layout(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("slip"), "{err}");
    }

    #[test]
    fn invalid_cell_reference_names_the_cell() {
        let mut v = minimal_layout();
        v["cells"] = serde_json::json!([{"x": 0, "y": 0, "kind": "slip", "param_refs": ["nope"]}]);
        let err = parse_layout(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("(0, 0)") && err.contains("nope"), "{err}");
    }

    #[test]
    fn warehouse_slip_cells_stay_with_quarter_probability() {
        let spec = shipped("warehouse").unwrap();
        let mdp = build_mdp(&spec, &spec.robot_params()).unwrap();
        let right = spec.action_index("right").unwrap();
        let mut checked = 0;
        for pos in spec.grid().cells_of(CellKind::Slip) {
            let s = spec.state_from_features(&[pos.x as i64, pos.y as i64, 0, 0]).unwrap();
            for a in 0..4 {
                let stay = mdp.prob(s, a, s);
                // blocked moves stay with certainty
                assert!(stay == 1.0 || (stay - 0.25).abs() < 1e-12, "{pos:?} {a}: {stay}");
            }
            if mdp.prob(s, right, s) < 1.0 {
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn zero_slip_is_deterministic() {
        let spec = shipped("warehouse").unwrap();
        let params = spec
            .robot_params()
            .with_overrides(
                &spec,
                [(ParamId::new("slip"), ParamValue::Categorical(vec![0.0, 1.0]))].into(),
            )
            .unwrap();
        let mdp = build_mdp(&spec, &params).unwrap();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                assert_eq!(mdp.row(s, a).iter().filter(|o| o.prob > 0.0).count(), 1);
            }
        }
    }

    #[test]
    fn warehouse_features_encode_directly() {
        let spec = shipped("warehouse").unwrap();
        let s = spec.state_from_features(&[2, 3, 1, 0]).unwrap();
        assert_eq!(spec.state_features(s), vec![2, 3, 1, 0]);
    }

    #[test]
    fn four_rooms_decodes_row_major() {
        let spec = shipped("four_rooms").unwrap();
        let w = spec.grid().width();
        for s in 0..w * spec.grid().height() {
            assert_eq!(spec.state_features(s), vec![(s % w) as i64, (s / w) as i64]);
        }
    }

    #[test]
    fn feature_encoding_is_injective_and_invertible() {
        for (name, _) in SHIPPED {
            let spec = shipped(name).unwrap();
            let mut seen = std::collections::HashSet::new();
            for s in 0..spec.n_states() {
                let f = spec.state_features(s);
                for (v, decl) in f.iter().zip(spec.feature_decls()) {
                    assert!((decl.min..=decl.max).contains(v), "{name}: {decl:?} {v}");
                }
                assert_eq!(spec.state_from_features(&f), Some(s), "{name} state {s}");
                assert!(seen.insert(f), "{name}: duplicate features");
            }
        }
    }

    #[test]
    fn taxi_in_taxi_sentinel() {
        let spec = shipped("taxi").unwrap();
        let s = spec.state_from_features(&[1, 1, 4, 2]).unwrap();
        assert_eq!(spec.state_features(s)[2], 4);
    }

    #[test]
    fn param_space_ids_are_unique_and_contain_defaults() {
        for (name, _) in SHIPPED {
            let spec = shipped(name).unwrap();
            let space = param_space(&spec);
            let ids: BTreeSet<_> = space.iter().map(|(id, _)| id.clone()).collect();
            assert_eq!(ids.len(), space.len());
            let robot = spec.robot_params();
            for (id, cands) in &space {
                assert!(cands.contains(robot.get(id.as_str()).unwrap()), "{name}:{id}");
            }
        }
        let spec = shipped("warehouse").unwrap();
        let slip = &param_space(&spec)
            .into_iter()
            .find(|(id, _)| id.as_str() == "slip")
            .unwrap()
            .1;
        for p in [0.0, 0.25, 0.5] {
            assert!(slip.contains(&ParamValue::Categorical(vec![p, 1.0 - p])));
        }
        assert!(param_space(&spec)
            .iter()
            .any(|(id, c)| id.as_str() == "station_pos" && c.len() > 1));
    }

    #[test]
    fn fuzzed_assignments_build_valid_mdps() {
        for (name, _) in SHIPPED {
            let spec = shipped(name).unwrap();
            let space = param_space(&spec);
            for seed in 0..100u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut params = spec.robot_params();
                for _ in 0..3 {
                    let (id, cands) = &space[rng.gen_range(0..space.len())];
                    params.set(id.clone(), cands[rng.gen_range(0..cands.len())].clone());
                }
                let mdp = build_mdp(&spec, &params).unwrap();
                mdp.validate().unwrap();
                let again = build_mdp(&spec, &params).unwrap();
                assert_eq!(mdp, again, "build must be deterministic");
            }
        }
    }

    #[test]
    fn missing_and_out_of_range_params_are_errors() {
        let spec = shipped("four_rooms").unwrap();
        let mut params = spec.robot_params();
        params.remove("discount");
        assert!(matches!(build_mdp(&spec, &params), Err(Error::MissingParam(_))));
        let mut params = spec.robot_params();
        params.set(ParamId::new("discount"), ParamValue::Scalar(1.5));
        assert!(matches!(build_mdp(&spec, &params), Err(Error::ParamValue { .. })));
    }

    #[test]
    fn warehouse_cell_next_to_chute_only_moves_toward_it() {
        let spec = shipped("warehouse").unwrap();
        let mdp = build_mdp(&spec, &spec.robot_params()).unwrap();
        let q = solve(&mdp).unwrap();
        let chute = spec.grid().cells_of(CellKind::Chute).next().unwrap();
        // carrying an inspected box, one step left of the chute
        let s = spec
            .state_from_features(&[chute.x as i64 - 1, chute.y as i64, 1, 1])
            .unwrap();
        assert_eq!(
            optimal_action_set(&q, s, 1e-6),
            vec![spec.action_index("right").unwrap()]
        );
        let at_chute = spec
            .state_from_features(&[chute.x as i64, chute.y as i64, 1, 1])
            .unwrap();
        let pi = greedy_policy(&q, TieBreak::LowestIndex);
        assert_eq!(pi.action(at_chute), spec.action_index("dropoff").unwrap());
    }
}

use super::dynamics::{required_cell, required_scalar, uniform_over, Dynamics, FeatureDecl, RowBuilder};
use super::grid::{Dir, Grid, Pos};
use super::params::{ParamAssignment, ParamKind};
use super::DomainSpec;
use crate::error::Result;
use crate::mdp::{Mdp, StateId};

/// Navigation to a goal cell. One state per grid cell in row-major order;
/// the goal cell is terminal. Penalty cells are non-terminal.
#[derive(Debug, Clone, Copy, Default)]
pub struct FourRooms;

const FEATURES: &[FeatureDecl] = &[
    FeatureDecl {
        name: "x",
        min: 0,
        max: 63,
    },
    FeatureDecl {
        name: "y",
        min: 0,
        max: 63,
    },
];

impl Dynamics for FourRooms {
    fn name(&self) -> &'static str {
        "four_rooms"
    }

    fn actions(&self) -> &'static [&'static str] {
        &["up", "down", "left", "right"]
    }

    fn features(&self) -> &'static [FeatureDecl] {
        FEATURES
    }

    fn required_params(&self) -> &'static [(&'static str, ParamKind)] {
        &[
            ("goal_pos", ParamKind::Transition),
            ("goal_reward", ParamKind::Reward),
            ("step_cost", ParamKind::Reward),
            ("discount", ParamKind::Discount),
        ]
    }

    fn n_states(&self, grid: &Grid) -> usize {
        grid.n_cells()
    }

    fn features_of(&self, grid: &Grid, s: StateId) -> Vec<i64> {
        let p = grid.pos(s);
        vec![p.x as i64, p.y as i64]
    }

    fn state_of(&self, grid: &Grid, features: &[i64]) -> Option<StateId> {
        match *features {
            [x, y] if x >= 0 && y >= 0 => {
                let p = Pos::new(x as usize, y as usize);
                grid.contains(p).then(|| grid.index(p))
            }
            _ => None,
        }
    }

    fn build(&self, spec: &DomainSpec, params: &ParamAssignment) -> Result<Mdp> {
        let grid = spec.grid();
        let goal = required_cell(params, "goal_pos")?;
        let goal_reward = required_scalar(params, "goal_reward")?;
        let step = required_scalar(params, "step_cost")?;
        let discount = required_scalar(params, "discount")?;

        let n = grid.n_cells();
        let mut rows = RowBuilder::new(n, Dir::ALL.len());
        let terminal: Vec<bool> = (0..n).map(|s| grid.pos(s) == goal).collect();
        for s in 0..n {
            let p = grid.pos(s);
            if p == goal {
                rows.absorbing(s);
                continue;
            }
            for (a, dir) in Dir::ALL.into_iter().enumerate() {
                for (q, prob) in grid.move_outcomes(p, dir, params) {
                    let mut r = step + grid.penalty(q, params);
                    if q == goal {
                        r += goal_reward;
                    }
                    rows.add(s, a, grid.index(q), prob, r);
                }
            }
        }
        let mut starts: Vec<StateId> = grid
            .start_cells()
            .into_iter()
            .filter(|&p| p != goal)
            .map(|p| grid.index(p))
            .collect();
        if starts.is_empty() {
            starts = grid.free_cells().map(|p| grid.index(p)).collect();
        }
        Mdp::new(
            n,
            Dir::ALL.len(),
            rows.finish(),
            discount,
            uniform_over(n, &starts),
            terminal,
        )
    }
}

use super::dynamics::{required_categorical, required_cell, required_scalar, Dynamics, FeatureDecl, RowBuilder};
use super::grid::{Dir, Grid, Pos};
use super::params::{ParamAssignment, ParamKind};
use super::DomainSpec;
use crate::error::{Error, Result};
use crate::mdp::{Mdp, StateId};

/// Single-passenger taxi with four depots.
///
/// Passenger location codes `0..4` name a depot; code `4` means the
/// passenger is riding. Destination codes name a depot. Pickup and dropoff
/// in the wrong place leave the state unchanged and cost `illegal_penalty`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Taxi;

pub const IN_TAXI: usize = 4;
const DEPOTS: [&str; 4] = ["depot_r", "depot_g", "depot_y", "depot_b"];
const LOCATIONS: usize = 5;

const FEATURES: &[FeatureDecl] = &[
    FeatureDecl {
        name: "taxi_x",
        min: -1,
        max: 63,
    },
    FeatureDecl {
        name: "taxi_y",
        min: -1,
        max: 63,
    },
    FeatureDecl {
        name: "passenger",
        min: -1,
        max: 4,
    },
    FeatureDecl {
        name: "destination",
        min: -1,
        max: 3,
    },
];

const PICKUP: usize = 4;
const DROPOFF: usize = 5;

fn index(grid: &Grid, p: Pos, passenger: usize, dest: usize) -> StateId {
    grid.index(p) + grid.n_cells() * (passenger + LOCATIONS * dest)
}

impl Dynamics for Taxi {
    fn name(&self) -> &'static str {
        "taxi"
    }

    fn actions(&self) -> &'static [&'static str] {
        &["up", "down", "left", "right", "pickup", "dropoff"]
    }

    fn features(&self) -> &'static [FeatureDecl] {
        FEATURES
    }

    fn required_params(&self) -> &'static [(&'static str, ParamKind)] {
        &[
            ("depot_r", ParamKind::Transition),
            ("depot_g", ParamKind::Transition),
            ("depot_y", ParamKind::Transition),
            ("depot_b", ParamKind::Transition),
            ("step_cost", ParamKind::Reward),
            ("dropoff_reward", ParamKind::Reward),
            ("illegal_penalty", ParamKind::Reward),
            ("discount", ParamKind::Discount),
            ("passenger_start", ParamKind::Initial),
            ("destination", ParamKind::Initial),
        ]
    }

    fn validate(&self, spec: &DomainSpec) -> Result<()> {
        for id in ["passenger_start", "destination"] {
            let decl = spec.param(id).expect("required");
            if decl.default.as_categorical().map(<[f64]>::len) != Some(DEPOTS.len()) {
                return Err(Error::InvalidLayout(format!(
                    "`{id}` must be a categorical over the four depots"
                )));
            }
        }
        Ok(())
    }

    fn n_states(&self, grid: &Grid) -> usize {
        grid.n_cells() * LOCATIONS * DEPOTS.len() + 1
    }

    fn features_of(&self, grid: &Grid, s: StateId) -> Vec<i64> {
        let cells = grid.n_cells();
        if s == self.n_states(grid) - 1 {
            return vec![-1; 4];
        }
        let p = grid.pos(s % cells);
        let layer = s / cells;
        vec![
            p.x as i64,
            p.y as i64,
            (layer % LOCATIONS) as i64,
            (layer / LOCATIONS) as i64,
        ]
    }

    fn state_of(&self, grid: &Grid, features: &[i64]) -> Option<StateId> {
        match *features {
            [-1, -1, -1, -1] => Some(self.n_states(grid) - 1),
            [x, y, pass @ 0..=4, dest @ 0..=3] if x >= 0 && y >= 0 => {
                let p = Pos::new(x as usize, y as usize);
                grid.contains(p).then(|| index(grid, p, pass as usize, dest as usize))
            }
            _ => None,
        }
    }

    fn build(&self, spec: &DomainSpec, params: &ParamAssignment) -> Result<Mdp> {
        let grid = spec.grid();
        let depots = DEPOTS
            .iter()
            .map(|id| required_cell(params, id))
            .collect::<Result<Vec<Pos>>>()?;
        let step = required_scalar(params, "step_cost")?;
        let dropoff_reward = required_scalar(params, "dropoff_reward")?;
        let illegal = required_scalar(params, "illegal_penalty")?;
        let discount = required_scalar(params, "discount")?;
        let passenger_start = required_categorical(params, "passenger_start")?;
        let destination = required_categorical(params, "destination")?;

        let n = self.n_states(grid);
        let sink = n - 1;
        let n_actions = self.actions().len();
        let mut rows = RowBuilder::new(n, n_actions);
        let mut terminal = vec![false; n];
        terminal[sink] = true;
        rows.absorbing(sink);

        for cell in 0..grid.n_cells() {
            let p = grid.pos(cell);
            for pass in 0..LOCATIONS {
                for dest in 0..DEPOTS.len() {
                    let s = index(grid, p, pass, dest);
                    for (a, dir) in Dir::ALL.into_iter().enumerate() {
                        for (q, prob) in grid.move_outcomes(p, dir, params) {
                            rows.add(s, a, index(grid, q, pass, dest), prob, step);
                        }
                    }
                    if pass != IN_TAXI && depots[pass] == p {
                        rows.add(s, PICKUP, index(grid, p, IN_TAXI, dest), 1.0, step);
                    } else {
                        rows.add(s, PICKUP, s, 1.0, step + illegal);
                    }
                    if pass == IN_TAXI && depots[dest] == p {
                        rows.add(s, DROPOFF, sink, 1.0, step + dropoff_reward);
                    } else {
                        rows.add(s, DROPOFF, s, 1.0, step + illegal);
                    }
                }
            }
        }

        let starts = grid.start_cells();
        let mut initial = vec![0.0; n];
        for p in &starts {
            for (pass, pp) in passenger_start.iter().enumerate() {
                for (dest, pd) in destination.iter().enumerate() {
                    initial[index(grid, *p, pass, dest)] += pp * pd / starts.len() as f64;
                }
            }
        }
        Mdp::new(n, n_actions, rows.finish(), discount, initial, terminal)
    }
}

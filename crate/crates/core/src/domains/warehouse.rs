use super::dynamics::{required_cell, required_scalar, Dynamics, FeatureDecl, RowBuilder};
use super::grid::{CellKind, Dir, Grid, Pos};
use super::params::{ParamAssignment, ParamKind};
use super::DomainSpec;
use crate::error::{Error, Result};
use crate::mdp::{Mdp, StateId};

/// Box delivery with an inspection station.
///
/// State: robot cell, whether the box is carried, whether it has been
/// inspected (entering the station while carrying). Dropping a fragile box
/// at the chute without inspection incurs `inspection_penalty`. A single
/// absorbing sink follows delivery.
#[derive(Debug, Clone, Copy, Default)]
pub struct Warehouse;

const FEATURES: &[FeatureDecl] = &[
    FeatureDecl {
        name: "x",
        min: -1,
        max: 63,
    },
    FeatureDecl {
        name: "y",
        min: -1,
        max: 63,
    },
    FeatureDecl {
        name: "carrying_box",
        min: -1,
        max: 1,
    },
    FeatureDecl {
        name: "visited_station",
        min: -1,
        max: 1,
    },
];

const UP: usize = 0;
const PICKUP: usize = 4;
const DROPOFF: usize = 5;

fn index(grid: &Grid, p: Pos, carrying: bool, inspected: bool) -> StateId {
    let layer = carrying as usize + 2 * inspected as usize;
    grid.index(p) + grid.n_cells() * layer
}

impl Dynamics for Warehouse {
    fn name(&self) -> &'static str {
        "warehouse"
    }

    fn actions(&self) -> &'static [&'static str] {
        &["up", "down", "left", "right", "pickup", "dropoff"]
    }

    fn features(&self) -> &'static [FeatureDecl] {
        FEATURES
    }

    fn required_params(&self) -> &'static [(&'static str, ParamKind)] {
        &[
            ("box_pos", ParamKind::Transition),
            ("station_pos", ParamKind::Transition),
            ("step_cost", ParamKind::Reward),
            ("discount", ParamKind::Discount),
            ("box_fragile", ParamKind::Reward),
            ("inspection_penalty", ParamKind::Reward),
            ("delivery_reward", ParamKind::Reward),
        ]
    }

    fn validate(&self, spec: &DomainSpec) -> Result<()> {
        let chutes = spec.grid().cells_of(CellKind::Chute).count();
        if chutes != 1 {
            return Err(Error::InvalidLayout(format!(
                "warehouse needs exactly one chute, found {chutes}"
            )));
        }
        Ok(())
    }

    fn n_states(&self, grid: &Grid) -> usize {
        4 * grid.n_cells() + 1
    }

    fn features_of(&self, grid: &Grid, s: StateId) -> Vec<i64> {
        let cells = grid.n_cells();
        if s == 4 * cells {
            return vec![-1; 4];
        }
        let p = grid.pos(s % cells);
        let layer = s / cells;
        vec![p.x as i64, p.y as i64, (layer & 1) as i64, (layer >> 1) as i64]
    }

    fn state_of(&self, grid: &Grid, features: &[i64]) -> Option<StateId> {
        match *features {
            [-1, -1, -1, -1] => Some(4 * grid.n_cells()),
            [x, y, c @ 0..=1, v @ 0..=1] if x >= 0 && y >= 0 => {
                let p = Pos::new(x as usize, y as usize);
                grid.contains(p).then(|| index(grid, p, c == 1, v == 1))
            }
            _ => None,
        }
    }

    fn build(&self, spec: &DomainSpec, params: &ParamAssignment) -> Result<Mdp> {
        let grid = spec.grid();
        let box_pos = required_cell(params, "box_pos")?;
        let station = required_cell(params, "station_pos")?;
        let step = required_scalar(params, "step_cost")?;
        let discount = required_scalar(params, "discount")?;
        let fragile = required_scalar(params, "box_fragile")? > 0.5;
        let inspection_penalty = required_scalar(params, "inspection_penalty")?;
        let delivery = required_scalar(params, "delivery_reward")?;
        let chute = grid.cells_of(CellKind::Chute).next().expect("validated chute");

        let n = self.n_states(grid);
        let sink = n - 1;
        let n_actions = self.actions().len();
        let mut rows = RowBuilder::new(n, n_actions);
        let mut terminal = vec![false; n];
        terminal[sink] = true;
        rows.absorbing(sink);

        for cell in 0..grid.n_cells() {
            let p = grid.pos(cell);
            for layer in 0..4 {
                let (carrying, inspected) = (layer & 1 == 1, layer & 2 == 2);
                let s = index(grid, p, carrying, inspected);
                for (a, dir) in Dir::ALL.into_iter().enumerate() {
                    for (q, prob) in grid.move_outcomes(p, dir, params) {
                        let inspected = inspected || (carrying && q == station);
                        rows.add(s, UP + a, index(grid, q, carrying, inspected), prob, step);
                    }
                }
                if p == box_pos && !carrying && !grid.is_blocked(p) {
                    rows.add(s, PICKUP, index(grid, p, true, inspected), 1.0, step);
                } else {
                    rows.add(s, PICKUP, s, 1.0, step);
                }
                if p == chute && carrying {
                    let penalty = if fragile && !inspected { inspection_penalty } else { 0.0 };
                    rows.add(s, DROPOFF, sink, 1.0, step + delivery + penalty);
                } else {
                    rows.add(s, DROPOFF, s, 1.0, step);
                }
            }
        }

        let starts: Vec<Pos> = grid.start_cells();
        let mut initial = vec![0.0; n];
        for p in &starts {
            initial[index(grid, *p, false, false)] += 1.0 / starts.len() as f64;
        }
        Mdp::new(n, n_actions, rows.finish(), discount, initial, terminal)
    }
}

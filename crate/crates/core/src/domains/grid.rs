use serde::{Deserialize, Serialize};

use super::params::{ParamAssignment, ParamId, ParamValue};
use super::CellDecl;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Pos { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Wall,
    Rack,
    /// Moves out of this cell fail with the probability named by the
    /// referenced categorical parameter `[p_stay, p_move]`.
    Slip,
    /// Entering this cell adds the referenced scalar rewards.
    Penalty,
    Chute,
    Start,
}

impl CellKind {
    pub fn blocks(self) -> bool {
        matches!(self, CellKind::Wall | CellKind::Rack)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Up,
    Down,
    Left,
    Right,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::Up, Dir::Down, Dir::Left, Dir::Right];
}

#[derive(Debug, Clone)]
pub struct Grid {
    width: usize,
    height: usize,
    annotations: Vec<Vec<(CellKind, Vec<ParamId>)>>,
}

impl Grid {
    pub(crate) fn from_cells(width: usize, height: usize, cells: &[CellDecl]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidLayout(format!("grid {width}x{height} is empty")));
        }
        let mut annotations = vec![Vec::new(); width * height];
        for c in cells {
            if c.x >= width || c.y >= height {
                return Err(Error::InvalidLayout(format!(
                    "cell ({}, {}) lies outside the {width}x{height} grid",
                    c.x, c.y
                )));
            }
            annotations[c.y * width + c.x].push((c.kind, c.param_refs.clone()));
        }
        for (i, ann) in annotations.iter().enumerate() {
            let blocked = ann.iter().any(|(k, _)| k.blocks());
            if blocked && ann.len() > 1 {
                return Err(Error::InvalidLayout(format!(
                    "cell ({}, {}) is blocked but carries other annotations",
                    i % width,
                    i / width
                )));
            }
            for (kind, refs) in ann {
                let needs_refs = matches!(kind, CellKind::Slip | CellKind::Penalty);
                if needs_refs && refs.is_empty() {
                    return Err(Error::InvalidLayout(format!(
                        "{kind:?} cell ({}, {}) must reference a parameter",
                        i % width,
                        i / width
                    )));
                }
            }
        }
        Ok(Grid {
            width,
            height,
            annotations,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, p: Pos) -> usize {
        p.y * self.width + p.x
    }

    pub fn pos(&self, index: usize) -> Pos {
        Pos::new(index % self.width, index / self.width)
    }

    pub fn contains(&self, p: Pos) -> bool {
        p.x < self.width && p.y < self.height
    }

    pub fn has(&self, p: Pos, kind: CellKind) -> bool {
        self.annotations[self.index(p)].iter().any(|(k, _)| *k == kind)
    }

    pub fn refs(&self, p: Pos, kind: CellKind) -> impl Iterator<Item = &ParamId> {
        self.annotations[self.index(p)]
            .iter()
            .filter(move |(k, _)| *k == kind)
            .flat_map(|(_, refs)| refs.iter())
    }

    pub fn is_blocked(&self, p: Pos) -> bool {
        self.annotations[self.index(p)].iter().any(|(k, _)| k.blocks())
    }

    pub fn cells_of(&self, kind: CellKind) -> impl Iterator<Item = Pos> + '_ {
        (0..self.n_cells())
            .map(|i| self.pos(i))
            .filter(move |&p| self.has(p, kind))
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.n_cells())
            .map(|i| self.pos(i))
            .filter(move |&p| !self.is_blocked(p))
    }

    /// Start cells if any are annotated, otherwise every free cell.
    pub fn start_cells(&self) -> Vec<Pos> {
        let starts: Vec<Pos> = self.cells_of(CellKind::Start).collect();
        if starts.is_empty() {
            self.free_cells().collect()
        } else {
            starts
        }
    }

    /// Intended destination of a move; blocked or off-grid moves stay put.
    pub fn target(&self, p: Pos, dir: Dir) -> Pos {
        let next = match dir {
            Dir::Up if p.y > 0 => Pos::new(p.x, p.y - 1),
            Dir::Down if p.y + 1 < self.height => Pos::new(p.x, p.y + 1),
            Dir::Left if p.x > 0 => Pos::new(p.x - 1, p.y),
            Dir::Right if p.x + 1 < self.width => Pos::new(p.x + 1, p.y),
            _ => p,
        };
        if self.is_blocked(next) {
            p
        } else {
            next
        }
    }

    /// Outcome distribution of a move. A slip leaves the agent in place.
    pub fn move_outcomes(&self, p: Pos, dir: Dir, params: &ParamAssignment) -> Vec<(Pos, f64)> {
        let target = self.target(p, dir);
        if target == p {
            return vec![(p, 1.0)];
        }
        let mut stay = 0.0;
        for id in self.refs(p, CellKind::Slip) {
            if let Some(ParamValue::Categorical(dist)) = params.get(id.as_str()) {
                // independent slip sources compound
                stay = 1.0 - (1.0 - stay) * (1.0 - dist[0]);
            }
        }
        let mut out = Vec::with_capacity(2);
        if stay > 0.0 {
            out.push((p, stay));
        }
        if stay < 1.0 {
            out.push((target, 1.0 - stay));
        }
        out
    }

    /// Sum of penalty rewards attached to a cell.
    pub fn penalty(&self, p: Pos, params: &ParamAssignment) -> f64 {
        self.refs(p, CellKind::Penalty)
            .filter_map(|id| params.scalar(id.as_str()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(x: usize, y: usize, kind: CellKind, refs: &[&str]) -> CellDecl {
        CellDecl {
            x,
            y,
            kind,
            param_refs: refs.iter().map(|r| ParamId::new(*r)).collect(),
        }
    }

    #[test]
    fn walls_and_edges_block_moves() {
        let g = Grid::from_cells(3, 2, &[cell(1, 0, CellKind::Wall, &[])]).unwrap();
        assert_eq!(g.target(Pos::new(0, 0), Dir::Right), Pos::new(0, 0));
        assert_eq!(g.target(Pos::new(0, 0), Dir::Up), Pos::new(0, 0));
        assert_eq!(g.target(Pos::new(0, 0), Dir::Down), Pos::new(0, 1));
        assert_eq!(g.target(Pos::new(2, 1), Dir::Right), Pos::new(2, 1));
    }

    #[test]
    fn slip_outcomes_follow_parameter() {
        let g = Grid::from_cells(2, 1, &[cell(0, 0, CellKind::Slip, &["slip"])]).unwrap();
        let mut params = ParamAssignment::default();
        params.set(ParamId::new("slip"), ParamValue::Categorical(vec![0.25, 0.75]));
        let out = g.move_outcomes(Pos::new(0, 0), Dir::Right, &params);
        assert_eq!(out, vec![(Pos::new(0, 0), 0.25), (Pos::new(1, 0), 0.75)]);
        // blocked move never slips
        assert_eq!(
            g.move_outcomes(Pos::new(0, 0), Dir::Left, &params),
            vec![(Pos::new(0, 0), 1.0)]
        );
    }

    #[test]
    fn rejects_out_of_grid_and_overlapping_blocks() {
        assert!(Grid::from_cells(2, 2, &[cell(2, 0, CellKind::Rack, &[])]).is_err());
        assert!(Grid::from_cells(
            2,
            2,
            &[cell(0, 0, CellKind::Rack, &[]), cell(0, 0, CellKind::Start, &[])]
        )
        .is_err());
        assert!(Grid::from_cells(2, 2, &[cell(0, 0, CellKind::Slip, &[])]).is_err());
    }
}

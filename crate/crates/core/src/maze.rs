//! Deterministic 2D point-mass maze world.
//!
//! The agent is a double integrator on a grid of square cells. Cell `(row, col)`
//! covers `x ∈ [col·cs, (col+1)·cs)` and `y ∈ [row·cs, (row+1)·cs)`, so the world
//! rectangle starts at the origin. Row 0 is the first line of a text layout.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

/// Dimension of a state vector `[x, y, vx, vy]`.
pub const STATE_DIM: usize = 4;
/// Dimension of an action vector `[ax, ay]`.
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub pos: Vec2,
    pub vel: Vec2,
}

impl State {
    pub fn at_rest(pos: Vec2) -> Self {
        State { pos, vel: [0.0; 2] }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        State {
            pos: [a[0], a[1]],
            vel: [a[2], a[3]],
        }
    }

    pub fn from_f32(a: &[f32]) -> Self {
        State {
            pos: [a[0] as f64, a[1] as f64],
            vel: [a[2] as f64, a[3] as f64],
        }
    }

    pub fn to_f32(&self) -> [f32; STATE_DIM] {
        let a = self.to_array();
        [a[0] as f32, a[1] as f32, a[2] as f32, a[3] as f32]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub acc: Vec2,
}

impl Action {
    pub fn new(ax: f64, ay: f64) -> Self {
        Action { acc: [ax, ay] }
    }

    pub fn zero() -> Self {
        Action::default()
    }
}

/// Integration and clamping constants shared by every layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dynamics {
    pub dt: f64,
    pub v_max: f64,
    pub a_max: f64,
    /// Collision back-off, as a fraction of the cell width.
    pub backoff: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Dynamics {
            dt: 0.02,
            v_max: 5.0,
            a_max: 40.0,
            backoff: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MazeSpec {
    pub name: String,
    rows: usize,
    cols: usize,
    walls: Vec<bool>,
    pub cell_size: f64,
    pub dynamics: Dynamics,
}

/// Which cell face a segment crossed when it entered a wall.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Face {
    X,
    Y,
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    face: Face,
}

const UMAZE: &str = "\
#####
#...#
###.#
#...#
#####";

const MEDIUM: &str = "\
########
#..##..#
#..#...#
##...###
#..#...#
#.#..#.#
#...#..#
########";

const LARGE: &str = "\
############
#....#.....#
#.##.#.#.#.#
#......#...#
#.####.###.#
#..#.#.....#
##.#.#.#.###
#..#...#...#
############";

impl MazeSpec {
    pub fn new(
        name: impl Into<String>,
        grid: Vec<Vec<bool>>,
        cell_size: f64,
        dynamics: Dynamics,
    ) -> Result<Self> {
        let name = name.into();
        let rows = grid.len();
        if rows < 3 {
            return Err(Error::InvalidMaze(format!("{name}: needs at least 3 rows")));
        }
        let cols = grid[0].len();
        if cols < 3 {
            return Err(Error::InvalidMaze(format!("{name}: needs at least 3 columns")));
        }
        if grid.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidMaze(format!("{name}: ragged rows")));
        }
        for (r, row) in grid.iter().enumerate() {
            for (c, &wall) in row.iter().enumerate() {
                let border = r == 0 || c == 0 || r + 1 == rows || c + 1 == cols;
                if border && !wall {
                    return Err(Error::InvalidMaze(format!(
                        "{name}: border cell ({r}, {c}) is not a wall"
                    )));
                }
            }
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(cell_size)
            || !positive(dynamics.dt)
            || !positive(dynamics.v_max)
            || !positive(dynamics.a_max)
        {
            return Err(Error::InvalidMaze(format!(
                "{name}: cell_size, dt, v_max and a_max must be positive"
            )));
        }
        if !(dynamics.backoff >= 0.0 && dynamics.backoff < 0.5) {
            return Err(Error::InvalidMaze(format!("{name}: backoff out of range")));
        }
        Ok(MazeSpec {
            name,
            rows,
            cols,
            walls: grid.into_iter().flatten().collect(),
            cell_size,
            dynamics,
        })
    }

    /// Parses a `#`/`.` text grid. Blank lines are ignored.
    pub fn parse(name: &str, text: &str, cell_size: f64, dynamics: Dynamics) -> Result<Self> {
        let mut grid = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let row = line
                .chars()
                .map(|ch| match ch {
                    '#' => Ok(true),
                    '.' => Ok(false),
                    other => Err(Error::InvalidMaze(format!(
                        "{name}: unexpected character {other:?} on line {}",
                        lineno + 1
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            grid.push(row);
        }
        MazeSpec::new(name, grid, cell_size, dynamics)
    }

    pub fn from_file(path: &Path, cell_size: f64, dynamics: Dynamics) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".to_string());
        MazeSpec::parse(&name, &text, cell_size, dynamics)
    }

    /// Built-in layouts: the classic U, medium and large mazes, each block
    /// upsampled so that shortest-step distances land in the horizon regimes
    /// of their fixed-horizon baselines.
    pub fn builtin(name: &str) -> Result<Self> {
        let (layout, factor) = match name {
            "umaze" => (UMAZE, 6),
            "medium" => (MEDIUM, 6),
            "large" => (LARGE, 5),
            other => return Err(Error::UnknownMaze(other.to_string())),
        };
        let coarse = MazeSpec::parse(name, layout, 1.0, Dynamics::default())?;
        let grid = upsample(&coarse, factor);
        MazeSpec::new(name, grid, 0.4, Dynamics::default())
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["umaze", "medium", "large"]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_wall(&self, row: usize, col: usize) -> bool {
        self.walls[row * self.cols + col]
    }

    /// World rectangle as `(min, max)` corners.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        (
            [0.0, 0.0],
            [
                self.cols as f64 * self.cell_size,
                self.rows as f64 * self.cell_size,
            ],
        )
    }

    fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let c = (p[0] / self.cell_size).floor();
        let r = (p[1] / self.cell_size).floor();
        if !(c >= 0.0 && r >= 0.0) || c as usize >= self.cols || r as usize >= self.rows {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// True when `p` lies inside the bounds and inside a free cell.
    pub fn is_free(&self, p: Vec2) -> bool {
        matches!(self.cell_of(p), Some((r, c)) if !self.is_wall(r, c))
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if !self.is_wall(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Grid text in the `#`/`.` format accepted by [`MazeSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity((self.cols + 1) * self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(if self.is_wall(r, c) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }

    /// Walks the grid cells along `p0 → p1` and reports the first wall entry.
    fn first_hit(&self, p0: Vec2, p1: Vec2) -> Option<Hit> {
        let cs = self.cell_size;
        let (mut row, mut col) = match self.cell_of(p0) {
            Some(rc) => rc,
            None => return Some(Hit { t: 0.0, face: Face::X }),
        };
        if self.is_wall(row, col) {
            return Some(Hit { t: 0.0, face: Face::X });
        }
        let d = [p1[0] - p0[0], p1[1] - p0[1]];
        let axis = |delta: f64, start: f64, idx: usize| -> (i64, f64, f64) {
            if delta > 0.0 {
                let next = (idx + 1) as f64 * cs;
                (1, (next - start) / delta, cs / delta)
            } else if delta < 0.0 {
                let next = idx as f64 * cs;
                (-1, (next - start) / delta, -cs / delta)
            } else {
                (0, f64::INFINITY, f64::INFINITY)
            }
        };
        let (step_x, mut t_max_x, t_delta_x) = axis(d[0], p0[0], col);
        let (step_y, mut t_max_y, t_delta_y) = axis(d[1], p0[1], row);
        loop {
            let (t, face) = if t_max_x < t_max_y {
                let t = t_max_x;
                t_max_x += t_delta_x;
                col = (col as i64 + step_x) as usize;
                (t, Face::X)
            } else {
                let t = t_max_y;
                t_max_y += t_delta_y;
                row = (row as i64 + step_y) as usize;
                (t, Face::Y)
            };
            if t > 1.0 {
                return None;
            }
            if row >= self.rows || col >= self.cols || self.is_wall(row, col) {
                return Some(Hit { t, face });
            }
        }
    }

    /// True iff the segment `p0 → p1` enters any wall cell.
    pub fn segment_collides(&self, p0: Vec2, p1: Vec2) -> bool {
        self.first_hit(p0, p1).is_some()
    }

    /// One semi-implicit Euler step with clamping and wall clipping.
    pub fn step(&self, s: &State, a: &Action) -> State {
        let dyn_ = &self.dynamics;
        let mut vel = [0.0; 2];
        let mut pos = [0.0; 2];
        for i in 0..2 {
            let acc = a.acc[i].clamp(-dyn_.a_max, dyn_.a_max);
            let acc = if acc.is_nan() { 0.0 } else { acc };
            vel[i] = (s.vel[i] + acc * dyn_.dt).clamp(-dyn_.v_max, dyn_.v_max);
            pos[i] = s.pos[i] + vel[i] * dyn_.dt;
        }
        match self.first_hit(s.pos, pos) {
            None => State { pos, vel },
            Some(hit) => {
                let axis = match hit.face {
                    Face::X => 0,
                    Face::Y => 1,
                };
                let margin = dyn_.backoff * self.cell_size;
                let mut clipped = [
                    s.pos[0] + hit.t * (pos[0] - s.pos[0]),
                    s.pos[1] + hit.t * (pos[1] - s.pos[1]),
                ];
                let dir = (pos[axis] - s.pos[axis]).signum();
                clipped[axis] -= dir * margin;
                vel[axis] = 0.0;
                if self.is_free(clipped) && !self.segment_collides(s.pos, clipped) {
                    State { pos: clipped, vel }
                } else {
                    // Grazing a corner: stay put.
                    State {
                        pos: s.pos,
                        vel: [0.0; 2],
                    }
                }
            }
        }
    }

    /// Uniform position over free-cell interiors shrunk by `clearance`
    /// (fraction of a cell) on every side, at rest.
    pub fn sample_free_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<State> {
        self.sample_free_state_with(rng, 0.1)
    }

    pub fn sample_free_state_with<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        clearance: f64,
    ) -> Result<State> {
        let free = self.free_cells();
        if free.is_empty() {
            return Err(Error::NoFreeCell(self.name.clone()));
        }
        let (r, c) = free[rng.random_range(0..free.len())];
        let cs = self.cell_size;
        let m = clearance.clamp(0.0, 0.49) * cs;
        let x = c as f64 * cs + m + rng.random::<f64>() * (cs - 2.0 * m);
        let y = r as f64 * cs + m + rng.random::<f64>() * (cs - 2.0 * m);
        Ok(State::at_rest([x, y]))
    }
}

fn upsample(coarse: &MazeSpec, factor: usize) -> Vec<Vec<bool>> {
    (0..coarse.rows * factor)
        .map(|r| {
            (0..coarse.cols * factor)
                .map(|c| coarse.is_wall(r / factor, c / factor))
                .collect()
        })
        .collect()
}

/// Goal region: an ℓ∞ ball of radius `eps` in normalized units over the
/// masked state dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub goal: State,
    pub eps: f64,
    pub mask: [bool; STATE_DIM],
}

impl GoalSpec {
    pub const POSITION_MASK: [bool; STATE_DIM] = [true, true, false, false];

    pub fn new(goal_pos: Vec2, eps: f64) -> Self {
        GoalSpec {
            goal: State::at_rest(goal_pos),
            eps,
            mask: Self::POSITION_MASK,
        }
    }
}

/// Masked ℓ∞ distance between two states in normalized units.
pub fn normalized_gap(a: &State, b: &State, mask: &[bool; STATE_DIM], norm: &Normalizer) -> f64 {
    let na = norm.apply(a);
    let nb = norm.apply(b);
    (0..STATE_DIM)
        .filter(|&i| mask[i])
        .map(|i| (na[i] - nb[i]).abs())
        .fold(0.0, f64::max)
}

pub fn in_goal(s: &State, gs: &GoalSpec, norm: &Normalizer) -> bool {
    normalized_gap(s, &gs.goal, &gs.mask, norm) <= gs.eps
}

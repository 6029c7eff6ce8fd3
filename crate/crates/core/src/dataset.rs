//! Offline behavior data: a noisy waypoint follower, state normalization,
//! random-length crops and the binary dataset container.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maze::{
    in_goal, Action, GoalSpec, MazeSpec, State, Vec2, ACTION_DIM, STATE_DIM,
};
use crate::rng;

pub type StateRow = [f32; STATE_DIM];
pub type ActionRow = [f32; ACTION_DIM];

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub states: Vec<StateRow>,
    pub actions: Vec<ActionRow>,
    pub maze_name: String,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Replays the recorded actions from the first state and returns the
    /// largest absolute deviation from the recorded states.
    pub fn replay_error(&self, spec: &MazeSpec) -> f64 {
        let mut worst = 0.0f64;
        for (t, a) in self.actions.iter().enumerate() {
            let s = State::from_f32(&self.states[t]);
            let next = quantize(&spec.step(&s, &Action::new(a[0] as f64, a[1] as f64)));
            for (x, y) in next.iter().zip(self.states[t + 1].iter()) {
                worst = worst.max((*x as f64 - *y as f64).abs());
            }
        }
        worst
    }
}

fn quantize(s: &State) -> StateRow {
    s.to_f32()
}

/// Affine map of world states into the unit box: positions by the maze
/// bounds, velocities from `[-v_max, v_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub offset: [f64; STATE_DIM],
    pub scale: [f64; STATE_DIM],
}

impl Normalizer {
    pub fn from_spec(spec: &MazeSpec) -> Self {
        let (lo, hi) = spec.bounds();
        let v = spec.dynamics.v_max;
        let mut n = Normalizer {
            offset: [lo[0], lo[1], -v, -v],
            scale: [hi[0] - lo[0], hi[1] - lo[1], 2.0 * v, 2.0 * v],
        };
        for s in n.scale.iter_mut() {
            if !(s.is_finite() && *s > 0.0) {
                *s = 1.0;
            }
        }
        n
    }

    /// The map only depends on the layout; episodes are accepted for
    /// interface symmetry and must be non-empty.
    pub fn fit(spec: &MazeSpec, episodes: &[Episode]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Config("cannot fit a normalizer on zero episodes".into()));
        }
        Ok(Normalizer::from_spec(spec))
    }

    pub fn apply(&self, s: &State) -> [f64; STATE_DIM] {
        let a = s.to_array();
        std::array::from_fn(|i| (a[i] - self.offset[i]) / self.scale[i])
    }

    pub fn invert(&self, n: &[f64; STATE_DIM]) -> State {
        State::from_array(std::array::from_fn(|i| n[i] * self.scale[i] + self.offset[i]))
    }

    pub fn apply_row(&self, row: &StateRow) -> StateRow {
        std::array::from_fn(|i| ((row[i] as f64 - self.offset[i]) / self.scale[i]) as f32)
    }

    pub fn invert_row(&self, row: &[f32]) -> State {
        self.invert(&std::array::from_fn(|i| row[i] as f64))
    }

    pub fn apply_f32(&self, s: &State) -> StateRow {
        let n = self.apply(s);
        std::array::from_fn(|i| n[i] as f32)
    }

    /// Scales a world-space position tolerance into normalized units
    /// (smallest axis).
    pub fn position_scale(&self) -> f64 {
        self.scale[0].min(self.scale[1])
    }
}

/// Knobs of the suboptimal behavior policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyCfg {
    /// Ornstein–Uhlenbeck mean reversion per step.
    pub ou_theta: f64,
    /// OU noise scale as a fraction of `a_max`.
    pub ou_sigma_frac: f64,
    /// Per-step probability of starting an actuation pause.
    pub pause_prob: f64,
    pub pause_min: usize,
    pub pause_max: usize,
    /// Per-episode probability of routing one goal leg through a random
    /// detour cell.
    pub detour_prob: f64,
    /// Goals visited in sequence; the episode ends on entering the last one.
    pub goals_per_episode: usize,
    pub episode_cap: usize,
    /// Goal tolerance (normalized ℓ∞ over position) that ends an episode.
    pub goal_eps: f64,
    /// Cruise speed as a fraction of `v_max`.
    pub cruise_frac: f64,
    /// Clearance (world units) required for line-of-sight shortcuts.
    pub clearance: f64,
    /// Velocity-tracking gain of the follower (1/s).
    pub velocity_gain: f64,
}

impl Default for PolicyCfg {
    fn default() -> Self {
        PolicyCfg {
            ou_theta: 0.15,
            ou_sigma_frac: 0.3,
            pause_prob: 0.02,
            pause_min: 5,
            pause_max: 20,
            detour_prob: 0.3,
            goals_per_episode: 4,
            episode_cap: 800,
            goal_eps: 0.04,
            cruise_frac: 1.0,
            clearance: 0.15,
            velocity_gain: 25.0,
        }
    }
}

impl PolicyCfg {
    /// Noise-free, pause-free, detour-free follower.
    pub fn clean() -> Self {
        PolicyCfg {
            ou_sigma_frac: 0.0,
            pause_prob: 0.0,
            detour_prob: 0.0,
            ..PolicyCfg::default()
        }
    }
}

/// A* over free grid cells with 8-connectivity and no corner cutting.
pub fn grid_path(spec: &MazeSpec, from: (usize, usize), to: (usize, usize)) -> Option<Vec<(usize, usize)>> {
    let (rows, cols) = (spec.rows(), spec.cols());
    if spec.is_wall(from.0, from.1) || spec.is_wall(to.0, to.1) {
        return None;
    }
    let idx = |r: usize, c: usize| r * cols + c;
    let h = |r: usize, c: usize| {
        let dr = r.abs_diff(to.0) as u64;
        let dc = c.abs_diff(to.1) as u64;
        1000 * dr.max(dc) + 414 * dr.min(dc)
    };
    let mut best = vec![u64::MAX; rows * cols];
    let mut parent = vec![usize::MAX; rows * cols];
    let mut heap = BinaryHeap::new();
    best[idx(from.0, from.1)] = 0;
    heap.push(Reverse((h(from.0, from.1), 0u64, from.0, from.1)));
    while let Some(Reverse((_, g, r, c))) = heap.pop() {
        if (r, c) == to {
            let mut path = vec![(r, c)];
            let mut cur = idx(r, c);
            while parent[cur] != usize::MAX {
                cur = parent[cur];
                path.push((cur / cols, cur % cols));
            }
            path.reverse();
            return Some(path);
        }
        if g > best[idx(r, c)] {
            continue;
        }
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let nr = r as i64 + dr;
                let nc = c as i64 + dc;
                if nr < 0 || nc < 0 || nr as usize >= rows || nc as usize >= cols {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if spec.is_wall(nr, nc) {
                    continue;
                }
                let diagonal = dr != 0 && dc != 0;
                if diagonal && (spec.is_wall(r, nc) || spec.is_wall(nr, c)) {
                    continue;
                }
                let ng = g + if diagonal { 1414 } else { 1000 };
                if ng < best[idx(nr, nc)] {
                    best[idx(nr, nc)] = ng;
                    parent[idx(nr, nc)] = idx(r, c);
                    heap.push(Reverse((ng + h(nr, nc), ng, nr, nc)));
                }
            }
        }
    }
    None
}

fn cell_of(spec: &MazeSpec, p: Vec2) -> (usize, usize) {
    (
        (p[1] / spec.cell_size).floor() as usize,
        (p[0] / spec.cell_size).floor() as usize,
    )
}

fn cell_centre(spec: &MazeSpec, rc: (usize, usize)) -> Vec2 {
    [
        (rc.1 as f64 + 0.5) * spec.cell_size,
        (rc.0 as f64 + 0.5) * spec.cell_size,
    ]
}

/// Waypoint polyline from `from` to `to` through grid-cell centres.
fn route(spec: &MazeSpec, from: Vec2, to: Vec2) -> Option<Vec<Vec2>> {
    let cells = grid_path(spec, cell_of(spec, from), cell_of(spec, to))?;
    let mut pts: Vec<Vec2> = cells.iter().map(|&rc| cell_centre(spec, rc)).collect();
    if let Some(last) = pts.last_mut() {
        *last = to;
    }
    if pts.len() > 1 {
        pts[0] = from;
    } else {
        pts.insert(0, from);
    }
    Some(pts)
}

/// Segment test widened by `clearance` on both sides.
fn visible(spec: &MazeSpec, a: Vec2, b: Vec2, clearance: f64) -> bool {
    if spec.segment_collides(a, b) {
        return false;
    }
    let d = [b[0] - a[0], b[1] - a[1]];
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if n < 1e-12 || clearance <= 0.0 {
        return true;
    }
    let off = [-d[1] / n * clearance, d[0] / n * clearance];
    for sgn in [-1.0, 1.0] {
        let a2 = [a[0] + sgn * off[0], a[1] + sgn * off[1]];
        let b2 = [b[0] + sgn * off[0], b[1] + sgn * off[1]];
        if !spec.is_free(a2) || !spec.is_free(b2) || spec.segment_collides(a2, b2) {
            return false;
        }
    }
    true
}

struct Follower<'a> {
    spec: &'a MazeSpec,
    cfg: &'a PolicyCfg,
    legs: Vec<Vec<Vec2>>,
    leg: usize,
    cursor: usize,
}

impl Follower<'_> {
    const LOOKAHEAD: usize = 24;

    fn command(&mut self, pos: Vec2) -> Vec2 {
        let dyn_ = self.spec.dynamics;
        let last_leg = self.leg + 1 == self.legs.len();
        let path = &self.legs[self.leg];
        // Leg switch once the intermediate endpoint is close.
        if !last_leg {
            let end = *path.last().unwrap();
            if dist(pos, end) < 0.5 * self.spec.cell_size.max(0.3) {
                self.leg += 1;
                self.cursor = 0;
                return self.command(pos);
            }
        }
        while self.cursor + 1 < path.len() && dist(pos, path[self.cursor]) < 0.75 * self.spec.cell_size {
            self.cursor += 1;
        }
        let hi = (self.cursor + Self::LOOKAHEAD).min(path.len() - 1);
        let mut target = self.cursor;
        for j in self.cursor + 1..=hi {
            if visible(self.spec, pos, path[j], self.cfg.clearance) {
                target = j;
            } else {
                break;
            }
        }
        self.cursor = target;
        let tp = path[target];
        let d = [tp[0] - pos[0], tp[1] - pos[1]];
        let linf = d[0].abs().max(d[1].abs());
        if linf < 1e-9 {
            return [0.0, 0.0];
        }
        let cruise = self.cfg.cruise_frac * dyn_.v_max;
        [d[0] / linf * cruise, d[1] / linf * cruise]
    }
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Rolls out one behavior episode from a random start through
/// `goals_per_episode` random goals.
pub fn generate_behavior_episode<R: Rng + ?Sized>(
    spec: &MazeSpec,
    rng: &mut R,
    cfg: &PolicyCfg,
) -> Result<Episode> {
    let norm = Normalizer::from_spec(spec);
    let start = spec.sample_free_state(rng)?;
    let mut goals = Vec::with_capacity(cfg.goals_per_episode.max(1));
    let mut from = start.pos;
    while goals.len() < cfg.goals_per_episode.max(1) {
        let g = spec.sample_free_state(rng)?;
        if !in_goal(&State::at_rest(from), &GoalSpec::new(g.pos, cfg.goal_eps), &norm) {
            goals.push(g.pos);
            from = g.pos;
        }
    }
    generate_episode_through(spec, rng, cfg, start, &goals)
}

/// Rolls out the behavior follower from `start` towards `goal`.
pub fn generate_episode_between<R: Rng + ?Sized>(
    spec: &MazeSpec,
    rng: &mut R,
    cfg: &PolicyCfg,
    start: State,
    goal: Vec2,
) -> Result<Episode> {
    generate_episode_through(spec, rng, cfg, start, &[goal])
}

fn goal_legs<R: Rng + ?Sized>(
    spec: &MazeSpec,
    rng: &mut R,
    from: Vec2,
    goal: Vec2,
    detour: bool,
) -> Result<Vec<Vec<Vec2>>> {
    if detour {
        let via = spec.sample_free_state(rng)?.pos;
        if let (Some(a), Some(b)) = (route(spec, from, via), route(spec, via, goal)) {
            return Ok(vec![a, b]);
        }
    }
    let direct = route(spec, from, goal)
        .ok_or_else(|| Error::InvalidMaze(format!("{}: goal unreachable", spec.name)))?;
    Ok(vec![direct])
}

/// Rolls out the behavior follower from `start` through `goals` in order,
/// stopping on entry into the last goal region or at the cap.
pub fn generate_episode_through<R: Rng + ?Sized>(
    spec: &MazeSpec,
    rng: &mut R,
    cfg: &PolicyCfg,
    start: State,
    goals: &[Vec2],
) -> Result<Episode> {
    if goals.is_empty() {
        return Err(Error::Config("behavior episode needs at least one goal".into()));
    }
    let norm = Normalizer::from_spec(spec);
    let detour_at = (rng.random::<f64>() < cfg.detour_prob).then(|| rng.random_range(0..goals.len()));
    let mut current = 0;
    let mut gs = GoalSpec::new(goals[0], cfg.goal_eps);
    let legs = goal_legs(spec, rng, start.pos, goals[0], detour_at == Some(0))?;
    let mut follower = Follower {
        spec,
        cfg,
        legs,
        leg: 0,
        cursor: 0,
    };
    let dyn_ = spec.dynamics;
    let sigma = cfg.ou_sigma_frac * dyn_.a_max;
    let mut noise = [0.0f64; 2];
    let mut pause_left = 0usize;

    let mut s = State::from_f32(&quantize(&start));
    let mut states = vec![quantize(&s)];
    let mut actions = Vec::new();
    while states.len() < cfg.episode_cap.max(2) {
        for n in noise.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *n += -cfg.ou_theta * *n + sigma * z;
        }
        if pause_left == 0 && cfg.pause_prob > 0.0 && rng.random::<f64>() < cfg.pause_prob {
            pause_left = rng.random_range(cfg.pause_min..=cfg.pause_max.max(cfg.pause_min));
        }
        let acc = if pause_left > 0 {
            pause_left -= 1;
            [0.0, 0.0]
        } else {
            let v_des = follower.command(s.pos);
            std::array::from_fn(|i| {
                (cfg.velocity_gain * (v_des[i] - s.vel[i]) + noise[i])
                    .clamp(-dyn_.a_max, dyn_.a_max)
            })
        };
        let a = [acc[0] as f32, acc[1] as f32];
        let next = spec.step(&s, &Action::new(a[0] as f64, a[1] as f64));
        let row = quantize(&next);
        s = State::from_f32(&row);
        states.push(row);
        actions.push(a);
        if in_goal(&s, &gs, &norm) {
            current += 1;
            if current == goals.len() {
                break;
            }
            gs = GoalSpec::new(goals[current], cfg.goal_eps);
            follower.legs = goal_legs(spec, rng, s.pos, goals[current], detour_at == Some(current))?;
            follower.leg = 0;
            follower.cursor = 0;
        }
    }
    Ok(Episode {
        states,
        actions,
        maze_name: spec.name.clone(),
    })
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenCfg {
    pub episodes: usize,
    pub seed: u64,
    pub policy: PolicyCfg,
}

impl Default for GenCfg {
    fn default() -> Self {
        GenCfg {
            episodes: 2000,
            seed: 0,
            policy: PolicyCfg::default(),
        }
    }
}

/// Generates `cfg.episodes` episodes, each from its own random stream.
pub fn generate_dataset(spec: &MazeSpec, cfg: &GenCfg) -> Result<Vec<Episode>> {
    (0..cfg.episodes)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, i as u64);
            generate_behavior_episode(spec, &mut r, &cfg.policy)
        })
        .collect()
}

/// Fraction of episodes that ended inside their goal region rather than at
/// the cap.
pub fn completion_ratio(episodes: &[Episode], cap: usize) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().filter(|e| e.len() < cap).count() as f64 / episodes.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubTrajectory {
    pub episode: usize,
    pub start: usize,
    pub states: Vec<StateRow>,
}

impl SubTrajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Draws `(start, len)` with `len ~ U{l_min, min(T, t_max)}` and
/// `start ~ U{0, T - len}`.
pub fn crop_window<R: Rng + ?Sized>(
    total: usize,
    l_min: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if total < l_min || l_min == 0 {
        return Err(Error::EpisodeTooShort {
            len: total,
            min: l_min,
        });
    }
    let hi = total.min(t_max).max(l_min);
    let len = rng.random_range(l_min..=hi);
    let start = rng.random_range(0..=total - len);
    Ok((start, len))
}

pub fn crop_random<R: Rng + ?Sized>(
    episode: usize,
    states: &[StateRow],
    l_min: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<SubTrajectory> {
    let (start, len) = crop_window(states.len(), l_min, t_max, rng)?;
    Ok(SubTrajectory {
        episode,
        start,
        states: states[start..start + len].to_vec(),
    })
}

const DATASET_MAGIC: &[u8; 4] = b"VHDS";
const DATASET_VERSION: u32 = 1;

/// Serializes episodes: header (magic, version, d, m, count, per-episode
/// offset/length/name) followed by row-major little-endian f32 payloads.
pub fn encode_dataset(episodes: &[Episode]) -> Vec<u8> {
    let mut header_len = 4 + 4 * 4;
    for e in episodes {
        header_len += 8 + 4 + 2 + e.maze_name.len();
    }
    let mut out = Vec::with_capacity(header_len);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(STATE_DIM as u32).to_le_bytes());
    out.extend_from_slice(&(ACTION_DIM as u32).to_le_bytes());
    out.extend_from_slice(&(episodes.len() as u32).to_le_bytes());
    let mut offset = header_len as u64;
    for e in episodes {
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(e.len() as u32).to_le_bytes());
        out.extend_from_slice(&(e.maze_name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.maze_name.as_bytes());
        offset += payload_len(e.len()) as u64;
    }
    for e in episodes {
        for row in &e.states {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for row in &e.actions {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn payload_len(t: usize) -> usize {
    4 * (t * STATE_DIM + t.saturating_sub(1) * ACTION_DIM)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("unexpected end of file reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Episode>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic (not a dataset file)".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let d = cur.u32("state dimension")? as usize;
    let m = cur.u32("action dimension")? as usize;
    if d != STATE_DIM || m != ACTION_DIM {
        return Err(Error::Format {
            offset: 8,
            detail: format!("expected d={STATE_DIM}, m={ACTION_DIM}, found d={d}, m={m}"),
        });
    }
    let count = cur.u32("episode count")? as usize;
    let mut index = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let offset = cur.u64(&format!("offset of episode {i}"))?;
        let len = cur.u32(&format!("length of episode {i}"))? as usize;
        let name_len = cur.u16(&format!("name length of episode {i}"))? as usize;
        let at = cur.pos as u64;
        let name = std::str::from_utf8(cur.take(name_len, "maze name")?)
            .map_err(|_| Error::Format {
                offset: at,
                detail: format!("episode {i} maze name is not UTF-8"),
            })?
            .to_string();
        if len < 1 {
            return Err(Error::Format {
                offset: at,
                detail: format!("episode {i} has no states"),
            });
        }
        index.push((offset, len, name));
    }
    let mut episodes = Vec::with_capacity(index.len());
    for (i, (offset, len, name)) in index.into_iter().enumerate() {
        let start = offset as usize;
        let end = start.checked_add(payload_len(len));
        let Some(end) = end.filter(|&e| e <= buf.len()) else {
            return Err(Error::TruncatedEpisode {
                episode: i,
                offset: buf.len().min(start) as u64,
            });
        };
        let mut floats = buf[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let states = (0..len)
            .map(|_| std::array::from_fn(|_| floats.next().unwrap()))
            .collect();
        let actions = (0..len - 1)
            .map(|_| std::array::from_fn(|_| floats.next().unwrap()))
            .collect();
        episodes.push(Episode {
            states,
            actions,
            maze_name: name,
        });
    }
    Ok(episodes)
}

pub fn write_dataset(path: &Path, episodes: &[Episode]) -> Result<()> {
    let bytes = encode_dataset(episodes);
    let mut f = std::fs::File::create(path).map_err(|e| Error::path(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::path(path, e))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Episode>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::path(path, e))?;
    decode_dataset(&buf)
}

/// Episodes mapped into the unit box, ready for training.
#[derive(Clone, Debug)]
pub struct NormalizedDataset {
    pub episodes: Vec<Vec<StateRow>>,
}

impl NormalizedDataset {
    pub fn new(episodes: &[Episode], norm: &Normalizer) -> Self {
        NormalizedDataset {
            episodes: episodes
                .iter()
                .map(|e| e.states.iter().map(|r| norm.apply_row(r)).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn total_states(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn umaze() -> MazeSpec {
        MazeSpec::builtin("umaze").unwrap()
    }

    #[test]
    fn normalizer_endpoints_and_inverse() {
        let m = umaze();
        let n = Normalizer::from_spec(&m);
        let (lo, _) = m.bounds();
        let s = State::at_rest(lo);
        assert_eq!(&n.apply(&s)[..2], &[0.0, 0.0]);
        let fast = State {
            pos: [1.0, 1.0],
            vel: [m.dynamics.v_max, -m.dynamics.v_max],
        };
        let a = n.apply(&fast);
        assert_eq!(a[2], 1.0);
        assert_eq!(a[3], 0.0);
        let mut r = seeded(5);
        for _ in 0..10_000 {
            let s = State {
                pos: [r.random_range(0.0..12.0), r.random_range(0.0..12.0)],
                vel: [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)],
            };
            let back = n.invert(&n.apply(&s));
            for (x, y) in back.to_array().iter().zip(s.to_array().iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert!(Normalizer::fit(&m, &[]).is_err());
    }

    #[test]
    fn episodes_replay_exactly_and_stay_free() {
        let m = umaze();
        let mut r = seeded(1);
        for _ in 0..30 {
            let ep = generate_behavior_episode(&m, &mut r, &PolicyCfg::default()).unwrap();
            assert!(ep.len() >= 2);
            assert_eq!(ep.actions.len(), ep.len() - 1);
            assert!(ep.replay_error(&m) <= 1e-9);
            for s in &ep.states {
                assert!(m.is_free([s[0] as f64, s[1] as f64]));
            }
        }
    }

    #[test]
    fn clean_follower_between_adjacent_cells_is_short() {
        let m = umaze();
        let mut r = seeded(2);
        let start = State::at_rest([3.0, 3.0]);
        let ep = generate_episode_between(&m, &mut r, &PolicyCfg::clean(), start, [4.0, 3.0])
            .unwrap();
        // 1 unit at ≤ 0.1 per step, accelerating from rest; goal tolerance
        // 0.48 units.
        assert!(ep.len() < 30, "len {}", ep.len());
        let last = ep.states.last().unwrap();
        assert!((last[0] as f64 - 4.0).abs() <= 0.04 * 12.0 + 1e-6);
    }

    #[test]
    fn capped_episode_is_returned() {
        let m = umaze();
        let cfg = PolicyCfg {
            episode_cap: 5,
            ..PolicyCfg::clean()
        };
        let mut r = seeded(3);
        let ep = generate_episode_between(&m, &mut r, &cfg, State::at_rest([3.0, 3.0]), [3.0, 8.4])
            .unwrap();
        assert_eq!(ep.len(), 5);
    }

    #[test]
    fn crop_bounds_and_degenerate_case() {
        let mut r = seeded(4);
        for _ in 0..1000 {
            let (i, l) = crop_window(300, 32, 128, &mut r).unwrap();
            assert!((32..=128).contains(&l) && i + l <= 300);
        }
        assert_eq!(crop_window(32, 32, 128, &mut r).unwrap(), (0, 32));
        assert!(matches!(
            crop_window(10, 32, 128, &mut r),
            Err(Error::EpisodeTooShort { len: 10, min: 32 })
        ));
        let states: Vec<StateRow> = (0..300).map(|i| [i as f32, 0.0, 0.0, 0.0]).collect();
        let sub = crop_random(7, &states, 32, 128, &mut r).unwrap();
        assert_eq!(sub.states[0][0] as usize, sub.start);
        assert_eq!(sub.episode, 7);
    }

    #[test]
    fn crop_lengths_are_uniform() {
        let mut r = seeded(9);
        let (lo, hi) = (32usize, 128usize);
        let n = 100_000usize;
        let mut counts = vec![0usize; hi - lo + 1];
        for _ in 0..n {
            let (_, l) = crop_window(300, lo, hi, &mut r).unwrap();
            counts[l - lo] += 1;
        }
        let p = 1.0 / counts.len() as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 4.0 * sigma);
        }
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let m = umaze();
        let cfg = GenCfg {
            episodes: 100,
            seed: 3,
            policy: PolicyCfg::default(),
        };
        let eps = generate_dataset(&m, &cfg).unwrap();
        let bytes = encode_dataset(&eps);
        assert_eq!(decode_dataset(&bytes).unwrap(), eps);
        // Deterministic bytes.
        assert_eq!(encode_dataset(&generate_dataset(&m, &cfg).unwrap()), bytes);

        let empty = encode_dataset(&[]);
        assert!(decode_dataset(&empty).unwrap().is_empty());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 4, .. })));

        let cut = &bytes[..bytes.len() - 10];
        match decode_dataset(cut) {
            Err(Error::TruncatedEpisode { episode, .. }) => assert_eq!(episode, 99),
            other => panic!("expected truncation error, got {other:?}"),
        }
        assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::Format { .. })));
    }
}

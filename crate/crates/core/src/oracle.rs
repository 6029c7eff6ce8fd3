//! Brute-force shortest-step distances on a reachability lattice.
//!
//! Positions are discretized at resolution `r`; two lattice nodes are joined
//! when one control step can cover the displacement under the per-axis
//! kinematic bound `δ = v_max·dt` and the straight segment between them is
//! wall-free. Breadth-first search then counts control steps.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::maze::{MazeSpec, State, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OracleDistance {
    Steps(u32),
    Unreachable,
}

impl OracleDistance {
    pub fn steps(self) -> Option<u32> {
        match self {
            OracleDistance::Steps(k) => Some(k),
            OracleDistance::Unreachable => None,
        }
    }

    pub fn is_reachable(self) -> bool {
        matches!(self, OracleDistance::Steps(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Every node inside the ℓ∞ box of half-width δ.
    Kinematic,
    /// Axis-aligned unit hops only.
    Four,
}

#[derive(Clone, Debug)]
pub struct ReachGraph {
    resolution: f64,
    nx: usize,
    ny: usize,
    free: Vec<bool>,
    adj_start: Vec<usize>,
    adj: Vec<u32>,
    norm: Normalizer,
}

impl ReachGraph {
    /// Lattice at resolution `r` with kinematic one-step edges.
    pub fn new(spec: &MazeSpec, resolution: f64) -> Self {
        Self::with_connectivity(spec, resolution, Connectivity::Kinematic)
    }

    /// Lattice at the default resolution of a quarter cell.
    pub fn default_for(spec: &MazeSpec) -> Self {
        Self::new(spec, spec.cell_size / 4.0)
    }

    pub fn with_connectivity(spec: &MazeSpec, resolution: f64, conn: Connectivity) -> Self {
        let (lo, hi) = spec.bounds();
        let nx = ((hi[0] - lo[0]) / resolution).round().max(1.0) as usize;
        let ny = ((hi[1] - lo[1]) / resolution).round().max(1.0) as usize;
        let centre = |i: usize, j: usize| -> Vec2 {
            [
                lo[0] + (j as f64 + 0.5) * resolution,
                lo[1] + (i as f64 + 0.5) * resolution,
            ]
        };
        let free: Vec<bool> = (0..ny * nx)
            .map(|k| spec.is_free(centre(k / nx, k % nx)))
            .collect();
        let delta = spec.dynamics.v_max * spec.dynamics.dt;
        let reach = match conn {
            Connectivity::Kinematic => ((delta + 1e-9) / resolution).floor() as i64,
            Connectivity::Four => 1,
        };
        let mut offsets = Vec::new();
        for di in -reach..=reach {
            for dj in -reach..=reach {
                if (di, dj) == (0, 0) {
                    continue;
                }
                if conn == Connectivity::Four && di != 0 && dj != 0 {
                    continue;
                }
                offsets.push((di, dj));
            }
        }
        let mut adj_start = Vec::with_capacity(nx * ny + 1);
        let mut adj = Vec::new();
        for k in 0..nx * ny {
            adj_start.push(adj.len());
            if !free[k] {
                continue;
            }
            let (i, j) = ((k / nx) as i64, (k % nx) as i64);
            for &(di, dj) in &offsets {
                let (ni, nj) = (i + di, j + dj);
                if ni < 0 || nj < 0 || ni as usize >= ny || nj as usize >= nx {
                    continue;
                }
                let nk = ni as usize * nx + nj as usize;
                if !free[nk] {
                    continue;
                }
                let a = centre(i as usize, j as usize);
                let b = centre(ni as usize, nj as usize);
                if !spec.segment_collides(a, b) {
                    adj.push(nk as u32);
                }
            }
        }
        adj_start.push(adj.len());
        ReachGraph {
            resolution,
            nx,
            ny,
            free,
            adj_start,
            adj,
            norm: Normalizer::from_spec(spec),
        }
    }

    pub fn node_count(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    pub fn node_position(&self, k: usize) -> Vec2 {
        [
            (k % self.nx) as f64 * self.resolution + 0.5 * self.resolution + self.norm.offset[0],
            (k / self.nx) as f64 * self.resolution + 0.5 * self.resolution + self.norm.offset[1],
        ]
    }

    pub fn neighbors(&self, k: usize) -> &[u32] {
        &self.adj[self.adj_start[k]..self.adj_start[k + 1]]
    }

    /// Free node closest to `p`.
    pub fn nearest_node(&self, p: Vec2) -> Option<usize> {
        let fj = ((p[0] - self.norm.offset[0]) / self.resolution - 0.5).round();
        let fi = ((p[1] - self.norm.offset[1]) / self.resolution - 0.5).round();
        let ci = (fi.max(0.0) as usize).min(self.ny - 1);
        let cj = (fj.max(0.0) as usize).min(self.nx - 1);
        if self.free[ci * self.nx + cj] {
            return Some(ci * self.nx + cj);
        }
        let d2 = |k: usize| {
            let q = self.node_position(k);
            (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)
        };
        (0..self.free.len())
            .filter(|&k| self.free[k])
            .min_by(|&a, &b| d2(a).total_cmp(&d2(b)))
    }

    fn within(&self, p: Vec2, g: Vec2, eps: f64) -> bool {
        (0..2).all(|i| ((p[i] - g[i]) / self.norm.scale[i]).abs() <= eps)
    }

    /// Fewest control steps from `s` into the position tolerance box of `g`,
    /// truncated at `t_max`.
    pub fn shortest_steps(&self, s: &State, g: &State, eps: f64, t_max: u32) -> OracleDistance {
        if self.within(s.pos, g.pos, eps) {
            return OracleDistance::Steps(0);
        }
        let Some(src) = self.nearest_node(s.pos) else {
            return OracleDistance::Unreachable;
        };
        let n = self.free.len();
        let mut depth = vec![u32::MAX; n];
        let mut queue = VecDeque::new();
        depth[src] = 0;
        queue.push_back(src);
        while let Some(k) = queue.pop_front() {
            if self.within(self.node_position(k), g.pos, eps) {
                return OracleDistance::Steps(depth[k].min(t_max));
            }
            for &nk in self.neighbors(k) {
                let nk = nk as usize;
                if depth[nk] == u32::MAX {
                    depth[nk] = depth[k] + 1;
                    queue.push_back(nk);
                }
            }
        }
        OracleDistance::Unreachable
    }

    /// Hop counts between two lattice nodes (no tolerance box).
    pub fn node_hops(&self, a: usize, b: usize) -> Option<u32> {
        let mut depth = vec![u32::MAX; self.free.len()];
        let mut queue = VecDeque::from([a]);
        depth[a] = 0;
        while let Some(k) = queue.pop_front() {
            if k == b {
                return Some(depth[k]);
            }
            for &nk in self.neighbors(k) {
                let nk = nk as usize;
                if depth[nk] == u32::MAX {
                    depth[nk] = depth[k] + 1;
                    queue.push_back(nk);
                }
            }
        }
        None
    }
}

pub fn shortest_step_distance(
    spec: &MazeSpec,
    s: &State,
    g: &State,
    eps: f64,
    t_max: u32,
    resolution: f64,
) -> OracleDistance {
    ReachGraph::new(spec, resolution).shortest_steps(s, g, eps, t_max)
}

/// Element-wise distances over a shared graph.
pub fn oracle_table(
    graph: &ReachGraph,
    pairs: &[(State, State)],
    eps: f64,
    t_max: u32,
) -> Vec<OracleDistance> {
    pairs
        .par_iter()
        .map(|(s, g)| graph.shortest_steps(s, g, eps, t_max))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::Dynamics;
    use crate::rng::seeded;
    use rand::Rng;

    fn open(n: usize, cs: f64, dynamics: Dynamics) -> MazeSpec {
        let grid = (0..n)
            .map(|r| (0..n).map(|c| r == 0 || c == 0 || r + 1 == n || c + 1 == n).collect())
            .collect();
        MazeSpec::new("open", grid, cs, dynamics).unwrap()
    }

    fn unit_dynamics() -> Dynamics {
        Dynamics {
            dt: 1.0,
            v_max: 1.0,
            a_max: 1.0,
            backoff: 1e-4,
        }
    }

    #[test]
    fn four_connected_corner_to_corner() {
        let m = open(5, 1.0, unit_dynamics());
        let g = ReachGraph::with_connectivity(&m, 1.0, Connectivity::Four);
        assert_eq!(g.node_count(), 9);
        let s = State::at_rest([1.5, 1.5]);
        let goal = State::at_rest([3.5, 3.5]);
        assert_eq!(g.shortest_steps(&s, &goal, 1e-3, 100), OracleDistance::Steps(4));
        // Kinematic lattice allows diagonal hops.
        let k = ReachGraph::new(&m, 1.0);
        assert_eq!(k.shortest_steps(&s, &goal, 1e-3, 100), OracleDistance::Steps(2));
        // Truncation.
        assert_eq!(g.shortest_steps(&s, &goal, 1e-3, 3), OracleDistance::Steps(3));
    }

    #[test]
    fn zero_when_already_inside() {
        let m = MazeSpec::builtin("umaze").unwrap();
        let g = ReachGraph::default_for(&m);
        let s = State::at_rest([3.0, 3.0]);
        assert_eq!(g.shortest_steps(&s, &s, 0.04, 192), OracleDistance::Steps(0));
        let pairs = vec![(s, s)];
        assert_eq!(oracle_table(&g, &pairs, 0.04, 192), vec![OracleDistance::Steps(0)]);
    }

    #[test]
    fn separated_components_are_unreachable() {
        let m = MazeSpec::parse("split", "#####\n#.#.#\n#####", 1.0, unit_dynamics()).unwrap();
        let d = shortest_step_distance(
            &m,
            &State::at_rest([1.5, 1.5]),
            &State::at_rest([3.5, 1.5]),
            1e-3,
            100,
            0.5,
        );
        assert_eq!(d, OracleDistance::Unreachable);
    }

    #[test]
    fn open_arena_matches_chebyshev_bound() {
        let dynamics = Dynamics::default();
        let m = open(12, 0.4, dynamics);
        let g = ReachGraph::default_for(&m);
        let delta = dynamics.v_max * dynamics.dt;
        let mut r = seeded(2);
        for _ in 0..100 {
            let a = m.sample_free_state(&mut r).unwrap();
            let b = m.sample_free_state(&mut r).unwrap();
            // Half a lattice spacing in normalized units.
            let eps = 0.5 * 0.1 / (12.0 * 0.4);
            let gap = (a.pos[0] - b.pos[0]).abs().max((a.pos[1] - b.pos[1]).abs());
            let want = (gap / delta).ceil() as i64;
            let got = g.shortest_steps(&a, &b, eps, 10_000).steps().unwrap() as i64;
            assert!((got - want).abs() <= 1, "got {got}, want {want}");
        }
    }

    #[test]
    fn table_matches_per_pair_and_is_pure() {
        let m = MazeSpec::builtin("umaze").unwrap();
        let g = ReachGraph::default_for(&m);
        let mut r = seeded(3);
        let pairs: Vec<_> = (0..100)
            .map(|_| (m.sample_free_state(&mut r).unwrap(), m.sample_free_state(&mut r).unwrap()))
            .collect();
        let table = oracle_table(&g, &pairs, 0.04, 192);
        for (p, d) in pairs.iter().zip(&table) {
            assert_eq!(*d, g.shortest_steps(&p.0, &p.1, 0.04, 192));
            assert_eq!(*d, shortest_step_distance(&m, &p.0, &p.1, 0.04, 192, 0.1));
        }
        let doubled: Vec<_> = pairs.iter().chain(pairs.iter()).cloned().collect();
        let t2 = oracle_table(&g, &doubled, 0.04, 192);
        assert_eq!(&t2[..100], &table[..]);
        assert_eq!(&t2[100..], &table[..]);
    }

    #[test]
    fn monotone_in_eps_and_triangle_on_nodes() {
        let m = MazeSpec::builtin("umaze").unwrap();
        let g = ReachGraph::default_for(&m);
        let mut r = seeded(4);
        for _ in 0..50 {
            let a = m.sample_free_state(&mut r).unwrap();
            let b = m.sample_free_state(&mut r).unwrap();
            let mut prev = u32::MAX;
            for eps in [0.01, 0.02, 0.04, 0.08, 0.16] {
                let d = g.shortest_steps(&a, &b, eps, 10_000).steps().unwrap();
                assert!(d <= prev);
                prev = d;
            }
        }
        let nodes: Vec<usize> = (0..g.free.len()).filter(|&k| g.free[k]).collect();
        for _ in 0..30 {
            let pick = |r: &mut crate::rng::Rng| nodes[r.random_range(0..nodes.len())];
            let (s, h, t) = (pick(&mut r), pick(&mut r), pick(&mut r));
            let d = |a, b| g.node_hops(a, b).unwrap();
            assert!(d(s, t) <= d(s, h) + d(h, t));
        }
    }

    #[test]
    fn edges_never_cross_walls() {
        let m = MazeSpec::builtin("umaze").unwrap();
        let g = ReachGraph::default_for(&m);
        for k in 0..g.free.len() {
            for &n in g.neighbors(k) {
                assert!(g.free[k] && g.free[n as usize]);
                assert!(!m.segment_collides(g.node_position(k), g.node_position(n as usize)));
            }
        }
    }
}

//! Length-predictor audits against the lattice oracle and the Bellman-type
//! upper bound on held-out episodes.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizedDataset, Normalizer, StateRow};
use crate::error::{Error, Result};
use crate::eval::gen_test_set;
use crate::lp::{HorizonCfg, LpModel};
use crate::maze::{MazeSpec, State};
use crate::oracle::ReachGraph;

/// Ranks with ties averaged, 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation (Pearson on tie-averaged ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return 0.0;
    }
    pearson(&ranks(a), &ranks(b))
}

pub fn mean_abs_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub sx: f64,
    pub sy: f64,
    pub gx: f64,
    pub gy: f64,
    pub oracle_steps: u32,
    /// Oracle steps over `T_max`, capped at 1.
    pub oracle_norm: f64,
    pub predicted: f64,
    pub horizon: usize,
}

/// Predicted versus oracle distances on fresh at-rest pairs drawn like
/// evaluation instances (reachable within `T_max`).
pub fn audit_pairs(spec: &MazeSpec, model: &LpModel, hc: &HorizonCfg, n: usize, seed: u64) -> Result<Vec<AuditRow>> {
    let norm = Normalizer::from_spec(spec);
    let t_max = model.arch.t_max;
    let mut rows = Vec::with_capacity(n);
    let mut batch_seed = seed;
    while rows.len() < n {
        let insts = gen_test_set(spec, 2 * (n - rows.len()), model.arch.eps, t_max, batch_seed)?;
        batch_seed = batch_seed.wrapping_add(0x9e37_79b9);
        for inst in insts.into_iter().filter(|i| !i.over_cap) {
            if rows.len() == n {
                break;
            }
            let (s, g) = (norm.apply_f32(&inst.start), norm.apply_f32(&inst.goal));
            let predicted = model.predict_distance(&s, &g);
            rows.push(AuditRow {
                sx: inst.start.pos[0],
                sy: inst.start.pos[1],
                gx: inst.goal.pos[0],
                gy: inst.goal.pos[1],
                oracle_steps: inst.oracle_steps,
                oracle_norm: (inst.oracle_steps as f64 / t_max as f64).min(1.0),
                predicted,
                horizon: crate::lp::horizon_from_distance(predicted, hc),
            });
        }
    }
    Ok(rows)
}

pub fn write_audit_csv(path: &Path, rows: &[AuditRow]) -> Result<()> {
    let err = |e: csv::Error| Error::Config(format!("csv {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::path(path, e))
}

/// Largest `f(g, g)` over `n` random free positions at rest.
pub fn max_self_distance<R: Rng>(spec: &MazeSpec, model: &LpModel, n: usize, rng: &mut R) -> Result<f64> {
    let norm = Normalizer::from_spec(spec);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let g = norm.apply_f32(&spec.sample_free_state(rng)?);
        pairs.push((g, g));
    }
    Ok(model.predict_many(&pairs).into_iter().fold(0.0, f64::max))
}

/// Fraction of tuples `(s_t, s_{t+k}, g)` from held-out episodes with
/// `f(s_t, g) > k/T_max + f(s_{t+k}, g) + slack`. The goal is a later state
/// of the same episode, or with `cross_episode` a state of another one.
pub fn dp_violation_rate<R: Rng>(
    model: &LpModel,
    data: &NormalizedDataset,
    n: usize,
    slack: f64,
    cross_episode: bool,
    rng: &mut R,
) -> Result<f64> {
    let eligible: Vec<usize> = (0..data.len()).filter(|&i| data.episodes[i].len() >= 3).collect();
    if eligible.is_empty() || (cross_episode && data.len() < 2) {
        return Err(Error::Config("not enough held-out episodes for a bound audit".into()));
    }
    let t_max = model.arch.t_max;
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    for _ in 0..n {
        let e = &data.episodes[eligible[rng.random_range(0..eligible.len())]];
        let t = rng.random_range(0..e.len() - 2);
        let k = rng.random_range(1..=(e.len() - 2 - t).min(t_max));
        let g: StateRow = if cross_episode {
            let other = loop {
                let j = rng.random_range(0..data.len());
                if !std::ptr::eq(&data.episodes[j], e) && !data.episodes[j].is_empty() {
                    break &data.episodes[j];
                }
            };
            other[rng.random_range(0..other.len())]
        } else {
            e[rng.random_range(t + k + 1..e.len())]
        };
        first.push((e[t], g));
        second.push((e[t + k], g));
        ks.push(k);
    }
    let f1 = model.predict_many(&first);
    let f2 = model.predict_many(&second);
    let bad = (0..n)
        .filter(|&i| f1[i] > ks[i] as f64 / t_max as f64 + f2[i] + slack)
        .count();
    Ok(bad as f64 / n.max(1) as f64)
}

/// Calibration summary on fresh pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub spearman: f64,
    pub mae: f64,
    pub max_self: f64,
    pub dp_violation: f64,
    pub cross_violation: f64,
}

pub fn calibrate<R: Rng>(
    spec: &MazeSpec,
    model: &LpModel,
    held_out: &NormalizedDataset,
    pairs: usize,
    seed: u64,
    rng: &mut R,
) -> Result<Calibration> {
    let rows = audit_pairs(spec, model, &HorizonCfg::default(), pairs, seed)?;
    let oracle: Vec<f64> = rows.iter().map(|r| r.oracle_norm).collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
    Ok(Calibration {
        spearman: spearman(&oracle, &pred),
        mae: mean_abs_error(&oracle, &pred),
        max_self: max_self_distance(spec, model, 100, rng)?,
        dp_violation: dp_violation_rate(model, held_out, 2000, 0.05, false, rng)?,
        cross_violation: dp_violation_rate(model, held_out, 2000, 0.05, true, rng)?,
    })
}

/// Oracle shortest steps for a start and goal given in world units.
pub fn oracle_steps(spec: &MazeSpec, s: &State, g: &State, eps: f64, cap: u32) -> Option<u32> {
    ReachGraph::default_for(spec).shortest_steps(s, g, eps, cap).steps()
}

//! Plan tracking with a PD controller under the single-shot and replanning
//! protocols. One plan index is consumed per environment step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Normalizer, StateRow};
use crate::diffusion::Planner;
use crate::error::{Error, Result};
use crate::lp::{HorizonCfg, LpModel};
use crate::maze::{in_goal, Action, GoalSpec, MazeSpec, State};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Gains {
            kp: 10.0,
            kd: 2.0 * 10f64.sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecCfg {
    pub step_budget: usize,
    /// Normalized position ℓ₂ error that triggers a replan.
    pub replan_err_threshold: f64,
    pub replan_check_every: usize,
    /// Replan when the current plan runs out without reaching the goal;
    /// otherwise the run ends there as in single-shot mode.
    pub replan_on_exhaustion: bool,
}

impl Default for ExecCfg {
    fn default() -> Self {
        ExecCfg {
            step_budget: 1500,
            replan_err_threshold: 0.05,
            replan_check_every: 10,
            replan_on_exhaustion: true,
        }
    }
}

impl ExecCfg {
    pub fn validate(&self) -> Result<()> {
        if self.step_budget == 0 || !(self.replan_err_threshold > 0.0) || self.replan_check_every == 0 {
            return Err(Error::Config(
                "execution needs a positive budget, threshold and check period".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 1-based environment step that produced `state`.
    pub step: usize,
    pub state: State,
    pub action: Action,
    pub plan_index: usize,
    pub segment: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecResult {
    pub success: bool,
    /// ℓ: environment steps issued.
    pub executed_steps: usize,
    pub replan_count: usize,
    pub trace: Vec<TraceRow>,
    /// Steps executed from each plan segment, in order.
    pub segment_lengths: Vec<usize>,
    /// Requested length Ĺ of each segment.
    pub horizons: Vec<usize>,
    pub final_state: State,
}

/// `k_p·(w.pos − s.pos) + k_d·(w.vel − s.vel)`, clamped per axis to `a_max`.
pub fn pd_action(s: &State, waypoint: &State, gains: &Gains, a_max: f64) -> Action {
    let mut acc = [0.0; 2];
    for (i, a) in acc.iter_mut().enumerate() {
        let raw = gains.kp * (waypoint.pos[i] - s.pos[i]) + gains.kd * (waypoint.vel[i] - s.vel[i]);
        *a = if raw.is_nan() { 0.0 } else { raw.clamp(-a_max, a_max) };
    }
    Action { acc }
}

fn position_error(s: &State, w: &State, norm: &Normalizer) -> f64 {
    let (a, b) = (norm.apply(s), norm.apply(w));
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

struct Runner<'a> {
    env: &'a MazeSpec,
    gs: &'a GoalSpec,
    norm: &'a Normalizer,
    gains: Gains,
    state: State,
    trace: Vec<TraceRow>,
    segment_lengths: Vec<usize>,
    horizons: Vec<usize>,
}

impl Runner<'_> {
    fn step_toward(&mut self, w: &State, index: usize) -> bool {
        let action = pd_action(&self.state, w, &self.gains, self.env.dynamics.a_max);
        self.state = self.env.step(&self.state, &action);
        self.trace.push(TraceRow {
            step: self.trace.len() + 1,
            state: self.state,
            action,
            plan_index: index,
            segment: self.horizons.len() - 1,
        });
        *self.segment_lengths.last_mut().expect("segment open") += 1;
        in_goal(&self.state, self.gs, self.norm)
    }

    fn begin(&mut self, horizon: usize) {
        self.horizons.push(horizon);
        self.segment_lengths.push(0);
    }

    fn finish(self, success: bool) -> ExecResult {
        ExecResult {
            success,
            executed_steps: self.trace.len(),
            replan_count: self.horizons.len().saturating_sub(1),
            trace: self.trace,
            segment_lengths: self.segment_lengths,
            horizons: self.horizons,
            final_state: self.state,
        }
    }
}

/// Tracks waypoints `1..Ĺ−1` of a world-space plan from `start`, stopping on
/// goal entry or at the step budget.
pub fn run_single_shot(
    env: &MazeSpec,
    start: &State,
    plan: &[State],
    gains: &Gains,
    cfg: &ExecCfg,
    gs: &GoalSpec,
    norm: &Normalizer,
) -> Result<ExecResult> {
    cfg.validate()?;
    if plan.len() < 2 {
        return Err(Error::Shape(format!("plan of length {} cannot be executed", plan.len())));
    }
    let mut run = Runner {
        env,
        gs,
        norm,
        gains: *gains,
        state: *start,
        trace: Vec::new(),
        segment_lengths: Vec::new(),
        horizons: Vec::new(),
    };
    run.begin(plan.len());
    if in_goal(start, gs, norm) {
        return Ok(run.finish(true));
    }
    for (j, w) in plan.iter().enumerate().skip(1) {
        if run.trace.len() >= cfg.step_budget {
            break;
        }
        if run.step_toward(w, j) {
            return Ok(run.finish(true));
        }
    }
    Ok(run.finish(false))
}

/// Executes plans from `plan_fn(state, remaining_budget)` and replans from
/// the current state whenever the periodic tracking check fails (and, if
/// configured, when a plan runs out).
pub fn run_replan(
    env: &MazeSpec,
    start: &State,
    plan_fn: &mut dyn FnMut(&State, usize) -> Result<Vec<State>>,
    gains: &Gains,
    cfg: &ExecCfg,
    gs: &GoalSpec,
    norm: &Normalizer,
) -> Result<ExecResult> {
    cfg.validate()?;
    let mut run = Runner {
        env,
        gs,
        norm,
        gains: *gains,
        state: *start,
        trace: Vec::new(),
        segment_lengths: Vec::new(),
        horizons: Vec::new(),
    };
    if in_goal(start, gs, norm) {
        run.begin(0);
        return Ok(run.finish(true));
    }
    let mut plan = Vec::new();
    let mut j = 0;
    loop {
        let done = run.trace.len();
        if done >= cfg.step_budget {
            break;
        }
        if j == 0 || j >= plan.len() {
            if j != 0 && !cfg.replan_on_exhaustion {
                break;
            }
            plan = plan_fn(&run.state, cfg.step_budget - done)?;
            if plan.len() < 2 {
                return Err(Error::Shape(format!("planner returned {} states", plan.len())));
            }
            run.begin(plan.len());
            j = 1;
        }
        if run.step_toward(&plan[j], j) {
            return Ok(run.finish(true));
        }
        j += 1;
        let steps = run.trace.len();
        if steps.is_multiple_of(cfg.replan_check_every)
            && steps < cfg.step_budget
            && j < plan.len()
            && position_error(&run.state, &plan[j - 1], norm) > cfg.replan_err_threshold
        {
            j = 0;
        }
    }
    Ok(run.finish(false))
}

/// Where a method's plan length comes from.
#[derive(Clone, Debug)]
pub enum HorizonSource {
    Predicted { lp: LpModel, cfg: HorizonCfg },
    Constant(usize),
}

impl HorizonSource {
    pub fn horizon(&self, s: &StateRow, g: &StateRow) -> usize {
        match self {
            HorizonSource::Predicted { lp, cfg } => lp.predict_horizon(cfg, s, g),
            HorizonSource::Constant(h) => *h,
        }
    }
}

/// Samples a world-space plan from `s` toward `gs.goal`, with the horizon
/// capped by `remaining` (and kept at least 2).
pub fn plan_from<R: rand::Rng>(
    planner: &Planner,
    horizon: &HorizonSource,
    norm: &Normalizer,
    s: &State,
    gs: &GoalSpec,
    remaining: usize,
    rng: &mut R,
) -> Result<Vec<State>> {
    let (sn, gn) = (norm.apply_f32(s), norm.apply_f32(&gs.goal));
    let len = horizon.horizon(&sn, &gn).min(remaining).max(2);
    let plan = planner.plan(&sn, &gn, len, rng)?;
    Ok(plan.states.iter().map(|r| norm.invert_row(r)).collect())
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Config(format!("writing {}: {e}", path.display()));
    w.write_record(["step", "x", "y", "vx", "vy", "ax", "ay", "plan_index", "segment"])
        .map_err(io)?;
    for r in trace {
        w.write_record(&[
            r.step.to_string(),
            r.state.pos[0].to_string(),
            r.state.pos[1].to_string(),
            r.state.vel[0].to_string(),
            r.state.vel[1].to_string(),
            r.action.acc[0].to_string(),
            r.action.acc[1].to_string(),
            r.plan_index.to_string(),
            r.segment.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::path(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> (MazeSpec, Normalizer) {
        let spec = MazeSpec::builtin("umaze").unwrap();
        let norm = Normalizer::from_spec(&spec);
        (spec, norm)
    }

    /// Straight-line plan at constant speed, as world states.
    fn line(from: [f64; 2], to: [f64; 2], len: usize, dt: f64) -> Vec<State> {
        let steps = (len - 1) as f64;
        let vel = [(to[0] - from[0]) / (steps * dt), (to[1] - from[1]) / (steps * dt)];
        (0..len)
            .map(|i| {
                let t = i as f64 / steps;
                let v = if i == 0 || i == len - 1 { [0.0; 2] } else { vel };
                State {
                    pos: [from[0] + t * (to[0] - from[0]), from[1] + t * (to[1] - from[1])],
                    vel: v,
                }
            })
            .collect()
    }

    fn free_pair(spec: &MazeSpec) -> ([f64; 2], [f64; 2]) {
        // Two points in the same free corridor of the bottom row.
        let cs = spec.cell_size;
        let cells = spec.free_cells();
        let row = cells[0].0;
        let mut cols: Vec<usize> = cells.iter().filter(|c| c.0 == row).map(|c| c.1).collect();
        cols.sort();
        let a = [(cols[0] as f64 + 0.5) * cs, (row as f64 + 0.5) * cs];
        let b = [(cols[0] as f64 + 12.5) * cs, (row as f64 + 0.5) * cs];
        (a, b)
    }

    #[test]
    fn pd_examples() {
        let g = Gains::default();
        let s = State { pos: [1.0, 2.0], vel: [0.3, -0.1] };
        assert_eq!(pd_action(&s, &s, &g, 40.0), Action::zero());
        let p = Gains { kp: 10.0, kd: 0.0 };
        let w = State { pos: [2.0, 2.0], vel: s.vel };
        assert_eq!(pd_action(&s, &w, &p, 40.0).acc, [10.0, 0.0]);
        let far = State::at_rest([1e6, -1e6]);
        assert_eq!(pd_action(&s, &far, &g, 40.0).acc, [40.0, -40.0]);
    }

    #[test]
    fn single_shot_hits_early_and_counts_exactly() {
        let (spec, norm) = env();
        let (a, b) = free_pair(&spec);
        let gs = GoalSpec::new(b, 0.04);
        let plan = line(a, b, 150, spec.dynamics.dt);
        let r = run_single_shot(&spec, &State::at_rest(a), &plan, &Gains::default(), &ExecCfg::default(), &gs, &norm).unwrap();
        assert!(r.success);
        assert!(r.executed_steps < plan.len());
        assert_eq!(r.trace.len(), r.executed_steps);
        assert!(in_goal(&r.final_state, &gs, &norm));
        assert_eq!(r.replan_count, 0);
        // A plan that never gets there uses Ĺ−1 steps.
        let short = line(a, [a[0] + 0.05, a[1]], 20, spec.dynamics.dt);
        let r = run_single_shot(&spec, &State::at_rest(a), &short, &Gains::default(), &ExecCfg::default(), &gs, &norm).unwrap();
        assert!(!r.success);
        assert_eq!(r.executed_steps, 19);
        let tight = ExecCfg { step_budget: 5, ..ExecCfg::default() };
        let r = run_single_shot(&spec, &State::at_rest(a), &short, &Gains::default(), &tight, &gs, &norm).unwrap();
        assert_eq!(r.executed_steps, 5);
    }

    #[test]
    fn one_step_hit() {
        let (spec, norm) = env();
        let (a, _) = free_pair(&spec);
        let g = [a[0] + 1.0, a[1]];
        let gs = GoalSpec::new(g, 0.04);
        let start = State::at_rest([g[0] - 0.04 * norm.scale[0] - 0.005, g[1]]);
        assert!(!in_goal(&start, &gs, &norm));
        let gains = Gains { kp: 0.0, kd: 1e6 };
        let plan = vec![start, State { pos: g, vel: [1.0, 0.0] }, State::at_rest(g)];
        let r = run_single_shot(&spec, &start, &plan, &gains, &ExecCfg::default(), &gs, &norm).unwrap();
        assert!(r.success);
        assert_eq!(r.executed_steps, 1);
    }

    #[test]
    fn infinite_threshold_matches_single_shot() {
        let (spec, norm) = env();
        let (a, b) = free_pair(&spec);
        let gs = GoalSpec::new(b, 0.04);
        let start = State::at_rest(a);
        let cfg = ExecCfg {
            replan_err_threshold: f64::INFINITY,
            replan_on_exhaustion: false,
            ..ExecCfg::default()
        };
        for len in [20, 60, 200] {
            let plan = line(a, b, len, spec.dynamics.dt);
            let ss = run_single_shot(&spec, &start, &plan, &Gains::default(), &cfg, &gs, &norm).unwrap();
            let mut f = |_: &State, _: usize| Ok(plan.clone());
            let rp = run_replan(&spec, &start, &mut f, &Gains::default(), &cfg, &gs, &norm).unwrap();
            assert_eq!(ss, rp);
        }
        let rare = ExecCfg { replan_check_every: 10_000, ..cfg };
        let plan = line(a, b, 20, spec.dynamics.dt);
        let mut f = |_: &State, _: usize| Ok(plan.clone());
        let rp = run_replan(&spec, &start, &mut f, &Gains::default(), &rare, &gs, &norm).unwrap();
        assert_eq!(rp.horizons.len(), 1);
    }

    #[test]
    fn replan_accounting_and_budget() {
        let (spec, norm) = env();
        let (a, b) = free_pair(&spec);
        let gs = GoalSpec::new(b, 0.04);
        let dt = spec.dynamics.dt;
        // Teleporting plans force replans; the last ones are feasible.
        let mut calls = 0;
        let mut f = |s: &State, remaining: usize| {
            calls += 1;
            let len = 40.min(remaining).max(2);
            if calls < 4 {
                Ok(line(s.pos, [b[0], b[1] + 0.0], 3.max(len / 8), dt))
            } else {
                Ok(line(s.pos, b, 80.min(remaining).max(2), dt))
            }
        };
        let cfg = ExecCfg { replan_check_every: 2, ..ExecCfg::default() };
        let r = run_replan(&spec, &State::at_rest(a), &mut f, &Gains::default(), &cfg, &gs, &norm).unwrap();
        assert_eq!(r.segment_lengths.iter().sum::<usize>(), r.executed_steps);
        assert_eq!(r.trace.len(), r.executed_steps);
        assert_eq!(r.replan_count + 1, r.horizons.len());
        assert!(r.replan_count >= 3, "{:?} {:?}", r.segment_lengths, r.horizons);
        for (seg, (&n, &h)) in r.segment_lengths.iter().zip(&r.horizons).enumerate() {
            assert!(n < h);
            assert_eq!(r.trace.iter().filter(|t| t.segment == seg).count(), n);
        }
        // A planner that never reaches the goal is stopped by the budget.
        let mut stuck = |s: &State, _: usize| Ok(vec![*s, *s, *s]);
        let cfg = ExecCfg { step_budget: 37, ..ExecCfg::default() };
        let r = run_replan(&spec, &State::at_rest(a), &mut stuck, &Gains::default(), &cfg, &gs, &norm).unwrap();
        assert!(!r.success);
        assert_eq!(r.executed_steps, 37);
        assert_eq!(r.segment_lengths.iter().sum::<usize>(), 37);
    }

    #[test]
    fn trace_csv_has_one_row_per_step() {
        let (spec, norm) = env();
        let (a, b) = free_pair(&spec);
        let gs = GoalSpec::new(b, 0.04);
        let plan = line(a, b, 100, spec.dynamics.dt);
        let r = run_single_shot(&spec, &State::at_rest(a), &plan, &Gains::default(), &ExecCfg::default(), &gs, &norm).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace_csv(&path, &r.trace).unwrap();
        let rows = csv::Reader::from_path(&path).unwrap().records().count();
        assert_eq!(rows, r.executed_steps);
    }
}

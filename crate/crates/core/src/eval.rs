//! Test-set generation, method × protocol evaluation, and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::diffusion::Planner;
use crate::error::{Error, Result};
use crate::execution::{
    plan_from, run_replan, run_single_shot, write_trace_csv, ExecCfg, ExecResult, Gains, HorizonSource,
    TraceRow,
};
use crate::maze::{in_goal, GoalSpec, MazeSpec, State};
use crate::oracle::{OracleDistance, ReachGraph};
use crate::rng;

/// Steps beyond which the reachability search gives up.
const ORACLE_SEARCH_CAP: u32 = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: usize,
    pub start: State,
    pub goal: State,
    pub maze: String,
    /// Oracle shortest-step distance.
    pub oracle_steps: u32,
    /// Distance exceeds the planners' `T_max`.
    pub over_cap: bool,
}

/// Draws `n` at-rest start/goal pairs that the oracle can connect, with the
/// start outside the goal box.
pub fn gen_test_set(spec: &MazeSpec, n: usize, eps: f64, t_max: usize, seed: u64) -> Result<Vec<EvalInstance>> {
    let graph = ReachGraph::default_for(spec);
    let norm = Normalizer::from_spec(spec);
    let mut r = rng::seeded(rng::derive(seed, "test-set"));
    let cap = 100 * n.max(1);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > cap {
            return Err(Error::RetryCapExceeded(cap));
        }
        let start = spec.sample_free_state(&mut r)?;
        let goal = spec.sample_free_state(&mut r)?;
        if in_goal(&start, &GoalSpec::new(goal.pos, eps), &norm) {
            continue;
        }
        if let OracleDistance::Steps(k) = graph.shortest_steps(&start, &goal, eps, ORACLE_SEARCH_CAP) {
            if k == 0 || k >= ORACLE_SEARCH_CAP {
                continue;
            }
            out.push(EvalInstance {
                id: out.len(),
                start,
                goal,
                maze: spec.name.clone(),
                oracle_steps: k,
                over_cap: k as usize > t_max,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    Vhd,
    Fh,
    FhLp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "SS")]
    SingleShot,
    #[serde(rename = "RP")]
    Replan,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::SingleShot => "SS",
            Protocol::Replan => "RP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "SS" | "ss" => Ok(Protocol::SingleShot),
            "RP" | "rp" => Ok(Protocol::Replan),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

/// A planner paired with a horizon source.
#[derive(Clone, Debug)]
pub struct MethodSpec {
    pub name: String,
    pub kind: MethodKind,
    pub planner: Arc<Planner>,
    pub horizon: HorizonSource,
}

impl MethodSpec {
    pub fn new(name: &str, kind: MethodKind, planner: Arc<Planner>, horizon: HorizonSource) -> Result<Self> {
        let ok = matches!(
            (kind, &horizon),
            (MethodKind::Fh, HorizonSource::Constant(_))
                | (MethodKind::Vhd | MethodKind::FhLp, HorizonSource::Predicted { .. })
        );
        if !ok {
            return Err(Error::Config(format!(
                "method `{name}`: FH needs a constant horizon, VHD and FH+LP need a length predictor"
            )));
        }
        Ok(MethodSpec {
            name: name.to_string(),
            kind,
            planner,
            horizon,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalCfg {
    pub eps: f64,
    pub gains: Gains,
    pub exec: ExecCfg,
    pub protocols: Vec<Protocol>,
    pub seed: u64,
    /// Keep per-run traces in the report.
    pub keep_traces: bool,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg {
            eps: 0.04,
            gains: Gains::default(),
            exec: ExecCfg::default(),
            protocols: vec![Protocol::SingleShot, Protocol::Replan],
            seed: 0,
            keep_traces: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub method: String,
    pub protocol: Protocol,
    pub instance: usize,
    pub success: bool,
    pub steps: usize,
    pub replans: usize,
    /// Length of the first plan.
    pub first_horizon: usize,
    /// Sum of executed segment lengths.
    pub segment_steps: usize,
    pub planner_error: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub protocol: Protocol,
    pub n: usize,
    pub sr: f64,
    pub aes: f64,
    pub replan_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub method: String,
    pub protocol: Protocol,
    pub instance: usize,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub summaries: Vec<MethodSummary>,
    pub rows: Vec<InstanceRow>,
    pub traces: Vec<RunTrace>,
}

impl EvalReport {
    pub fn summary(&self, method: &str, protocol: Protocol) -> Option<&MethodSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.protocol == protocol)
    }
}

/// Aggregates per-instance rows, keeping the first-seen order of
/// (method, protocol) pairs.
pub fn summarize(rows: &[InstanceRow]) -> Vec<MethodSummary> {
    let mut keys: Vec<(String, Protocol)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(m, p)| *m == r.method && *p == r.protocol) {
            keys.push((r.method.clone(), r.protocol));
        }
    }
    keys.into_iter()
        .map(|(method, protocol)| {
            let sel: Vec<&InstanceRow> = rows
                .iter()
                .filter(|r| r.method == method && r.protocol == protocol)
                .collect();
            let n = sel.len();
            let nf = n.max(1) as f64;
            MethodSummary {
                sr: sel.iter().filter(|r| r.success).count() as f64 / nf,
                aes: sel.iter().map(|r| r.steps as f64).sum::<f64>() / nf,
                replan_mean: sel.iter().map(|r| r.replans as f64).sum::<f64>() / nf,
                method,
                protocol,
                n,
            }
        })
        .collect()
}

/// Seed shared by every method on one instance and protocol.
pub fn instance_seed(seed: u64, instance: usize, protocol: Protocol) -> u64 {
    rng::derive(seed, &format!("instance/{instance}/{}", protocol.label()))
}

/// Runs one method on one instance.
pub fn run_instance(
    spec: &MazeSpec,
    method: &MethodSpec,
    inst: &EvalInstance,
    protocol: Protocol,
    cfg: &EvalCfg,
) -> Result<ExecResult> {
    let norm = Normalizer::from_spec(spec);
    let gs = GoalSpec::new(inst.goal.pos, cfg.eps);
    let mut r = rng::seeded(instance_seed(cfg.seed, inst.id, protocol));
    match protocol {
        Protocol::SingleShot => {
            let plan = plan_from(
                &method.planner,
                &method.horizon,
                &norm,
                &inst.start,
                &gs,
                cfg.exec.step_budget + 1,
                &mut r,
            )?;
            run_single_shot(spec, &inst.start, &plan, &cfg.gains, &cfg.exec, &gs, &norm)
        }
        Protocol::Replan => {
            let mut f = |s: &State, remaining: usize| {
                plan_from(&method.planner, &method.horizon, &norm, s, &gs, remaining + 1, &mut r)
            };
            run_replan(spec, &inst.start, &mut f, &cfg.gains, &cfg.exec, &gs, &norm)
        }
    }
}

/// Evaluates every method under every configured protocol on the same
/// instances. Planner failures count as unsuccessful runs of full budget.
pub fn evaluate(
    spec: &MazeSpec,
    methods: &[MethodSpec],
    instances: &[EvalInstance],
    cfg: &EvalCfg,
) -> Result<EvalReport> {
    cfg.exec.validate()?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for m in methods {
        for &protocol in &cfg.protocols {
            let results: Vec<(InstanceRow, Option<Vec<TraceRow>>)> = instances
                .par_iter()
                .map(|inst| {
                    let res = run_instance(spec, m, inst, protocol, cfg);
                    let row = match &res {
                        Ok(e) => InstanceRow {
                            method: m.name.clone(),
                            protocol,
                            instance: inst.id,
                            success: e.success,
                            steps: e.executed_steps,
                            replans: e.replan_count,
                            first_horizon: e.horizons.first().copied().unwrap_or(0),
                            segment_steps: e.segment_lengths.iter().sum(),
                            planner_error: false,
                        },
                        Err(err) => {
                            log::warn!("{} {} instance {}: {err}", m.name, protocol.label(), inst.id);
                            InstanceRow {
                                method: m.name.clone(),
                                protocol,
                                instance: inst.id,
                                success: false,
                                steps: cfg.exec.step_budget,
                                replans: 0,
                                first_horizon: 0,
                                segment_steps: cfg.exec.step_budget,
                                planner_error: true,
                            }
                        }
                    };
                    let trace = if cfg.keep_traces { res.ok().map(|e| e.trace) } else { None };
                    (row, trace)
                })
                .collect();
            for (row, trace) in results {
                if let Some(trace) = trace {
                    traces.push(RunTrace {
                        method: row.method.clone(),
                        protocol,
                        instance: row.instance,
                        trace,
                    });
                }
                rows.push(row);
            }
            if let Some(s) = summarize(&rows).iter().find(|s| s.method == m.name && s.protocol == protocol) {
                log::info!("{} {}: SR {:.3} AES {:.1}", s.method, protocol.label(), s.sr, s.aes);
            }
        }
    }
    Ok(EvalReport {
        summaries: summarize(&rows),
        rows,
        traces,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Config(format!("csv {}: {e}", path.display()))
}

pub fn write_results_csv(path: &Path, summaries: &[MethodSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if summaries.is_empty() {
        w.write_record(["method", "protocol", "n", "sr", "aes", "replan_mean"])
            .map_err(csv_err(path))?;
    }
    for s in summaries {
        w.serialize(s).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::path(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<MethodSummary>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|x| x.map_err(csv_err(path))).collect()
}

pub fn write_instances_csv(path: &Path, rows: &[InstanceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::path(path, e))
}

pub fn read_instances_csv(path: &Path) -> Result<Vec<InstanceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().map(|x| x.map_err(csv_err(path))).collect()
}

/// Rank marks per column: `†` best, `‡` second best. Higher SR and lower
/// AES are better.
fn marks(values: &[Option<f64>], higher_better: bool) -> Vec<&'static str> {
    let mut distinct: Vec<f64> = values.iter().flatten().copied().collect();
    distinct.sort_by(|a, b| if higher_better { b.total_cmp(a) } else { a.total_cmp(b) });
    distinct.dedup();
    values
        .iter()
        .map(|v| match v {
            Some(x) if distinct.first() == Some(x) => "†",
            Some(x) if distinct.get(1) == Some(x) => "‡",
            _ => "",
        })
        .collect()
}

/// Text table with one column per protocol and two sub-rows per method:
/// SR (%) on top, AES below.
pub fn render_table(summaries: &[MethodSummary]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut protocols: Vec<Protocol> = Vec::new();
    for s in summaries {
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
        if !protocols.contains(&s.protocol) {
            protocols.push(s.protocol);
        }
    }
    let get = |m: &str, p: Protocol| summaries.iter().find(|s| s.method == m && s.protocol == p);
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6) + 2;
    let mut out = String::new();
    let _ = write!(out, "{:<width$}{:<6}", "method", "");
    for p in &protocols {
        let _ = write!(out, "{:>12}", p.label());
    }
    out.push('\n');
    let mut cols_sr = Vec::new();
    let mut cols_aes = Vec::new();
    for &p in &protocols {
        let sr: Vec<Option<f64>> = methods.iter().map(|m| get(m, p).map(|s| s.sr)).collect();
        let aes: Vec<Option<f64>> = methods.iter().map(|m| get(m, p).map(|s| s.aes)).collect();
        cols_sr.push(marks(&sr, true));
        cols_aes.push(marks(&aes, false));
    }
    for (i, m) in methods.iter().enumerate() {
        let _ = write!(out, "{:<width$}{:<6}", m, "SR%");
        for (j, &p) in protocols.iter().enumerate() {
            let cell = get(m, p).map_or("-".to_string(), |s| format!("{:.1}{}", 100.0 * s.sr, cols_sr[j][i]));
            let _ = write!(out, "{cell:>12}");
        }
        out.push('\n');
        let _ = write!(out, "{:<width$}{:<6}", "", "AES");
        for (j, &p) in protocols.iter().enumerate() {
            let cell = get(m, p).map_or("-".to_string(), |s| format!("{:.1}{}", s.aes, cols_aes[j][i]));
            let _ = write!(out, "{cell:>12}");
        }
        out.push('\n');
    }
    out
}

/// Writes `results.csv`, `table.txt`, `instances.csv` and one trace CSV per
/// kept run under `traces/`.
pub fn emit_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::path(out_dir, e))?;
    write_results_csv(&out_dir.join("results.csv"), &report.summaries)?;
    let table = out_dir.join("table.txt");
    fs::write(&table, render_table(&report.summaries)).map_err(|e| Error::path(&table, e))?;
    write_instances_csv(&out_dir.join("instances.csv"), &report.rows)?;
    if !report.traces.is_empty() {
        let dir = out_dir.join("traces");
        fs::create_dir_all(&dir).map_err(|e| Error::path(&dir, e))?;
        for t in &report.traces {
            let name = format!("{}_{}_{:05}.csv", sanitize(&t.method), t.protocol.label(), t.instance);
            write_trace_csv(&dir.join(name), &t.trace)?;
        }
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

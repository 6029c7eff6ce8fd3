use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use varhorizon::audit::{audit_pairs, calibrate, write_audit_csv};
use varhorizon::config::{Manifest, RunConfig};
use varhorizon::dataset::{generate_dataset, read_dataset, write_dataset, NormalizedDataset, Normalizer};
use varhorizon::diffusion::{train_planner, Planner};
use varhorizon::eval::{emit_report, evaluate, gen_test_set, MethodKind, MethodSpec, Protocol};
use varhorizon::execution::HorizonSource;
use varhorizon::lp::{train_length_predictor, LpModel};
use varhorizon::maze::{GoalSpec, MazeSpec, State};
use varhorizon::rng;

#[derive(Parser)]
#[command(name = "varhorizon", version, about = "Variable-horizon diffusion planning on point-mass mazes")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed. Overrides the config and re-derives every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an offline dataset of behavior episodes.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the length predictor.
    TrainLp {
        #[arg(long)]
        data: PathBuf,
        /// Scale the curriculum to this many total steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Train on anchor targets only (ablation).
        #[arg(long)]
        anchors_only: bool,
    },
    /// Train a planner on variable-length crops, or fixed-length with --fixed.
    TrainPlanner {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fixed: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Evaluate methods on a shared instance set.
    Eval(EvalArgs),
    /// Sample one plan and write it as CSV.
    Plan {
        #[arg(long)]
        planner: PathBuf,
        /// Horizon from this predictor; otherwise --len or the planner maximum.
        #[arg(long)]
        lp: Option<PathBuf>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long, value_parser = parse_xy)]
        start: [f64; 2],
        #[arg(long, value_parser = parse_xy)]
        goal: [f64; 2],
    },
    /// Compare predicted against oracle distances.
    AuditLp {
        #[arg(long)]
        lp: PathBuf,
        #[arg(long, default_value_t = 200)]
        pairs: usize,
        /// Held-out episodes for the bound-violation summary.
        #[arg(long)]
        held_out: Option<PathBuf>,
    },
    /// Write the maze grid and free cells.
    DumpMaze,
}

#[derive(Args)]
struct EvalArgs {
    /// Length predictor for VHD and FH+LP horizons
    #[arg(long)]
    lp: Option<PathBuf>,
    /// Variable-horizon planner checkpoint.
    #[arg(long)]
    vhd: Option<PathBuf>,
    /// Fixed-horizon planner as H=PATH; repeatable.
    #[arg(long, value_parser = parse_fh)]
    fh: Vec<(usize, PathBuf)>,
    /// Also run the H fixed-horizon planner with predicted horizons.
    #[arg(long)]
    fh_lp: Vec<usize>,
    /// Number of test instances [default: n_test from the config]
    #[arg(long)]
    instances: Option<usize>,
    /// Comma-separated subset of SS,RP.
    #[arg(long, value_delimiter = ',')]
    protocols: Vec<String>,
    /// Write per-run state traces
    #[arg(long)]
    traces: bool,
}

fn parse_xy(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [x, y] => Ok([x, y]),
        _ => Err("expected x,y".into()),
    }
}

fn parse_fh(s: &str) -> Result<(usize, PathBuf), String> {
    let (h, p) = s.split_once('=').ok_or("expected H=PATH")?;
    Ok((h.parse().map_err(|e| format!("{e}"))?, PathBuf::from(p)))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default().resolve()?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.data.seed = rng::derive(s, "data");
        cfg.lp.seed = rng::derive(s, "lp");
        cfg.planner.seed = rng::derive(s, "planner");
        cfg.eval.seed = rng::derive(s, "eval");
    }
    Ok(cfg)
}

fn load_data(path: &Path, spec: &MazeSpec) -> Result<NormalizedDataset> {
    let eps = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(NormalizedDataset::new(&eps, &Normalizer::from_spec(spec)))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    let spec = cfg.maze.build()?;
    let out = &cli.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let mut manifest;
    match &cli.cmd {
        Cmd::GenData { episodes } => {
            if let Some(n) = episodes {
                cfg.data.episodes = *n;
            }
            manifest = Manifest::new("gen-data", &cfg);
            let eps = generate_dataset(&spec, &cfg.data)?;
            let path = out.join("dataset.vhd");
            write_dataset(&path, &eps)?;
            info!("{} episodes, {} states", eps.len(), eps.iter().map(|e| e.len()).sum::<usize>());
            manifest.add("dataset", &path)?;
        }
        Cmd::TrainLp { data, steps, anchors_only } => {
            if let Some(n) = steps {
                cfg.lp.curriculum = cfg.lp.curriculum.clone().with_total_steps(*n);
            }
            if *anchors_only {
                cfg.lp.curriculum = cfg.lp.curriculum.anchors_only();
            }
            manifest = Manifest::new("train-lp", &cfg);
            manifest.add("data", data)?;
            let nd = load_data(data, &spec)?;
            let trained = train_length_predictor(&nd, &cfg.lp, |row| {
                info!("lp step {} total {:.5}", row.step, row.losses.total)
            })?;
            let path = out.join("lp.vhdc");
            trained.model.save(&path, Some(&trained.ema))?;
            write_jsonl(&out.join("lp_log.jsonl"), &trained.log)?;
            if trained.rejected_steps > 0 {
                log::warn!("{} non-finite steps skipped", trained.rejected_steps);
            }
            manifest.add("lp", &path)?;
        }
        Cmd::TrainPlanner { data, fixed, steps, checkpoint_every } => {
            let mut pc = match fixed {
                Some(h) => cfg.fixed_planner(*h),
                None => cfg.planner.clone(),
            };
            if let Some(n) = steps {
                pc.steps = *n;
            }
            cfg.planner = pc.clone();
            manifest = Manifest::new("train-planner", &cfg);
            manifest.add("data", data)?;
            let nd = load_data(data, &spec)?;
            let stem = match fixed {
                Some(h) => format!("planner_fh{h}"),
                None => "planner_vhd".to_string(),
            };
            let trained = train_planner(
                &nd,
                &pc,
                *checkpoint_every,
                |row| info!("planner step {} loss {:.5}", row.step, row.loss),
                |step, p, ema| {
                    p.save(&out.join(format!("{stem}_{step}.vhdc")), Some(ema))
                },
            )?;
            let path = out.join(format!("{stem}.vhdc"));
            trained.planner.save(&path, Some(&trained.ema))?;
            write_jsonl(&out.join(format!("{stem}_log.jsonl")), &trained.log)?;
            manifest.add("planner", &path)?;
        }
        Cmd::Eval(a) => {
            if let Some(n) = a.instances {
                cfg.n_test = n;
            }
            if !a.protocols.is_empty() {
                cfg.eval.protocols = a.protocols.iter().map(|s| Protocol::parse(s)).collect::<Result<_, _>>()?;
            }
            cfg.eval.keep_traces = a.traces;
            manifest = Manifest::new("eval", &cfg);
            let lp = match &a.lp {
                Some(p) => {
                    manifest.add("lp", p)?;
                    Some(LpModel::load(p)?)
                }
                None => None,
            };
            let predicted = || -> Result<HorizonSource> {
                let lp = lp.clone().context("this method needs --lp")?;
                Ok(HorizonSource::Predicted { lp, cfg: cfg.horizon })
            };
            let mut methods = Vec::new();
            if let Some(p) = &a.vhd {
                manifest.add("vhd", p)?;
                methods.push(MethodSpec::new("VHD", MethodKind::Vhd, Arc::new(Planner::load(p)?), predicted()?)?);
            }
            let mut fh = Vec::new();
            for (h, p) in &a.fh {
                manifest.add(&format!("fh{h}"), p)?;
                let pl = Arc::new(Planner::load(p)?);
                methods.push(MethodSpec::new(&format!("FH-{h}"), MethodKind::Fh, pl.clone(), HorizonSource::Constant(*h))?);
                fh.push((*h, pl));
            }
            for h in &a.fh_lp {
                let Some((_, pl)) = fh.iter().find(|(k, _)| k == h) else {
                    bail!("--fh-lp {h} needs a matching --fh {h}=PATH");
                };
                methods.push(MethodSpec::new(&format!("FH{h}+LP"), MethodKind::FhLp, pl.clone(), predicted()?)?);
            }
            if methods.is_empty() {
                log::warn!("no methods given; writing an empty report");
            }
            let insts = gen_test_set(&spec, cfg.n_test, cfg.eval.eps, cfg.t_max(), rng::derive(cfg.seed, "test-set"))?;
            let report = evaluate(&spec, &methods, &insts, &cfg.eval)?;
            emit_report(&report, out)?;
            fs::write(out.join("maze.txt"), spec.to_text())?;
            print!("{}", fs::read_to_string(out.join("table.txt"))?);
            manifest.add("results", &out.join("results.csv"))?;
        }
        Cmd::Plan { planner, lp, len, start, goal } => {
            manifest = Manifest::new("plan", &cfg);
            manifest.add("planner", planner)?;
            let pl = Planner::load(planner)?;
            let norm = Normalizer::from_spec(&spec);
            let (s, g) = (State::at_rest(*start), State::at_rest(*goal));
            for (name, st) in [("start", &s), ("goal", &g)] {
                if !spec.is_free(st.pos) {
                    bail!("{name} {:?} is not in free space", st.pos);
                }
            }
            let horizon = match (lp, len) {
                (_, Some(l)) => HorizonSource::Constant(*l),
                (Some(p), None) => HorizonSource::Predicted { lp: LpModel::load(p)?, cfg: cfg.horizon },
                (None, None) => HorizonSource::Constant(pl.length_bounds().1),
            };
            let gs = GoalSpec::new(g.pos, cfg.eval.eps);
            let mut r = rng::seeded(rng::derive(cfg.seed, "plan"));
            let states = varhorizon::execution::plan_from(&pl, &horizon, &norm, &s, &gs, usize::MAX, &mut r)?;
            let path = out.join("plan.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["index", "x", "y", "vx", "vy"])?;
            for (i, st) in states.iter().enumerate() {
                w.write_record([i.to_string(), st.pos[0].to_string(), st.pos[1].to_string(), st.vel[0].to_string(), st.vel[1].to_string()])?;
            }
            w.flush()?;
            info!("plan of {} states", states.len());
            manifest.add("plan", &path)?;
        }
        Cmd::AuditLp { lp, pairs, held_out } => {
            manifest = Manifest::new("audit-lp", &cfg);
            manifest.add("lp", lp)?;
            let model = LpModel::load(lp)?;
            let seed = rng::derive(cfg.seed, "audit");
            let rows = audit_pairs(&spec, &model, &cfg.horizon, *pairs, seed)?;
            let path = out.join("audit_lp.csv");
            write_audit_csv(&path, &rows)?;
            manifest.add("audit", &path)?;
            if let Some(h) = held_out {
                manifest.add("held_out", h)?;
                let nd = load_data(h, &spec)?;
                let mut r = rng::seeded(seed);
                let c = calibrate(&spec, &model, &nd, *pairs, seed, &mut r)?;
                let text = serde_json::to_string_pretty(&c)?;
                println!("{text}");
                fs::write(out.join("calibration.json"), text)?;
            }
        }
        Cmd::DumpMaze => {
            manifest = Manifest::new("dump-maze", &cfg);
            let grid = out.join("maze.txt");
            fs::write(&grid, spec.to_text())?;
            let cells = out.join("free_cells.csv");
            let mut w = csv::Writer::from_path(&cells)?;
            w.write_record(["row", "col"])?;
            for (r, c) in spec.free_cells() {
                w.write_record([r.to_string(), c.to_string()])?;
            }
            w.flush()?;
            manifest.add("maze", &grid)?;
            manifest.add("free_cells", &cells)?;
        }
    }
    manifest.write(&out.join(format!("manifest_{}.json", manifest.command)))?;
    Ok(())
}

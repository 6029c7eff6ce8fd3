use std::sync::Arc;

use varhorizon::dataset::{generate_dataset, GenCfg, NormalizedDataset, Normalizer};
use varhorizon::diffusion::{train_planner, CropMode, DenoiserArch, Planner, PlannerTrainCfg};
use varhorizon::eval::{
    emit_report, evaluate, gen_test_set, read_instances_csv, read_results_csv, EvalCfg, MethodKind, MethodSpec,
    Protocol,
};
use varhorizon::execution::{plan_from, run_replan, run_single_shot, ExecCfg, Gains, HorizonSource};
use varhorizon::lp::{train_length_predictor, HorizonCfg, LpArch, LpTrainCfg};
use varhorizon::maze::{GoalSpec, MazeSpec, State};
use varhorizon::rng;

fn tiny_planner(data: &NormalizedDataset, crop: CropMode) -> Planner {
    let cfg = PlannerTrainCfg {
        arch: DenoiserArch {
            channels: 8,
            blocks: 2,
            kernel: 3,
            groups: 2,
            time_dim: 8,
            dilations: vec![1, 4],
            ..DenoiserArch::default()
        },
        t_diff: 8,
        batch: 4,
        steps: 30,
        crop,
        log_every: 10,
        ..PlannerTrainCfg::default()
    };
    train_planner(data, &cfg, 0, |_| {}, |_, _, _| Ok(())).unwrap().ema_planner()
}

fn setup() -> (MazeSpec, Normalizer, NormalizedDataset) {
    let spec = MazeSpec::builtin("umaze").unwrap();
    let norm = Normalizer::from_spec(&spec);
    let eps = generate_dataset(&spec, &GenCfg { episodes: 30, seed: 3, ..GenCfg::default() }).unwrap();
    let data = NormalizedDataset::new(&eps, &norm);
    (spec, norm, data)
}

#[test]
fn train_evaluate_and_report() {
    let (spec, _, data) = setup();
    let mut lcfg = LpTrainCfg::default();
    lcfg.arch = LpArch {
        rff_features: 8,
        hidden: 16,
        ..LpArch::default()
    };
    lcfg.curriculum.batch = 8;
    lcfg.curriculum = lcfg.curriculum.clone().with_total_steps(60);
    let lp = train_length_predictor(&data, &lcfg, |_| {}).unwrap().ema_model();
    let vhd = Arc::new(tiny_planner(&data, CropMode::Variable { l_min: 16, t_max: 64 }));
    let fh = Arc::new(tiny_planner(&data, CropMode::Fixed { h: 32 }));
    let hc = HorizonCfg {
        t_max: 64,
        ..HorizonCfg::default()
    };
    let methods = vec![
        MethodSpec::new("VHD", MethodKind::Vhd, vhd, HorizonSource::Predicted { lp: lp.clone(), cfg: hc }).unwrap(),
        MethodSpec::new("FH-32", MethodKind::Fh, fh.clone(), HorizonSource::Constant(32)).unwrap(),
        MethodSpec::new("FH+LP", MethodKind::FhLp, fh, HorizonSource::Predicted { lp, cfg: hc }).unwrap(),
    ];
    let insts = gen_test_set(&spec, 6, 0.04, 64, 1).unwrap();
    let cfg = EvalCfg {
        exec: ExecCfg {
            step_budget: 200,
            ..ExecCfg::default()
        },
        keep_traces: true,
        ..EvalCfg::default()
    };
    let report = evaluate(&spec, &methods, &insts, &cfg).unwrap();
    assert_eq!(report.rows.len(), 3 * 2 * 6);
    assert_eq!(report.summaries.len(), 6);
    for row in &report.rows {
        assert!(row.steps <= 200);
        if row.protocol == Protocol::SingleShot {
            assert!(row.steps <= row.first_horizon);
        } else {
            assert_eq!(row.steps, row.segment_steps);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let back = read_results_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(back, report.summaries);
    assert_eq!(read_instances_csv(&dir.path().join("instances.csv")).unwrap(), report.rows);
    let table = std::fs::read_to_string(dir.path().join("table.txt")).unwrap();
    assert!(table.contains("VHD") && table.contains("FH+LP"));
    assert!(dir.path().join("traces").read_dir().unwrap().count() > 0);
}

/// With replanning disabled entirely the replan protocol reduces to single-shot.
#[test]
fn infinite_threshold_matches_single_shot() {
    let (spec, norm, data) = setup();
    let planner = tiny_planner(&data, CropMode::Variable { l_min: 16, t_max: 64 });
    let insts = gen_test_set(&spec, 5, 0.04, 64, 9).unwrap();
    let gains = Gains::default();
    let cfg = ExecCfg {
        replan_err_threshold: f64::INFINITY,
        replan_on_exhaustion: false,
        ..ExecCfg::default()
    };
    for inst in &insts {
        let gs = GoalSpec::new(inst.goal.pos, 0.04);
        let h = HorizonSource::Constant(40);
        let plan = plan_from(&planner, &h, &norm, &inst.start, &gs, 10_000, &mut rng::seeded(inst.id as u64)).unwrap();
        let ss = run_single_shot(&spec, &inst.start, &plan, &gains, &cfg, &gs, &norm).unwrap();
        let mut r = rng::seeded(inst.id as u64);
        let mut f = |s: &State, rem: usize| plan_from(&planner, &h, &norm, s, &gs, rem + 1, &mut r);
        let rp = run_replan(&spec, &inst.start, &mut f, &gains, &cfg, &gs, &norm).unwrap();
        assert_eq!(rp.trace, ss.trace);
        assert_eq!(rp.success, ss.success);
        assert_eq!(rp.replan_count, 0);
    }
}

/// A check interval longer than the budget never triggers a replan.
#[test]
fn sparse_checks_execute_only_the_first_plan() {
    let (spec, norm, data) = setup();
    let planner = tiny_planner(&data, CropMode::Variable { l_min: 16, t_max: 64 });
    let insts = gen_test_set(&spec, 4, 0.04, 64, 4).unwrap();
    let cfg = ExecCfg {
        step_budget: 100,
        replan_check_every: 101,
        replan_err_threshold: 1e-9,
        replan_on_exhaustion: false,
    };
    for inst in &insts {
        let gs = GoalSpec::new(inst.goal.pos, 0.04);
        let mut r = rng::seeded(1);
        let mut calls = 0;
        let mut f = |s: &State, rem: usize| {
            calls += 1;
            plan_from(&planner, &HorizonSource::Constant(64), &norm, s, &gs, rem + 1, &mut r)
        };
        let res = run_replan(&spec, &inst.start, &mut f, &Gains::default(), &cfg, &gs, &norm).unwrap();
        assert_eq!(res.replan_count, 0);
        assert!(res.executed_steps <= 63);
        assert_eq!(calls, 1);
    }
}

mod common;

use common::{batches, sums, tiny};
use gct_core::experiment::{self, prepare};
use gct_core::metrics::report;
use gct_core::trainer::{read_log, supervised_step, train_step_flaw, train_step_tasks, Method, TrainState};

#[test]
fn alternating_steps_touch_only_their_own_networks() {
    let (cfg, data) = prepare(&tiny(&["training.flaw_lr=1e-3"])).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    state.rampup = 1.0;
    for batch in batches(&cfg, &data, 50) {
        let (t1, t2, f) = sums(&state);
        let l = train_step_tasks(&cfg, &mut state, &batch).unwrap();
        assert!(l.total.iter().all(|v| v.is_finite()));
        let (t1b, t2b, fb) = sums(&state);
        assert_eq!(fb, f, "task step moved the flaw detector");
        assert!(t1b != t1 && t2b != t2);
        train_step_flaw(&cfg, &mut state, &batch).unwrap();
        let (t1c, t2c, fc) = sums(&state);
        assert_eq!((t1c, t2c), (t1b, t2b), "flaw step moved a task model");
        assert_ne!(fc, fb);
    }
}

#[test]
fn unconstrained_gct_matches_supervised_training() {
    let exp = tiny(&["ssl.lambda_dc=0", "ssl.lambda_fc=0"]);
    let (cfg, data) = prepare(&exp).unwrap();
    let mut gct = TrainState::new(&cfg).unwrap();
    let mut solo = Vec::new();
    for seed in [cfg.seeds.model1, cfg.seeds.model2] {
        let mut c = cfg.clone();
        c.method = Method::SupOnly;
        c.seeds.model1 = seed;
        solo.push(TrainState::new(&c).unwrap());
    }
    gct.rampup = 1.0;
    for batch in batches(&cfg, &data, 12) {
        train_step_tasks(&cfg, &mut gct, &batch).unwrap();
        train_step_flaw(&cfg, &mut gct, &batch).unwrap();
        for s in solo.iter_mut() {
            supervised_step(s.t1.as_ref(), &mut s.opt1, &batch.x_l, &batch.y_l).unwrap();
        }
        let (t1, t2, _) = sums(&gct);
        assert_eq!(t1, solo[0].t1.params().checksum().unwrap());
        assert_eq!(t2, solo[1].t1.params().checksum().unwrap());
    }
}

#[test]
fn reruns_write_identical_logs_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = tiny(&["training.epochs=2"]);
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        experiment::run(&exp, Some(d)).unwrap();
    }
    let logs: Vec<_> = dirs.iter().map(|d| std::fs::read(d.join("metrics.jsonl")).unwrap()).collect();
    assert_eq!(logs[0], logs[1]);
    assert_eq!(read_log(&dirs[0].join("metrics.jsonl")).unwrap().len(), 2);

    let first = report(&experiment::collect_reports(&dirs[..1]).unwrap()).unwrap().to_text();
    let again = report(&experiment::collect_reports(&dirs[..1]).unwrap()).unwrap().to_text();
    assert_eq!(first, again);

    let best = experiment::collect_reports(&dirs[..1]).unwrap()[0].best_metric;
    let restored = experiment::evaluate_run(&dirs[0], None).unwrap();
    assert_eq!(restored, best);
    let snap = experiment::load_run_config(&dirs[0]).unwrap();
    assert_eq!(snap, exp);
}

#[test]
fn task_models_may_differ_in_size() {
    let (cfg, data) = prepare(&tiny(&["models.widths2=[8, 12, 16]", "training.epochs=1"])).unwrap();
    let out = gct_core::trainer::fit(&cfg, &data, None).unwrap();
    let (t1, t2) = (out.state.t1.params(), out.state.t2.as_ref().unwrap().params());
    assert!(t2.parameter_count() < t1.parameter_count());
    assert!(out.report.best_metric.is_finite());
}

use repairprune::arch::{gaussian_calibration, gaussian_images, gen_toynet, ToyNetSpec};
use repairprune::calib::CalibrationSet;
use repairprune::harness::{
    calib_sensitivity, evaluate_topk, run_sweep_with, self_labeled, Experiment, ExperimentConfig,
    Rule,
};
use repairprune::repair::RepairConfig;

fn experiment() -> (Experiment, ExperimentConfig) {
    let spec = ToyNetSpec {
        channels: vec![4, 8],
        input_shape: [3, 8, 8],
        ..Default::default()
    };
    let net = gen_toynet(21, &spec).unwrap();
    let calib = CalibrationSet::new(gaussian_calibration(22, 2, 8, &[3, 8, 8]).unwrap()).unwrap();
    let eval = self_labeled(
        &net,
        (0..2)
            .map(|i| gaussian_images(30 + i, 16, &[3, 8, 8]).unwrap())
            .collect(),
    )
    .unwrap();
    let cfg = ExperimentConfig {
        grid: vec![0.5, 0.7, 0.9],
        targets: vec![0.6, 0.8],
        rules: vec![Rule::Uniform, Rule::Erk, Rule::Rr],
        repair: RepairConfig {
            bn_batches: 2,
            bn_batch_size: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    (
        Experiment {
            net,
            calib,
            eval: Some(eval),
        },
        cfg,
    )
}

#[test]
fn dense_self_labeled_accuracy_is_perfect() {
    let (exp, _) = experiment();
    assert_eq!(
        evaluate_topk(&exp.net, exp.eval.as_ref().unwrap()).unwrap(),
        1.0
    );
}

#[test]
fn sweep_rows_are_complete() {
    let (exp, cfg) = experiment();
    let out = run_sweep_with(&exp, &cfg).unwrap();
    assert_eq!(out.rows.len(), cfg.targets.len() * cfg.rules.len());
    for row in &out.rows {
        assert!(row.error.is_none(), "{row:?}");
        let acc = row.eval_top1.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(row.j_rr.unwrap().is_finite());
        assert!(row.achieved_s.unwrap() >= row.target - 1e-12);
    }
    assert_eq!(out.transition_inputs.len(), 1);
    assert_eq!(out.curve_builds, 1);
}

#[test]
fn unseeded_calibration_makes_seeds_identical() {
    let (exp, cfg) = experiment();
    let cfg = ExperimentConfig {
        seeds: vec![0, 5],
        seed_calibration: false,
        ..cfg
    };
    let out = run_sweep_with(&exp, &cfg).unwrap();
    let (a, b): (Vec<_>, Vec<_>) = out.rows.iter().partition(|r| r.seed == 0);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        let mut y = (*y).clone();
        y.seed = 0;
        assert_eq!(**x, y);
    }
}

#[test]
fn full_size_sensitivity_matches_baseline() {
    let (exp, cfg) = experiment();
    let base = run_sweep_with(&exp, &cfg).unwrap();
    let full = exp.calib.num_images();
    let rows = calib_sensitivity(&exp, &cfg, &[8, full]).unwrap();
    assert_eq!(rows.len(), 2 * cfg.targets.len());
    for r in rows.iter().filter(|r| r.calib_images == full) {
        let b = base
            .rows
            .iter()
            .find(|b| b.rule == Rule::Rr && b.target == r.target)
            .unwrap();
        assert_eq!(
            (r.achieved_s, r.j_rr, r.eval_top1),
            (b.achieved_s, b.j_rr, b.eval_top1)
        );
    }
    assert!(rows.iter().all(|r| r.error.is_none()));
}

#[test]
fn sweep_writes_outputs() {
    let (exp, cfg) = experiment();
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        output_dir: Some(dir.path().to_path_buf()),
        ..cfg
    };
    let out = run_sweep_with(&exp, &cfg).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv, out.csv().unwrap());
    assert_eq!(csv.lines().count(), out.rows.len() + 1);
    for name in [
        "curves_seed0.json",
        "transition_seed0.json",
        "runs/seed0_rr_0.8.json",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

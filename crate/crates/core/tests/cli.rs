use std::path::Path;
use std::process::Command;

fn run(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_repairprune"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    run(
        d,
        &[
            "gen-toynet",
            "--out-dir",
            ".",
            "--channels",
            "4,8",
            "--image-size",
            "8",
            "--calib-batches",
            "2",
            "--batch-size",
            "8",
            "--eval-batches",
            "1",
        ],
    );
    let config = serde_json::json!({
        "model_path": "model.spnr",
        "calib_path": "calib.spnr",
        "eval_path": "eval.spnr",
        "grid": [0.5, 0.7, 0.9],
        "targets": [0.6],
        "rules": ["uniform", "erk", "rr"],
        "repair": { "bn_batches": 2, "bn_batch_size": 8 }
    });
    std::fs::write(d.join("config.json"), config.to_string()).unwrap();
    let c = ["--config", "config.json"];

    run(d, &[&c[..], &["diagnose", "--out", "curves.json"]].concat());
    assert_eq!(
        json(&d.join("curves.json"))["grid"],
        serde_json::json!([0.5, 0.7, 0.9])
    );
    run(
        d,
        &[
            &c[..],
            &[
                "--grid", "0.6,0.8", "diagnose", "--tap", "post-bn", "--out", "bn.json",
            ],
        ]
        .concat(),
    );
    assert_eq!(
        json(&d.join("bn.json"))["grid"],
        serde_json::json!([0.6, 0.8])
    );

    let stdout = run(
        d,
        &[
            &c[..],
            &[
                "allocate",
                "--rule",
                "rr",
                "--target",
                "0.6",
                "--curves",
                "curves.json",
                "--out",
                "alloc.json",
            ],
        ]
        .concat(),
    );
    assert!(stdout.contains("achieved global sparsity"));
    run(
        d,
        &[
            &c[..],
            &[
                "repair",
                "--alloc",
                "alloc.json",
                "--out",
                "repaired.spnr",
                "--dump-scales",
                "scales.json",
            ],
        ]
        .concat(),
    );
    assert!(json(&d.join("scales.json")).as_object().unwrap().len() > 1);

    let dense = run(d, &[&c[..], &["evaluate"]].concat());
    assert_eq!(
        serde_json::from_str::<serde_json::Value>(&dense).unwrap()["top1"],
        1.0
    );
    let pruned = run(
        d,
        &[&c[..], &["evaluate", "--model", "repaired.spnr"]].concat(),
    );
    let top1 = serde_json::from_str::<serde_json::Value>(&pruned).unwrap()["top1"]
        .as_f64()
        .unwrap();
    assert!((0.0..=1.0).contains(&top1));

    run(d, &[&c[..], &["sweep", "--out-dir", "out"]].concat());
    let csv = std::fs::read_to_string(d.join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let stdout = run(
        d,
        &[
            &c[..],
            &[
                "detect-transition",
                "--input",
                "out/transition_seed0.json",
                "--out",
                "profile.json",
                "--csv",
                "profile.csv",
            ],
        ]
        .concat(),
    );
    assert!(stdout.contains("broad band"));
    assert!(d.join("profile.csv").exists());

    let stdout = run(
        d,
        &[
            "erk-diagnostic",
            "--arch",
            "resnet18",
            "--target",
            "0.9",
            "--out",
            "erk.json",
        ],
    );
    assert!(stdout.contains("layer4.0.downsample.0"));
    let stdout = run(
        d,
        &[&c[..], &["calib-sensitivity", "--sizes", "8,16"]].concat(),
    );
    assert_eq!(stdout.lines().count(), 3);
}

#[test]
fn bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("junk.spnr"), b"nope").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_repairprune"))
        .current_dir(tmp.path())
        .args(["evaluate", "--model", "junk.spnr", "--eval", "junk.spnr"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

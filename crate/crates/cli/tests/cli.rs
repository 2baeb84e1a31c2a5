use std::path::Path;
use std::process::{Command, Output};

use metasgd_cli::checkpoint::{load_checkpoint, to_trainer};
use metasgd_cli::config::parse_config_str;
use metasgd_cli::run::{run_eval, run_experiment, CHECKPOINT, EVAL_SUMMARY, TRAIN_LOG};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metasgd"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

/// Sine config with a tiny evaluation; `extra` adds keys, and the learner
/// and iteration count default to metasgd and 10 when it does not set them.
fn small_sine(out: &Path, extra: &str) -> String {
    let mut extra = extra.to_string();
    if !extra.contains("\"meta_learner\"") {
        extra.push_str(r#", "meta_learner": "metasgd""#);
    }
    if !extra.contains("\"train.iterations\"") {
        extra.push_str(r#", "train.iterations": 10"#);
    }
    format!(
        r#"{{"experiment": "sine", "seed": 1, "output_dir": {:?},
            "eval.curves": 4, "eval.repeats": 2, "eval.test_points": 20{extra}}}"#,
        out.to_str().unwrap()
    )
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn ten_iteration_sine_run_writes_ten_log_rows_and_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.json", &small_sine(&out, ""));
    let o = bin().arg("train").arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));

    let log = std::fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iteration,mean_test_loss_or_return,wall_ms");
    assert_eq!(lines.len(), 11);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[0], (i + 1).to_string());
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
        assert_eq!(cols[2], "0");
    }

    let eval = std::fs::read_to_string(out.join(EVAL_SUMMARY)).unwrap();
    let rows: Vec<&str> = eval.lines().collect();
    assert_eq!(rows[0], "setting,mean,ci95_half");
    assert!(rows[1].starts_with("5-shot,"));
    assert!(rows[2].starts_with("10-shot,"));
    assert!(rows[3].starts_with("20-shot,"));

    let (trainer, _) = to_trainer(&load_checkpoint(&out.join(CHECKPOINT)).unwrap()).unwrap();
    assert_eq!(trainer.iteration, 10);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut cfg = parse_config_str(&small_sine(&out, "")).unwrap();
        cfg.output_dir = out.clone();
        run_experiment(&cfg).unwrap();
        [TRAIN_LOG, EVAL_SUMMARY, CHECKPOINT].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn eval_reproduces_training_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = parse_config_str(&small_sine(&out, "")).unwrap();
    let trained = run_experiment(&cfg).unwrap();
    let first = std::fs::read(out.join(EVAL_SUMMARY)).unwrap();
    std::fs::remove_file(out.join(EVAL_SUMMARY)).unwrap();

    let (rows, same) = run_eval(&cfg, &out.join(CHECKPOINT)).unwrap();
    assert!(same);
    assert_eq!(rows, trained.eval);
    assert_eq!(std::fs::read(out.join(EVAL_SUMMARY)).unwrap(), first);

    let cfg_path = write_config(dir.path(), "c.json", &small_sine(&out, ""));
    let o = bin()
        .args(["eval", cfg_path.to_str().unwrap(), "--checkpoint"])
        .arg(out.join(CHECKPOINT))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(out.join(EVAL_SUMMARY)).unwrap(), first);
}

#[test]
fn eval_rejects_mismatched_learner() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_experiment(&parse_config_str(&small_sine(&out, "")).unwrap()).unwrap();
    let other = parse_config_str(&small_sine(&out, r#", "meta_learner": "maml""#)).unwrap();
    assert_eq!(run_eval(&other, &out.join(CHECKPOINT)).unwrap_err().exit_code(), 1);
    let other = parse_config_str(&small_sine(&out, r#", "model.hidden": [10]"#)).unwrap();
    assert_eq!(run_eval(&other, &out.join(CHECKPOINT)).unwrap_err().exit_code(), 1);
}

#[test]
fn export_curve_emits_grid_and_training_points() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), "c.json", &small_sine(&out, ""));
    assert!(bin().arg("train").arg(&cfg).output().unwrap().status.success());
    let run = || {
        bin()
            .arg("export-curve")
            .arg(out.join(CHECKPOINT))
            .args(["--task-seed", "7"])
            .output()
            .unwrap()
    };
    let o = run();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kind,x,truth,pre_adaptation,post_adaptation");
    assert_eq!(lines.iter().filter(|l| l.starts_with("grid,")).count(), 100);
    assert_eq!(lines.iter().filter(|l| l.starts_with("train,")).count(), 5);
    assert!(lines[1].starts_with("grid,-5,"));
    assert!(lines[100].starts_with("grid,5,"));
    assert_eq!(stdout(&run()), text);
}

#[test]
fn gradcheck_passes_and_names_injected_fault() {
    let o = bin().arg("gradcheck").output().unwrap();
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("quadratic closed-form meta-gradient"));
    assert!(text.contains("meta-gradient LSTM BPTT"));
    assert!(!text.contains("FAIL"));

    let o = bin().args(["gradcheck", "--inject-fault", "tanh"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let text = stdout(&o);
    assert!(text.contains("FAIL op tanh "), "{text}");
    assert!(text.contains("offending op: tanh"), "{text}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["train", "/nonexistent/c.json"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));

    let bad = write_config(dir.path(), "bad.json", r#"{"experiment": "sine", "foo": 1}"#);
    let o = bin().arg("train").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("foo"));

    let out = dir.path().join("diverge");
    let cfg = write_config(
        dir.path(),
        "div.json",
        &small_sine(&out, r#", "train.optimizer": "sgd", "train.outer_lr": 1e200"#),
    );
    let o = bin().arg("train").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("iteration"));

    let o = bin()
        .args(["export-curve", "/nonexistent.bin", "--task-seed", "1"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn cluster_and_navigation_runs_write_their_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cluster");
    let cfg = parse_config_str(&format!(
        r#"{{"experiment": "cluster", "output_dir": {:?}, "train.iterations": 3, "eval.episodes": 5}}"#,
        out.to_str().unwrap()
    ))
    .unwrap();
    let res = run_experiment(&cfg).unwrap();
    assert_eq!(res.log.records.len(), 3);
    assert_eq!(res.eval[0].setting, "5-way 1-shot accuracy");
    assert!((0.0..=1.0).contains(&res.eval[0].mean));

    for (exp, name) in [("nav-fixed", "fixed"), ("nav-random", "random")] {
        let out = dir.path().join(name);
        let cfg = parse_config_str(&format!(
            r#"{{"experiment": "{exp}", "output_dir": {:?}, "train.iterations": 1,
                "train.meta_batch": 2, "rl.n1": 2, "rl.n2": 2, "rl.eval_tasks": 3,
                "rl.horizon": 5, "model.hidden": [8]}}"#,
            out.to_str().unwrap()
        ))
        .unwrap();
        let res = run_experiment(&cfg).unwrap();
        let settings: Vec<&str> = res.eval.iter().map(|r| r.setting.as_str()).collect();
        assert_eq!(settings, ["pre_adaptation", "post_adaptation", "improved_fraction"]);
        assert!(res.eval[0].mean <= 0.0);
    }
}

#[test]
fn lstm_and_maml_runs_round_trip_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    for learner in ["maml", "lrlstm"] {
        let out = dir.path().join(learner);
        let cfg = parse_config_str(&small_sine(
            &out,
            &format!(r#", "meta_learner": "{learner}", "train.iterations": 2"#),
        ))
        .unwrap();
        let res = run_experiment(&cfg).unwrap();
        let (back, _) = to_trainer(&load_checkpoint(&res.checkpoint_path).unwrap()).unwrap();
        assert_eq!(back, res.trainer);
        let (rows, _) = run_eval(&cfg, &res.checkpoint_path).unwrap();
        assert_eq!(rows, res.eval);
    }
}

use std::path::Path;
use std::process::{Command, Output};

fn hjbnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjbnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_LQR: &str = r#"
[problem]
preset = "lqr"

[train]
iterations = 20
batch_size = 8
val_size = 8
log_every = 10
n_t_train = 5
n_t_val = 10
width = 8

[baseline]
n_t = 10
restarts = 2
steps = 100
lr_drop_at = 50
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn strip_wall_time(v: &mut serde_json::Value) {
    v.as_object_mut().unwrap().remove("wall_time");
}

#[test]
fn export_echoes_corridor_multipliers_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[problem]\npreset = \"corridor\"\n");
    let first = hjbnet(&["export", "--config", &cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    let text = stdout(&first);
    for needle in ["alpha1 = 100.0", "alpha2 = 10000.0", "alpha3 = 300.0"] {
        assert!(text.contains(needle), "missing {needle}");
    }
    let again = write_config(dir.path(), &text);
    let second = hjbnet(&["export", "--config", &again]);
    assert_eq!(stdout(&second), text);
}

#[test]
fn unknown_fields_fail_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[problem]\npreset = \"lqr\"\nspeed = 3\n[train]\nepochs = 2\n");
    let out = hjbnet(&["export", "--config", &cfg]);
    assert!(!out.status.success());
    let err = stderr(&out);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error[config]:"), "{err}");
    assert!(line.contains("problem.speed") && line.contains("train.epochs"), "{line}");
}

#[test]
fn eval_without_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_LQR);
    let out_dir = dir.path().join("out");
    let out = hjbnet(&["eval", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).lines().last().unwrap().starts_with("error[io]:"));
}

#[test]
fn train_eval_shock_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_LQR);
    let out_dir = dir.path().join("out");
    let out = out_dir.to_str().unwrap();

    let t = hjbnet(&["train", "--config", &cfg, "--out", out, "--seed", "3"]);
    assert!(t.status.success(), "{}", stderr(&t));
    for f in ["checkpoint.json", "checkpoint_final.json", "history.csv", "config.toml"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("iteration,train_objective,val_ell,val_g,val_ell_plus_g,"));
    assert_eq!(history.lines().count(), 1 + 3);

    let mut reports = Vec::new();
    for _ in 0..2 {
        let e = hjbnet(&["eval", "--config", &cfg, "--out", out, "--with-baseline"]);
        assert!(e.status.success(), "{}", stderr(&e));
        assert!(stdout(&e).contains("Baseline"));
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
        strip_wall_time(&mut v);
        reports.push(v);
    }
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0]["ratio_to_baseline"].as_f64().is_some());
    let traj = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().filter(|l| l.starts_with("nn,")).count(), 11);
    assert_eq!(traj.lines().filter(|l| l.starts_with("baseline,")).count(), 11);

    let s = hjbnet(&["shock", "--config", &cfg, "--out", out]);
    assert!(s.status.success(), "{}", stderr(&s));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("shock_0_report.json")).unwrap()).unwrap();
    assert!(report["label"].as_str().unwrap().contains("t ∈ [0.1, 1]"));
    let traj = std::fs::read_to_string(out_dir.join("shock_1_trajectory.csv")).unwrap();
    assert_eq!(traj.lines().filter(|l| l.starts_with("nn_pre_shock,")).count(), 2);
    assert_eq!(traj.lines().filter(|l| l.starts_with("nn_post_shock,")).count(), 10);
}

#[test]
fn baseline_and_ablation_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{TINY_LQR}\n[ablation]\nseeds = [0]\nthreshold = 1.0\n\n[[ablation.variants]]\nname = \"none\"\nbeta1 = 0.0\nbeta2 = 0.0\nbeta3 = 0.0\nweight_decay = 0.0\n\n[[ablation.variants]]\nname = \"HJt\"\nbeta1 = 1.0\nbeta2 = 0.0\nbeta3 = 0.0\nweight_decay = 0.0\n"
    );
    let cfg = write_config(dir.path(), &text);
    let out_dir = dir.path().join("out");
    let out = out_dir.to_str().unwrap();
    let b = hjbnet(&["baseline", "--config", &cfg, "--out", out]);
    assert!(b.status.success(), "{}", stderr(&b));
    for f in ["baseline_schedule.json", "baseline_report.json", "baseline_trajectory.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let a = hjbnet(&["ablate", "--config", &cfg, "--out", out]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(out_dir.join("ablation/history_none_seed0.csv").exists());
    assert!(out_dir.join("ablation/history_hjt_seed0.csv").exists());
    assert!(out_dir.join("ablation/summary.json").exists());
}

#[test]
fn shipped_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let out = hjbnet(&["export", "--config", path.to_str().unwrap()]);
            assert!(out.status.success(), "{}: {}", path.display(), stderr(&out));
            seen += 1;
        }
    }
    assert!(seen >= 3);
}

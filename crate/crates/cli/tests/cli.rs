use std::fs;
use std::path::Path;

use polrep_cli::{run_command, CONFIG_ECHO, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

const TINY: &str = r#"
[env]
horizon = 16

[data]
n_knobs = 6
traj_per_knob = 4

[train]
context_length = 8
rep_epochs = 2
rep_batch = 4
reg_epochs = 2
reg_batch = 8
hidden = 8
latent_dim = 4
task_dim = 2
pool_dim = 4

[steer]
max_iters = 20
n_neighbors = 6
pca_rank = 2
n_eval = 2

[eval]
n_triplets = 200
n_queries = 3
n_paired_runs = 2
path_points = 3
cf_grid = [16, 32]
cf_trials = 3
"#;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["polrep"];
    argv.extend_from_slice(args);
    run_command(argv)
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["gen-data", "--config", &cfg, "--seed", "7", "--out", s(&a)]), EXIT_OK);
    assert_eq!(run(&["gen-data", "--config", &cfg, "--seed", "7", "--out", s(&b)]), EXIT_OK);
    assert_eq!(fs::read(a.join("dataset.prep")).unwrap(), fs::read(b.join("dataset.prep")).unwrap());
    let echo = fs::read_to_string(a.join(CONFIG_ECHO)).unwrap();
    assert_eq!(echo.matches("seed = 7").count(), 3, "{echo}");
}

#[test]
fn train_then_downstream_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let d = dir.path();
    let data = d.join("data");
    let model = d.join("model");
    assert_eq!(run(&["gen-data", "--config", &cfg, "--out", s(&data)]), EXIT_OK);
    let ds = data.join("dataset.prep");
    assert_eq!(run(&["train", "--config", &cfg, "--data", s(&ds), "--out", s(&model)]), EXIT_OK);
    let ckpt = model.join("model.pbnd");
    for f in ["model.pbnd", "train_phase1.csv", "train_phase2.csv", CONFIG_ECHO] {
        assert!(model.join(f).exists(), "{f}");
    }

    let probe = d.join("probe");
    let named = format!("full={}", s(&ckpt));
    let args = ["probe", "--config", &cfg, "--data", s(&ds), "--checkpoint", &named, "--checkpoint", s(&ckpt), "--out", s(&probe)];
    assert_eq!(run(&args), EXIT_OK);
    let csv = fs::read_to_string(probe.join("probe.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,task,train_mse,test_mse");
    assert!(csv.contains("\nfull,0,") && csv.contains("\nmodel,1,"), "{csv}");

    let im = d.join("im");
    assert_eq!(run(&["eval-imitation", "--config", &cfg, "--data", s(&ds), "--checkpoint", s(&ckpt), "--out", s(&im)]), EXIT_OK);
    assert!(im.join("imitation_train.csv").exists() && im.join("imitation_test.csv").exists());

    let st = d.join("steer");
    let args = ["steer", "--config", &cfg, "--checkpoint", s(&ckpt), "--target", "5", "--constraint", "1:-4", "--start", "0", "--out", s(&st)];
    assert_eq!(run(&args), EXIT_OK);
    assert!(fs::read_to_string(st.join("result.txt")).unwrap().contains("termination = "));
    assert!(fs::read_to_string(st.join("trace.csv")).unwrap().starts_with("t,h_norm,v0,v1,lambda0,feasible"));

    let bench = d.join("bench");
    assert_eq!(run(&["bench-steer", "--config", &cfg, "--checkpoint", s(&ckpt), "--out", s(&bench)]), EXIT_OK);
    let csv = fs::read_to_string(bench.join("bench_steer.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(bench.join("projection_gap.csv").exists());

    let plot = d.join("plot");
    assert_eq!(run(&["plot", "--config", &cfg, "--checkpoint", s(&ckpt), "--out", s(&plot)]), EXIT_OK);
    assert!(fs::read_to_string(plot.join("pca.svg")).unwrap().starts_with("<svg"));
    assert!(plot.join("pca.csv").exists() && plot.join("ordering.csv").exists());
}

#[test]
fn cf_rate_writes_slope_footer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("cf");
    assert_eq!(run(&["cf-rate", "--config", &cfg, "--out", s(&out)]), EXIT_OK);
    let csv = fs::read_to_string(out.join("cf_rate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("slope,"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(run(&["gen-data", "--bogus"]), EXIT_USAGE);
    assert_eq!(run(&["no-such-command"]), EXIT_USAGE);
    assert_eq!(run(&["gen-data", "--seed", "x"]), EXIT_USAGE);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nfoo = 1\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&bad), "--out", s(&out)]), EXIT_USAGE);
    fs::write(&bad, "[env]\ndrag = 2.0\n").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&bad), "--out", s(&out)]), EXIT_USAGE);
    assert!(!out.exists());
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(run(&["--help"]), EXIT_OK);
    assert_eq!(run(&["train", "--help"]), EXIT_OK);
}

#[test]
fn runtime_failures_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = dir.path().join("missing.pbnd");
    assert_eq!(run(&["plot", "--checkpoint", s(&missing), "--out", s(&out)]), EXIT_RUNTIME);
    assert!(!out.exists());
    let garbage = dir.path().join("garbage.pbnd");
    fs::write(&garbage, b"PBND\x01\x00\x00\x00").unwrap();
    assert_eq!(run(&["bench-steer", "--checkpoint", s(&garbage), "--out", s(&out)]), EXIT_RUNTIME);
    assert!(!out.exists());
}

#[test]
fn unwritable_output_is_cleaned_up() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("o");
    fs::create_dir_all(out.join("dataset.prep")).unwrap();
    assert_eq!(run(&["gen-data", "--config", &cfg, "--out", s(&out)]), EXIT_RUNTIME);
    assert!(!out.join(CONFIG_ECHO).exists());
}

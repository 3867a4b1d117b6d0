use std::path::Path;
use std::process::{Command, Output};

use goboed::io::{read_sweep_csv, run_command};

fn goboed(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_goboed")).current_dir(dir).args(args).env("GOBOED_THREADS", "2").output().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run_command(["goboed", "no-such-command"]), 1);
    assert_eq!(run_command(["goboed", "sweep-eig"]), 1);
    assert_eq!(run_command(["goboed", "--help"]), 0);
}

#[test]
fn bad_config_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "model = pk\nseed = 2\n[budgets]\nn_outer_eig = many\n").unwrap();
    let out = goboed(dir.path(), &["sweep-eig", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn corrupt_weights_are_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("w.txt"), "GOBOED-W1\nmodel pk\nchecksum 0000000000000000\n").unwrap();
    std::fs::write(dir.path().join("exp.cfg"), "model = pk\nweights = w.txt\n[budgets]\nn_outer_cost = 4\n").unwrap();
    let out = goboed(dir.path(), &["sweep-cost", "--config", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn srcloc_eig_sweep_writes_every_grid_design() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "model = srcloc\nseed = 5\noutput_dir = out\n[budgets]\nn_outer_eig = 30\nn_inner_eig = 30\n";
    std::fs::write(dir.path().join("exp.cfg"), cfg).unwrap();
    let out = goboed(dir.path(), &["sweep-eig", "--config", "exp.cfg"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["srcloc_eig.csv", "srcloc_mse.csv"] {
        let rows = read_sweep_csv(&std::fs::read_to_string(dir.path().join("out").join(name)).unwrap()).unwrap();
        assert_eq!(rows.len(), 49, "{name}");
        assert!(rows.windows(2).all(|w| w[0].xi < w[1].xi));
        assert!(rows.iter().all(|r| r.value.is_finite() && r.xi.len() == 2));
    }
}

#[test]
fn null_space_check_passes_and_seed_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), "model = siqr\noutput_dir = out\n[decision]\nnull_space_instances = 12\n").unwrap();
    let a = goboed(dir.path(), &["check-theorem1", "--config", "exp.cfg", "--seed", "4"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let first = std::fs::read_to_string(dir.path().join("out/null_space.csv")).unwrap();
    assert_eq!(first.lines().count(), 13);
    goboed(dir.path(), &["check-theorem1", "--config", "exp.cfg", "--seed", "5"]);
    assert_ne!(std::fs::read_to_string(dir.path().join("out/null_space.csv")).unwrap(), first);
}

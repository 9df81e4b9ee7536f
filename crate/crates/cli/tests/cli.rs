use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_delaygame"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_scenario(dir: &Path, body: &str) -> String {
    let p = dir.join("scenario.toml");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn solve_reach_simulate_on_smoke_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let solve = tmp.path().join("solve");
    let o = run(&["solve", "--preset", "smoke", "--out", path(&solve)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["value.bin", "value_d0.csv", "cfl_history.csv", "solve.json", "value.gp", "manifest.json"] {
        assert!(solve.join(f).exists(), "{f}");
    }
    let header = fs::read(solve.join("value.bin")).unwrap();
    let first = header.split(|&b| b == b'\n').next().unwrap();
    assert!(String::from_utf8_lossy(first).starts_with("axes: e_p,e_v,d; counts: 11,11,11;"));

    let value = solve.join("value.bin");
    let reach = tmp.path().join("reach");
    let o = run(&["reach", "--preset", "smoke", "--value-file", path(&value), "--out", path(&reach)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(reach.join("safe_areas.csv").exists());
    assert!(reach.join("safe_set.gp").exists());

    let sim = tmp.path().join("sim");
    let o = run(&["simulate", "--preset", "smoke", "--value-file", path(&value), "--out", path(&sim)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(sim.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,e_p,e_v,d,u,v1,p1,v2,p2,phase\n"));
}

#[test]
fn manifest_hashes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["verify", "lk", "--preset", "smoke", "--out", path(tmp.path()), "--seed", "42"]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["scenario"]["seed"], 42);
    let outputs = m["outputs"].as_object().unwrap();
    assert!(outputs.contains_key("verify.txt"));
    assert!(outputs.values().all(|h| h.as_str().unwrap().len() == 64));
}

#[test]
fn missing_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    // value control without a value file
    assert_eq!(code(&run(&["simulate", "--preset", "smoke", "--out", path(&out)])), 2);
    assert_eq!(code(&run(&["reach", "--preset", "smoke", "--out", path(&out)])), 2);
    let nope = tmp.path().join("nope.bin");
    assert_eq!(code(&run(&["reach", "--preset", "smoke", "--value-file", path(&nope), "--out", path(&out)])), 2);
    assert_eq!(code(&run(&["solve", "--scenario", path(&nope), "--out", path(&out)])), 2);
    assert_eq!(code(&run(&["solve", "--preset", "fig9", "--out", path(&out)])), 2);
    assert_eq!(code(&run(&["verify", "lemma3", "--out", path(&out)])), 2);
    assert_eq!(code(&run(&["repro", "fig1", "--out", path(&out)])), 2);
}

#[test]
fn malformed_scenario_or_dump_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let sc = write_scenario(tmp.path(), "grid = [11, 11, 11]\nunknown_key = 3\n");
    let o = run(&["solve", "--scenario", &sc, "--out", path(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_key"));
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, "not a dump\n").unwrap();
    assert_eq!(code(&run(&["reach", "--preset", "smoke", "--value-file", path(&bad), "--out", path(&out)])), 2);
}

#[test]
fn divergence_exits_with_three_and_keeps_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    // explicit RK4 far outside its stability region
    let sc = write_scenario(tmp.path(), "k = 10000.0\ndelay = \"none\"\ncontrol = \"none\"\ndt = 0.1\nsim_horizon = 1000.0\ncsv_stride = 1\n");
    let o = run(&["simulate", "--scenario", &sc, "--out", path(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.lines().count() > 2);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn overflowing_value_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let sc = write_scenario(tmp.path(), "grid = [5, 5, 3]\nev_range = [-1e200, 1e200]\nhorizon = 0.1\n");
    let o = run(&["solve", "--scenario", &sc, "--out", path(&out)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn failed_check_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    // the fig3 repro criteria cannot hold on a 5 s run
    let sc = write_scenario(tmp.path(), "grid = [7, 7, 5]\nhorizon = 0.5\ndelay = \"onset\"\ndelay_onset = 2.0\ncontrol = \"value\"\ncontrol_start = 4.0\nsim_horizon = 5.0\ndt = 0.01\n");
    let o = run(&["repro", "fig3", "--scenario", &sc, "--out", path(tmp.path())]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let criteria = fs::read_to_string(tmp.path().join("criteria.txt")).unwrap();
    assert!(criteria.contains("FAIL [2C]"));
}

#[test]
fn identical_runs_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write_scenario(tmp.path(), "delay = \"sinusoidal\"\ncontrol = \"none\"\nsim_horizon = 20.0\ndt = 0.01\n");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        assert_eq!(code(&run(&["simulate", "--scenario", &sc, "--out", path(&out), "--threads", "2"])), 0);
        outputs.push((fs::read(out.join("trajectory.csv")).unwrap(), fs::read(out.join("manifest.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn preset_prints_round_trippable_toml() {
    let o = run(&["preset", "fig5"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("tstar = 0.24"));
    let tmp = tempfile::tempdir().unwrap();
    let sc = write_scenario(tmp.path(), &text);
    assert_eq!(code(&run(&["verify", "lk", "--scenario", &sc, "--out", path(tmp.path())])), 0);
}

use std::fs;
use std::net::UdpSocket;
use std::process::{Command, Output};

use dgate::net::spawn_responder;

fn dgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgate")).args(args).output().expect("spawn dgate")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn probe_local_responder() {
    let responder = spawn_responder("127.0.0.1:0").unwrap();
    let target = responder.addr.to_string();
    let o = dgate(&["probe", &target, "--repetitions", "20", "--timeout-ms", "200"]);
    responder.stop();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("min_us="), "{out}");
    assert!(out.contains("samples=20"), "{out}");
}

#[test]
fn probe_without_responder_fails() {
    // a bound but silent socket: nothing ever answers
    let silent = UdpSocket::bind("127.0.0.1:0").unwrap();
    let target = silent.local_addr().unwrap().to_string();
    let o = dgate(&["probe", &target, "--repetitions", "3", "--timeout-ms", "50"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn simulate_bundled_verdicts() {
    let o = dgate(&["simulate", "honest_inside"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("verdict=Allow"), "{}", stdout(&o));

    let o = dgate(&["simulate", "relocated_outside"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("verdict=Deny(RegionNotProven)"), "{}", stdout(&o));

    let o = dgate(&["simulate", "--list"]);
    assert_eq!(stdout(&o).lines().count(), 6);
}

#[test]
fn simulate_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = dgate(&["simulate", "honest_inside", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    for f in ["measurements.csv", "alerts.csv", "region.csv", "result.json", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = 3\n[[nodes]\n").unwrap();
    assert_eq!(dgate(&["simulate", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(dgate(&["processor", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(dgate(&["simulate", "no_such_scenario"]).status.code(), Some(2));
    assert_eq!(dgate(&["calibrate", "--profile", "tdx"]).status.code(), Some(2));
    assert_eq!(dgate(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn calibrate_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("runs.csv");
    let o = dgate(&["calibrate", "--profile", "sgx-like", "--repetitions", "10,100", "--runs", "20", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 41);
    let o = dgate(&["analyze", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.starts_with("repetitions,n,min,q1,median,q3,max,iqr"), "{out}");
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn analyze_constant_input() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("const.csv");
    let mut text = String::from("repetitions,run,min_rtt_us\n");
    for run in 0..8 {
        text.push_str(&format!("100,{run},500\n"));
    }
    fs::write(&csv, text).unwrap();
    let o = dgate(&["analyze", csv.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().nth(1).unwrap(), "100,8,500.0,500.0,500.0,500.0,500.0,0.0");
}

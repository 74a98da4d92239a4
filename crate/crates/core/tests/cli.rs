// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn diprid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diprid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = diprid(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_receivers(path: &Path) {
    std::fs::write(path, "id,lat_deg,lon_deg,alt_m\nr1,45,9,0\nr2,45.001,9.001,0\n").unwrap();
}

fn gen_fly_through(dir: &TempDir) -> PathBuf {
    let traj = p(dir, "traj.csv");
    let out = ok(&[
        "gen-trajectory", "--pattern", "fly-through", "--duration", "200", "--period", "0.5",
        "--speed", "15", "--offset", "100", "--center", "45,9,0", "--seed", "3", "--out", s(&traj),
    ]);
    assert!(out.starts_with("invasion_interval_s="), "{out}");
    traj
}

#[test]
fn protocol_through_the_binary() {
    let dir = TempDir::new().unwrap();
    let (reg, keys, pubf) = (p(&dir, "reg.json"), p(&dir, "keys.json"), p(&dir, "ttp.pub"));
    ok(&["ttp", "init", "--registry", s(&reg), "--keys", s(&keys), "--seed", "1"]);
    let printed = ok(&[
        "ttp", "register-uav", "--registry", s(&reg), "--keys", s(&keys), "--id", "uav-42",
        "--pub-out", s(&pubf),
    ]);
    assert_eq!(printed.trim(), std::fs::read_to_string(&pubf).unwrap().trim());
    let ci = ok(&[
        "ttp", "register-ci", "--registry", s(&reg), "--lat", "45", "--lon", "9", "--alt", "0",
        "--delta", "700",
    ]);
    assert_eq!(ci.trim(), "1");

    let traj = gen_fly_through(&dir);
    let rid = p(&dir, "out.rid");
    ok(&[
        "obfuscate", "--trace", s(&traj), "--epsilon", "1", "--d-scale", "1", "--alt-epsilon",
        "1", "--alt-d", "1", "--region=-5000,5000,-5000,5000", "--ttp-pub", s(&pubf), "--seed",
        "9", "--uav-id", "uav-42", "--out", s(&rid),
    ]);
    assert_eq!(std::fs::read_to_string(&rid).unwrap().lines().count(), 401);

    let verdicts = p(&dir, "verdicts.jsonl");
    ok(&["detect", "--trace", s(&rid), "--receiver", "45,9,0", "--out", s(&verdicts)]);
    let windows: Vec<serde_json::Value> = std::fs::read_to_string(&verdicts)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(windows.iter().any(|w| w["verdict"] == "invasion"));

    let d = ok(&[
        "ttp", "verify", "--registry", s(&reg), "--keys", s(&keys), "--ci", "1", "--trace",
        s(&rid),
    ]);
    let d: serde_json::Value = serde_json::from_str(&d).unwrap();
    assert_eq!(d["result"], "confirmed");
    assert_eq!(d["fixes"][0]["id"], "uav-42");

    let out = diprid(&[
        "ttp", "verify", "--registry", s(&reg), "--keys", s(&keys), "--ci", "7", "--trace",
        s(&rid),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = TempDir::new().unwrap();
    let traj = gen_fly_through(&dir);
    let recv = p(&dir, "recv.csv");
    write_receivers(&recv);
    let run = |out: &Path, jobs: &str| {
        ok(&[
            "simulate", "--traj", s(&traj), "--receivers", s(&recv), "--epsilon", "0.1",
            "--d-scale", "5", "--runs", "30", "--seed", "17", "--jobs", jobs, "--out", s(out),
        ]);
        std::fs::read(out).unwrap()
    };
    let a = run(&p(&dir, "a.csv"), "1");
    let b = run(&p(&dir, "b.csv"), "4");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "# seed=17 runs=30");
    assert!(lines[1].starts_with("epsilon,D,W,"));
    assert!(lines[2].starts_with("0.1,5,15,"));
}

#[test]
fn config_file_and_sweep() {
    let dir = TempDir::new().unwrap();
    let traj = gen_fly_through(&dir);
    let recv = p(&dir, "recv.csv");
    write_receivers(&recv);
    let cfg = p(&dir, "sim.toml");
    std::fs::write(&cfg, "runs = 10\nseed = 5\nepsilon_grid = [1.0, 0.2]\nd_grid = [5.0]\n").unwrap();
    let out = p(&dir, "sweep.csv");
    ok(&[
        "sweep", "--traj", s(&traj), "--receivers", s(&recv), "--config", s(&cfg), "--w-grid",
        "15,10", "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    let keys: Vec<String> = text
        .lines()
        .skip(2)
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(keys, ["0.2,5,10", "0.2,5,15", "1,5,10", "1,5,15"]);
    assert!(text.starts_with("# seed=5 runs=10\n"));

    std::fs::write(&cfg, "runs = 10\nbogus = 1\n").unwrap();
    let o = diprid(&[
        "sweep", "--traj", s(&traj), "--receivers", s(&recv), "--config", s(&cfg), "--out",
        s(&p(&dir, "x.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn validation_failures_leave_no_output() {
    let dir = TempDir::new().unwrap();
    let traj = gen_fly_through(&dir);
    let recv = p(&dir, "recv.csv");
    write_receivers(&recv);
    let out = p(&dir, "m.csv");

    let o = diprid(&["simulate", "--receivers", s(&recv), "--epsilon", "1", "--d-scale", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("--traj"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    for bad in [
        vec!["--delta", "800"],
        vec!["--window", "0"],
        vec!["--runs", "0"],
        vec!["--region", "1,0,0,1"],
        vec!["--jobs", "0"],
    ] {
        let mut args = vec![
            "simulate", "--traj", s(&traj), "--receivers", s(&recv), "--epsilon", "1",
            "--d-scale", "1", "--out", s(&out),
        ];
        args.extend(bad.iter().copied());
        let o = diprid(&args);
        assert_eq!(o.status.code(), Some(1), "{bad:?}");
        assert!(String::from_utf8(o.stderr).unwrap().starts_with("error: validation:"));
        assert!(!out.exists(), "{bad:?} left an output file");
    }

    std::fs::write(p(&dir, "bad.pub"), "not a key").unwrap();
    let rid = p(&dir, "o.rid");
    let o = diprid(&[
        "obfuscate", "--trace", s(&traj), "--epsilon", "1", "--d-scale", "1", "--ttp-pub",
        s(&p(&dir, "bad.pub")), "--out", s(&rid),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!rid.exists());

    let o = diprid(&[
        "simulate", "--traj", s(&p(&dir, "missing.csv")), "--receivers", s(&recv), "--epsilon",
        "1", "--d-scale", "1", "--out", s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error: io:"));
}

#[test]
fn bad_trajectory_rows_are_named() {
    let dir = TempDir::new().unwrap();
    let traj = p(&dir, "t.csv");
    std::fs::write(&traj, "t_us,lat_deg,lon_deg,alt_m,vx,vy,vz\n0,45,9,0,0,0,0\n2000000,45,9,0,0,0,0\n").unwrap();
    let recv = p(&dir, "recv.csv");
    write_receivers(&recv);
    let o = diprid(&[
        "simulate", "--traj", s(&traj), "--receivers", s(&recv), "--epsilon", "1", "--d-scale",
        "1", "--out", s(&p(&dir, "m.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn sample_output_is_stable() {
    let args = ["sample", "--epsilon", "1", "--d-scale", "1", "--count", "3", "--seed", "7"];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    assert_eq!(a.lines().count(), 4);
}

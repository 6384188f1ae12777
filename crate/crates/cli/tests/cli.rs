use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xxcascade::table::{Record, Table};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xxcascade"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn check(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn record(path: &Path) -> Record {
    Record::read_from(fs::read(path).unwrap().as_slice()).unwrap()
}

fn num(r: &Record, key: &str) -> f64 {
    r.get(key).unwrap_or_else(|| panic!("missing {key}")).parse().unwrap()
}

fn table(path: &Path) -> Table {
    Table::read_from(fs::read(path).unwrap().as_slice()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_stream_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 17\n[experiment]\nn_pulses = 2000\n");
    let out = dir.path().join("a");
    check(&run(&["--config", s(&cfg), "--out-dir", s(&out), "simulate", "--mode", "lifetime"]));
    let stream = fs::read_to_string(out.join("stream_lifetime.txt")).unwrap();
    assert!(stream.contains("# seed=17\n"));
    let m = record(&out.join("simulate_manifest.txt"));
    assert_eq!(m.get("command"), Some("simulate"));
    assert_eq!(m.get("seed"), Some("17"));
    assert_eq!(m.get("outputs"), Some("stream_lifetime.txt"));
    assert!(m.get("sha256.stream_lifetime.txt").is_some());
    assert!(m.get("wall_clock_s").is_some());
    assert!(!stream.contains("wall_clock"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[experiment]\nn_pulses = 20000\nleakage_prob = 0.05\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        check(&run(&["--config", s(&cfg), "--out-dir", s(out), "--seed", "3", "simulate", "--mode", "hbt"]));
    }
    assert_eq!(fs::read(a.join("stream_hbt.txt")).unwrap(), fs::read(b.join("stream_hbt.txt")).unwrap());
}

#[test]
fn bad_optics_exit_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[optics]\nbs_reflectance = 0.6\nbs_transmittance = 0.6\n");
    let out = run(&["--config", s(&cfg), "--out-dir", s(dir.path()), "simulate", "--mode", "hbt"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("optics.bs_transmittance"), "{err}");
}

#[test]
fn unknown_config_key_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[experiment]\npulses = 10\n");
    let out = run(&["--config", s(&cfg), "--out-dir", s(dir.path()), "simulate", "--mode", "hbt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pulses"));
}

#[test]
fn missing_input_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = run(&["--out-dir", s(dir.path()), "analyze", "--g2", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    let m = record(&dir.path().join("analyze_manifest.txt"));
    assert!(m.get("status").unwrap().starts_with("failed"));
}

#[test]
fn failed_background_selection_exit_4_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[cascade]\ntau_xx_bare_ps = 20\ntau_x_bare_ps = 40\nchannel_enhancement = 1\n[experiment]\nn_pulses = 300000\nambient_rate_per_ps = 2e-6\n",
    );
    let out = dir.path();
    check(&run(&["--config", s(&cfg), "--out-dir", s(out), "simulate", "--mode", "hbt"]));
    let stream = out.join("stream_hbt.txt");
    let res = run(&["--out-dir", s(out), "analyze", "--g2", s(&stream), "--background", "auto", "--candidates", "1,2"]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
    let diag = table(&out.join("g2_background_candidates.csv"));
    assert_eq!(diag.column("plateau").unwrap().iter().sum::<f64>(), 0.0);
    assert_eq!(diag.column("noise_boundary").unwrap().len(), 2 * 13);
}

#[test]
fn g2_at_reference_leakage() {
    let dir = tempfile::tempdir().unwrap();
    let preset = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.toml");
    let out = dir.path();
    check(&run(&["--config", preset, "--out-dir", s(out), "simulate", "--mode", "hbt", "--n-pulses", "500000"]));
    check(&run(&["--out-dir", s(out), "analyze", "--g2", s(&out.join("stream_hbt.txt"))]));
    let r = record(&out.join("g2.txt"));
    let (g2, err) = (num(&r, "g2_zero"), num(&r, "error"));
    assert!((g2 - 0.023).abs() < 3.0 * err, "{g2} ± {err}");
}

#[test]
fn clean_data_needs_no_subtraction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    check(&run(&["--out-dir", s(out), "simulate", "--mode", "hbt", "--n-pulses", "100000"]));
    check(&run(&["--out-dir", s(out), "analyze", "--g2", s(&out.join("stream_hbt.txt")), "--background", "auto"]));
    let r = record(&out.join("g2.txt"));
    assert_eq!(r.get("background_mode"), Some("auto:no-subtraction-needed"));
    assert_eq!(num(&r, "background_level"), 0.0);
    assert_eq!(num(&r, "noise_boundary"), 5.0);
    assert_eq!(table(&out.join("g2_g2_vs_window.csv")).rows.len(), 13);
}

#[test]
fn hom_two_config_at_small_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[cascade]\ntau_xx_bare_ps = 38.72\ntau_x_bare_ps = 484\nchannel_enhancement = 1\n\
         [optics]\nbs_reflectance = 0.5\nclassical_visibility = 1.0\n",
    );
    let out = dir.path();
    for pol in ["co", "cross"] {
        check(&run(&["--config", s(&cfg), "--out-dir", s(out), "--seed", if pol == "co" { "1" } else { "2" }, "simulate", "--mode", "hom", "--polarization", pol]));
    }
    let (co, cross) = (out.join("stream_hom_co.txt"), out.join("stream_hom_cross.txt"));
    check(&run(&["--out-dir", s(out), "analyze", "--hom", "two-config", s(&co), s(&cross)]));
    let r = record(&out.join("hom.txt"));
    assert_eq!(r.get("method"), Some("two-config"));
    let (v, err) = (num(&r, "v_raw"), num(&r, "v_raw_error"));
    assert!((v - 1.0 / 1.08).abs() < 3.0 * err && err < 0.01, "{v} ± {err}");

    let wrong = run(&["--out-dir", s(out), "analyze", "--hom", "two-config", s(&co)]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn fit_recovers_lifetime_and_purcell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[cascade]\ntau_xx_bare_ps = 263\nchannel_enhancement = 1\n[experiment]\nn_pulses = 300000\n");
    let out = dir.path();
    check(&run(&["--config", s(&cfg), "--out-dir", s(out), "simulate", "--mode", "lifetime"]));
    let stream = out.join("stream_lifetime.txt");
    check(&run(&["--config", s(&cfg), "--out-dir", s(out), "fit", s(&stream), "--bootstrap", "30", "--bare-tau-ps", "263"]));
    let r = record(&out.join("fit.txt"));
    let (tau, sd) = (num(&r, "tau_ps"), num(&r, "tau_std_ps"));
    assert!((tau - 263.0).abs() < 4.0 * sd, "{tau} ± {sd}");
    let p = record(&out.join("purcell.txt"));
    assert!((num(&p, "purcell_factor") - 1.0).abs() < 0.03);

    // Refitting the written histogram gives the same answer.
    let hist = out.join("decay_histogram.csv");
    let again = dir.path().join("again");
    check(&run(&["--config", s(&cfg), "--out-dir", s(&again), "fit", s(&hist), "--bootstrap", "0"]));
    assert_eq!(record(&again.join("fit.txt")).get("tau_ps"), r.get("tau_ps"));
}

#[test]
fn oracle_table() {
    let dir = tempfile::tempdir().unwrap();
    check(&run(&["--out-dir", s(dir.path()), "oracle", "--ratios", "1,0.08,6.2"]));
    let t = table(&dir.path().join("oracle.csv"));
    let xx = t.column("purity_xx").unwrap();
    let x = t.column("purity_x").unwrap();
    for (i, v) in [0.5, 1.0 / 1.08, 1.0 / 7.2].into_iter().enumerate() {
        assert!((xx[i] - v).abs() < 5e-3 && (x[i] - v).abs() < 5e-3, "row {i}: {} {} vs {v}", xx[i], x[i]);
    }
    let bad = run(&["--out-dir", s(dir.path()), "oracle", "--ratios", "0,1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn oracle_grid_failure_recorded_per_row() {
    let dir = tempfile::tempdir().unwrap();
    check(&run(&["--out-dir", s(dir.path()), "oracle", "--ratios", "1,0.01", "--points", "400"]));
    let t = table(&dir.path().join("oracle.csv"));
    assert_eq!(t.column("ok").unwrap(), vec![1.0, 0.0]);
    assert!(record(&dir.path().join("oracle_errors.txt")).get("row_1").is_some());
}

#[test]
fn mc_sweep_agrees_with_fast_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let preset = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/reference.toml");
    let (fast, mc) = (dir.path().join("fast"), dir.path().join("mc"));
    let det = "--detunings-ghz=0,-345,-690";
    check(&run(&["--config", preset, "--out-dir", s(&fast), "sweep", "--mode", "fast", det]));
    check(&run(&["--config", preset, "--out-dir", s(&mc), "sweep", "--mode", "mc", det, "--n-pulses", "100000"]));
    let (f, m) = (table(&fast.join("sweep.csv")), table(&mc.join("sweep.csv")));
    for (v, e) in [("v_xx", "v_xx_error"), ("v_x", "v_x_error")] {
        let (fv, mv, me) = (f.column(v).unwrap(), m.column(v).unwrap(), m.column(e).unwrap());
        for i in 0..3 {
            assert!((fv[i] - mv[i]).abs() < 3.0 * me[i], "{v} row {i}: fast {} mc {} ± {}", fv[i], mv[i], me[i]);
        }
    }
    assert_eq!(f.column("detuning_ghz").unwrap(), vec![0.0, -345.0, -690.0]);
}

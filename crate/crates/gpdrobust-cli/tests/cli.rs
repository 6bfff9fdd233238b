//! End-to-end tests of the `gpdrobust` binary: ingestion bookkeeping,
//! the fitting pipeline, output stamping, the exit-code contract, and
//! byte-level determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpdrobust::gpd::{self, GpdParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gpdrobust"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// The machine-readable failure record is the last JSON line on stderr.
fn error_record(out: &Output) -> serde_json::Value {
    let text = stderr(out);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON record on stderr:\n{text}"));
    serde_json::from_str(line).expect("stderr record parses")
}

fn write_losses(path: &Path, values: &[f64]) {
    let mut body = String::from("loss_amount\n");
    for v in values {
        body.push_str(&format!("{v}\n"));
    }
    fs::write(path, body).unwrap();
}

/// A clean synthetic tail sample written as a loss CSV.
fn gpd_fixture(dir: &Path, name: &str, xi: f64, beta: f64, n: usize, seed: u64) -> PathBuf {
    let p = GpdParams::new(0.0, xi, beta).unwrap();
    let sample = gpd::sample(&p, n, seed).unwrap();
    let path = dir.join(name);
    write_losses(&path, sample.values());
    path
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).expect("output json parses")
}

#[test]
fn rejected_rows_warn_but_the_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("losses.csv");
    let mut values: Vec<f64> = (1..=40).map(|i| i as f64 / 7.0).collect();
    values.sort_by(f64::total_cmp);
    let mut body = String::from("loss_amount\n");
    body.push_str("-5\n"); // line 2: rejected
    for v in &values {
        body.push_str(&format!("{v}\n"));
    }
    body.push_str("oops\n"); // last line: rejected
    fs::write(&input, body).unwrap();

    let out_dir = dir.path().join("out");
    let out = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--estimator",
        "medkmad",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("row 2: nonpositive loss_amount -5"), "{err}");
    assert!(err.contains("not a number"), "{err}");

    let doc = read_json(&out_dir.join("fit.json"));
    assert_eq!(doc["sample"]["n"], 40);
    assert_eq!(doc["sample"]["rows_read"], 42);
    assert_eq!(doc["sample"]["rows_rejected"], 2);
    assert_eq!(doc["sample"]["rows_filtered"], 0);
    assert_eq!(doc["fit"]["estimator_name"], "medkmad");
    // Provenance stamp fields are present and well formed.
    assert_eq!(doc["tool_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(doc["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(doc["seed"], 0);
}

#[test]
fn cell_filters_select_the_requested_records() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("cells.csv");
    let mut body = String::from("loss_amount,business_line,event_type\n");
    for i in 0..30 {
        let bl = if i % 2 == 0 { "retail" } else { "trading" };
        let et = if i % 3 == 0 { "fraud" } else { "damage" };
        body.push_str(&format!("{},{bl},{et}\n", 1.0 + i as f64));
    }
    fs::write(&input, body).unwrap();

    let out_dir = dir.path().join("out");
    let out = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--estimator",
        "medkmad",
        "--business-line",
        "retail",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let doc = read_json(&out_dir.join("fit.json"));
    assert_eq!(doc["sample"]["n"], 15);
    assert_eq!(doc["sample"]["rows_filtered"], 15);
}

#[test]
fn clean_rmxe_fit_recovers_the_shape() {
    let dir = tempfile::tempdir().unwrap();
    let input = gpd_fixture(dir.path(), "losses.csv", 0.7, 1.0, 2000, 7);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let doc = read_json(&out_dir.join("fit.json"));
    assert_eq!(doc["fit"]["estimator_name"], "rmxe one-step");
    let xi = doc["fit"]["params"]["shape"].as_f64().unwrap();
    assert!((xi - 0.7).abs() < 0.05, "xi = {xi}");
    assert!(doc["fit"]["converged"].as_bool().unwrap());
    assert!(doc["radius"].as_f64().unwrap() > 0.0);
    // The starting fit travels along for audit.
    assert_eq!(doc["start"]["estimator_name"], "medkmad");
}

#[test]
fn opvar_reproduces_the_closed_form_quantile() {
    let dir = tempfile::tempdir().unwrap();
    // Noiseless fixture: exact unit-shape quantiles at n plotting
    // positions, so the fit lands at shape = scale = 1 and the
    // value-at-risk at alpha' = 0.001 lands at the 0.999 tail quantile
    // (1000 - 1 = 999) plus the threshold 0.
    let n = 10_000usize;
    let p = GpdParams::new(0.0, 1.0, 1.0).unwrap();
    let values: Vec<f64> = (1..=n)
        .map(|i| gpd::quantile(&p, i as f64 / (n as f64 + 1.0)).unwrap())
        .collect();
    let input = dir.path().join("losses.csv");
    write_losses(&input, &values);

    let out_dir = dir.path().join("out");
    let out = run(&[
        "opvar",
        "--input",
        input.to_str().unwrap(),
        "--estimator",
        "mle",
        "--lambda",
        "1",
        "--alpha",
        "0.999",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let doc = read_json(&out_dir.join("opvar.json"));
    let xi = doc["fit"]["params"]["shape"].as_f64().unwrap();
    let beta = doc["fit"]["params"]["scale"].as_f64().unwrap();
    assert!((xi - 1.0).abs() < 0.01, "xi = {xi}");

    let var = &doc["value_at_risk"];
    let alpha_prime = var["alpha_prime"].as_f64().unwrap();
    assert!((alpha_prime - 0.001).abs() < 1e-15, "alpha' = {alpha_prime}");

    // Exact consistency with the emitted parameters...
    let value = var["value"].as_f64().unwrap();
    let closed = beta / xi * (alpha_prime.powf(-xi) - 1.0);
    assert!(
        ((value - closed) / closed).abs() < 1e-12,
        "value {value} vs closed form {closed}"
    );
    // ...and numerically at the engineered target.
    assert!(
        ((value - 999.0) / 999.0).abs() < 0.05,
        "value {value} should sit near 999"
    );
    // Whether the fitted shape crossed 1 is draw-dependent; the flag just
    // has to be reported.
    assert!(var["infinite_mean"].is_boolean());
    assert_eq!(doc["frequency"]["lambda"], 1.0);
}

#[test]
fn frequency_can_come_from_count_data() {
    let dir = tempfile::tempdir().unwrap();
    let input = gpd_fixture(dir.path(), "losses.csv", 0.7, 1.0, 600, 11);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "opvar",
        "--input",
        input.to_str().unwrap(),
        "--estimator",
        "mle",
        "--institutions",
        "2431",
        "--years",
        "20",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let doc = read_json(&out_dir.join("opvar.json"));
    let lambda = doc["frequency"]["lambda"].as_f64().unwrap();
    assert!((lambda - 600.0 / (2431.0 * 20.0)).abs() < 1e-15);
    assert_eq!(format!("{lambda:.4}"), "0.0123");

    // Frequency is required: neither --lambda nor the count pair is a
    // usage error.
    let out2 = run(&[
        "opvar",
        "--input",
        input.to_str().unwrap(),
        "--estimator",
        "mle",
        "--out",
        dir.path().join("out2").to_str().unwrap(),
    ]);
    assert_eq!(out2.status.code(), Some(1));
    assert_eq!(error_record(&out2)["error_kind"], "usage");

    // The usage error must win even when the sample is too small to fit:
    // option checks run before the estimation pipeline.
    let tiny = dir.path().join("tiny.csv");
    write_losses(&tiny, &[1.0, 2.0, 3.0]);
    let out3 = run(&[
        "opvar",
        "--input",
        tiny.to_str().unwrap(),
        "--out",
        dir.path().join("out3").to_str().unwrap(),
    ]);
    assert_eq!(out3.status.code(), Some(1), "stderr: {}", stderr(&out3));
    assert_eq!(error_record(&out3)["error_kind"], "usage");
}

#[test]
fn diagnose_emits_three_stamped_tables() {
    let dir = tempfile::tempdir().unwrap();
    let input = gpd_fixture(dir.path(), "losses.csv", 0.7, 1.0, 400, 404);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "diagnose",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    for name in ["influence.csv", "outlying.csv", "qqband.csv"] {
        let text = fs::read_to_string(out_dir.join(name)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# tool_version="), "{name}");
        assert!(lines.next().unwrap().starts_with("# config_hash="), "{name}");
        assert!(lines.next().unwrap().starts_with("# seed="), "{name}");
        let header = lines.next().unwrap();
        assert!(header.contains(','), "{name} header: {header}");
        assert_eq!(text.lines().count() - 4, 400, "{name} row count");
    }

    let influence = fs::read_to_string(out_dir.join("influence.csv")).unwrap();
    assert!(influence.contains("index,x,psi_xi,psi_beta,psi_norm,weight,mahalanobis,flagged"));
    let qq = fs::read_to_string(out_dir.join("qqband.csv")).unwrap();
    assert!(qq.contains("position,observed,model_quantile,lower,upper,weight"));
    // A simultaneous band at this sample size is unbounded near the top.
    assert!(qq.contains(",inf,"), "expected unbounded upper edges");

    // JSON format switches the table encoding and carries the same stamp.
    let out_dir2 = dir.path().join("out-json");
    let out2 = run(&[
        "diagnose",
        "--input",
        input.to_str().unwrap(),
        "--format",
        "json",
        "--out",
        out_dir2.to_str().unwrap(),
    ]);
    assert_eq!(out2.status.code(), Some(0), "stderr: {}", stderr(&out2));
    let influence = read_json(&out_dir2.join("influence.json"));
    assert_eq!(influence["table"]["rows"].as_array().unwrap().len(), 400);
    let band = read_json(&out_dir2.join("qqband.json"));
    assert_eq!(band["band"]["kind"], "simultaneous");
    assert!(band["band"]["radius_adjusted_level"].as_f64().unwrap() > 0.95);
    let rows = band["band"]["rows"].as_array().unwrap();
    assert!(rows.last().unwrap()["upper"].is_null(), "top edge unbounded");
}

#[test]
fn study_ranks_robust_arms_ahead_under_contamination() {
    let dir = tempfile::tempdir().unwrap();
    let input = gpd_fixture(dir.path(), "losses.csv", 0.7, 1.0, 500, 31);
    let out_dir = dir.path().join("out");
    let out = run(&[
        "study",
        "--input",
        input.to_str().unwrap(),
        "--estimator",
        "omse",
        "--radius",
        "0.5",
        "--reps",
        "40",
        "--study-n",
        "150",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let text = fs::read_to_string(out_dir.join("study.csv")).unwrap();
    let mut mse = std::collections::HashMap::new();
    for line in text.lines().skip(4) {
        let cells: Vec<&str> = line.split(',').collect();
        mse.insert(cells[0].to_string(), cells[3].parse::<f64>().unwrap());
    }
    assert_eq!(mse.len(), 3, "{text}");
    let robust = mse["omse(0.5) one-step"];
    assert!(
        robust < mse["mle"],
        "5% gross errors should sink the classical arm: {mse:?}"
    );
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let input = gpd_fixture(dir.path(), "losses.csv", 0.7, 1.0, 300, 99);
    let out_dir = dir.path().join("out");
    let args = [
        "diagnose",
        "--input",
        input.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        out_dir.to_str().unwrap(),
    ];

    let first = run(&args);
    assert_eq!(first.status.code(), Some(0), "stderr: {}", stderr(&first));
    let names = ["influence.csv", "outlying.csv", "qqband.csv"];
    let snapshot: Vec<Vec<u8>> = names
        .iter()
        .map(|n| fs::read(out_dir.join(n)).unwrap())
        .collect();

    let second = run(&args);
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(stdout(&first), stdout(&second));
    for (name, before) in names.iter().zip(&snapshot) {
        let after = fs::read(out_dir.join(name)).unwrap();
        assert_eq!(&after, before, "{name} changed between identical runs");
    }
}

#[test]
fn grid_file_route_matches_the_fresh_solve() {
    let dir = tempfile::tempdir().unwrap();
    let input = gpd_fixture(dir.path(), "losses.csv", 0.4, 2.0, 1000, 7);
    let grid = dir.path().join("rmxe.grid");

    let out = run(&[
        "build-grid",
        "--grid-kind",
        "rmxe",
        "--xi-min",
        "0.3",
        "--xi-max",
        "0.5",
        "--xi-step",
        "0.05",
        "--grid-file",
        grid.to_str().unwrap(),
        "--out",
        dir.path().join("gout").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let head = fs::read_to_string(&grid).unwrap();
    assert!(head.starts_with("# tool_version="), "grid is stamped");

    let fresh_dir = dir.path().join("fresh");
    let fresh = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--out",
        fresh_dir.to_str().unwrap(),
    ]);
    assert_eq!(fresh.status.code(), Some(0), "stderr: {}", stderr(&fresh));

    let via_dir = dir.path().join("via");
    let via = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--grid-file",
        grid.to_str().unwrap(),
        "--out",
        via_dir.to_str().unwrap(),
    ]);
    assert_eq!(via.status.code(), Some(0), "stderr: {}", stderr(&via));

    let a = read_json(&fresh_dir.join("fit.json"));
    let b = read_json(&via_dir.join("fit.json"));
    let xi_a = a["fit"]["params"]["shape"].as_f64().unwrap();
    let xi_b = b["fit"]["params"]["shape"].as_f64().unwrap();
    assert!(
        ((xi_a - xi_b) / xi_a).abs() < 1e-3,
        "fresh {xi_a} vs grid {xi_b}"
    );

    // A grid of the wrong family is rejected before any work happens.
    let mbre_grid = dir.path().join("mbre.grid");
    let out2 = run(&[
        "build-grid",
        "--grid-kind",
        "mbre",
        "--xi-min",
        "0.3",
        "--xi-max",
        "0.5",
        "--xi-step",
        "0.1",
        "--grid-file",
        mbre_grid.to_str().unwrap(),
        "--out",
        dir.path().join("gout2").to_str().unwrap(),
    ]);
    assert_eq!(out2.status.code(), Some(0), "stderr: {}", stderr(&out2));
    let out3 = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--grid-file",
        mbre_grid.to_str().unwrap(),
        "--out",
        dir.path().join("wrong").to_str().unwrap(),
    ]);
    assert_eq!(out3.status.code(), Some(1));
    assert_eq!(error_record(&out3)["error_kind"], "usage");
}

#[test]
fn config_file_fills_gaps_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let input = gpd_fixture(dir.path(), "losses.csv", 0.7, 1.0, 200, 55);
    let out_dir = dir.path().join("out");
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "input = {:?}\nestimator = \"medkmad\"\nseed = 9\nout = {:?}\n",
            input.to_str().unwrap(),
            out_dir.to_str().unwrap()
        ),
    )
    .unwrap();

    let out = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let doc = read_json(&out_dir.join("fit.json"));
    assert_eq!(doc["fit"]["estimator_name"], "medkmad");
    assert_eq!(doc["seed"], 9);

    // A flag overrides the same file entry.
    let out2_dir = dir.path().join("out2");
    let out2 = run(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--estimator",
        "mle",
        "--out",
        out2_dir.to_str().unwrap(),
    ]);
    assert_eq!(out2.status.code(), Some(0), "stderr: {}", stderr(&out2));
    let doc2 = read_json(&out2_dir.join("fit.json"));
    assert_eq!(doc2["fit"]["estimator_name"], "mle");

    // Typos in the file are usage errors, not silent defaults.
    fs::write(&cfg, "sed = 9\n").unwrap();
    let out3 = run(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out3.status.code(), Some(1));
}

#[test]
fn exit_codes_follow_the_documented_contract() {
    let dir = tempfile::tempdir().unwrap();
    let input = gpd_fixture(dir.path(), "losses.csv", 0.7, 1.0, 100, 1);

    // 1 — malformed invocation (clap's own code 2 is remapped).
    let out = run(&["fit", "--input", input.to_str().unwrap(), "--wat"]);
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["error_kind"], "usage");
    assert_eq!(rec["exit_code"], 1);

    // 1 — missing input file.
    let out = run(&["fit", "--input", "nowhere.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error_kind"], "usage");

    // 2 — readable file, but no usable records.
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "loss_amount\n-1\n-2\n").unwrap();
    let out = run(&[
        "fit",
        "--input",
        empty.to_str().unwrap(),
        "--out",
        dir.path().join("o2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error_kind"], "data");

    // 2 — output directory locked by another run.
    let locked = dir.path().join("locked");
    fs::create_dir_all(&locked).unwrap();
    fs::write(locked.join(".gpdrobust.lock"), "held\n").unwrap();
    let out = run(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--estimator",
        "medkmad",
        "--out",
        locked.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error_kind"], "data");

    // 3 — numerically impossible request: per-loss level >= 1.
    let out = run(&[
        "opvar",
        "--input",
        input.to_str().unwrap(),
        "--estimator",
        "mle",
        "--lambda",
        "1e-12",
        "--out",
        dir.path().join("o3").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let rec = error_record(&out);
    assert_eq!(rec["error_kind"], "numerical");
    assert_eq!(rec["exit_code"], 3);

    // 3 — too few exceedances to fit a tail.
    let tiny = dir.path().join("tiny.csv");
    write_losses(&tiny, &[1.0, 2.0, 3.0]);
    let out = run(&[
        "fit",
        "--input",
        tiny.to_str().unwrap(),
        "--estimator",
        "mle",
        "--out",
        dir.path().join("o4").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error_kind"], "numerical");

    // 0 — help and version are not failures.
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn lock_is_released_after_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let input = gpd_fixture(dir.path(), "losses.csv", 0.7, 1.0, 100, 2);
    let out_dir = dir.path().join("out");
    let args = [
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--estimator",
        "medkmad",
        "--out",
        out_dir.to_str().unwrap(),
    ];
    assert_eq!(run(&args).status.code(), Some(0));
    assert!(
        !out_dir.join(".gpdrobust.lock").exists(),
        "lock must not outlive the run"
    );
    // And the directory is immediately reusable.
    assert_eq!(run(&args).status.code(), Some(0));
}

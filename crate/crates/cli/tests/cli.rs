//! The `tcim` binary end to end: exit codes, reproducibility and partial
//! inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tcim_core::domain::CovariateSet;
use tcim_core::ingest::{build_dataset, parse_tracks, IngestConfig, ParseOptions};
use tcim_core::model::{IntensityModel, ModelFile};
use tcim_core::synthetic::{reference_land, reference_mehim, synthetic_tracks_csv, TrackSynthOptions};

fn tcim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcim")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic_tracks.csv")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Reference dependent HMM in the scaler of the bundled data, with land.
fn reference_model(dir: &Path) -> PathBuf {
    let storms = parse_tracks(&bundled(), &ParseOptions::default()).unwrap();
    let data = build_dataset(storms, &IngestConfig::default()).unwrap();
    let mut m = reference_mehim();
    m.scaler = data.scaler;
    let path = dir.join("ref.json");
    ModelFile::from_model(&IntensityModel::Mehim(m), Some(reference_land()), Some(IngestConfig::default()))
        .save(&path)
        .unwrap();
    path
}

#[test]
fn bundled_dataset_matches_generator() {
    let text = std::fs::read_to_string(bundled()).unwrap();
    assert_eq!(text, synthetic_tracks_csv(&TrackSynthOptions::default()));
}

#[test]
fn missing_tracks_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = tcim(&["--out", s(dir.path()), "fit", "ols", "--tracks", "/no/such/tracks.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/tracks.csv"));
}

#[test]
fn fit_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // one storm is far too little data for three hidden states
    let tracks = dir.path().join("one.csv");
    let all = synthetic_tracks_csv(&TrackSynthOptions::default());
    let one: String = all
        .lines()
        .filter(|l| !l.starts_with("SYN") || l.starts_with("SYN01,"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&tracks, one).unwrap();
    let o = tcim(&["--out", s(dir.path()), "--quiet", "fit", "mehim", "--tracks", s(&tracks)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn schema_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = reference_model(dir.path());
    let mut doc: serde_json::Value = serde_json::from_slice(&read(&model)).unwrap();
    doc["schema_version"] = 99.into();
    std::fs::write(&model, doc.to_string()).unwrap();
    let o = tcim(&["--out", s(dir.path()), "simulate", "--model", s(&model), "--tracks", s(&bundled())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schema"));
}

#[test]
fn decode_rejects_non_hidden_state_models() {
    let dir = tempfile::tempdir().unwrap();
    let o = tcim(&["--out", s(dir.path()), "--quiet", "fit", "ols", "--tracks", s(&bundled())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = tcim(&[
        "--out",
        s(dir.path()),
        "decode",
        "--model",
        s(&dir.path().join("model_ols.json")),
        "--tracks",
        s(&bundled()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn decode_writes_one_state_per_training_observation() {
    let dir = tempfile::tempdir().unwrap();
    let model = reference_model(dir.path());
    let out = dir.path().join("dec");
    let o = tcim(&["--out", s(&out), "--quiet", "decode", "--model", s(&model), "--tracks", s(&bundled())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let storms = parse_tracks(&bundled(), &ParseOptions::default()).unwrap();
    let data = build_dataset(storms, &IngestConfig::default()).unwrap();
    let rows: usize = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("states_"))
        .map(|p| std::fs::read_to_string(p).unwrap().lines().count() - 1)
        .sum();
    assert_eq!(rows, data.counts.n_observations);
}

#[test]
fn simulate_twice_gives_identical_files_and_manifest_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let model = reference_model(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        let o = tcim(&[
            "--out",
            s(out),
            "--seed",
            "7",
            "--quiet",
            "simulate",
            "--model",
            s(&model),
            "--tracks",
            s(&bundled()),
            "--n",
            "1",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let manifest = a.join("manifest_simulate.json");
    let o = tcim(&["--config", s(&manifest), "--out", s(&c), "--quiet", "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut n = 0;
    for e in std::fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        if name.to_string_lossy().ends_with(".csv") {
            assert_eq!(read(&a.join(&name)), read(&b.join(&name)));
            assert_eq!(read(&a.join(&name)), read(&c.join(&name)));
            n += 1;
        }
    }
    assert_eq!(n, 20);
    let doc: serde_json::Value = serde_json::from_slice(&read(&manifest)).unwrap();
    assert_eq!(doc["config"]["seed"], 7);
    assert_eq!(doc["details"]["storms"]["SYN01"]["seeds"].as_array().unwrap().len(), 1);
}

#[test]
fn ablated_model_runs_without_ocean_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = synthetic_tracks_csv(&TrackSynthOptions::default());
    let stripped: String = csv
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[..f.len() - 2].join(",") + "\n"
        })
        .collect();
    let tracks = dir.path().join("no_ocean.csv");
    std::fs::write(&tracks, stripped).unwrap();
    let out = dir.path().join("m");
    let o = tcim(&["--out", s(&out), "--quiet", "fit", "land", "--tracks", s(&tracks), "--no-ocn"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let land = out.join("model_land.json");
    let o = tcim(&[
        "--out",
        s(&out),
        "--quiet",
        "fit",
        "ols",
        "--tracks",
        s(&tracks),
        "--no-ocn",
        "--land",
        s(&land),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = ModelFile::load(&out.join("model_ols.json")).unwrap();
    assert_eq!(model.covariate_set, CovariateSet::NoOcn);
    let o = tcim(&[
        "--out",
        s(&dir.path().join("sim")),
        "--quiet",
        "simulate",
        "--model",
        s(&out.join("model_ols.json")),
        "--tracks",
        s(&tracks),
        "--n",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn hidden_state_model_with_one_state_reports_like_ols() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["ols", "mehim"] {
        let o = tcim(&["--out", s(dir.path()), "--quiet", "fit", kind, "--tracks", s(&bundled()), "--k", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ols = ModelFile::load(&dir.path().join("model_ols.json")).unwrap().ols.unwrap();
    let hmm = ModelFile::load(&dir.path().join("model_mehim.json")).unwrap().mehim.unwrap();
    assert_eq!(hmm.k, 1);
    let e = &hmm.emissions[0];
    assert!((e.intercept - ols.fit.intercept).abs() < 1e-10);
    for (a, b) in e.coefficients.iter().zip(&ols.fit.coefficients) {
        assert!((a - b).abs() < 1e-10);
    }
    assert!((e.sigma - ols.fit.sigma).abs() < 1e-10);
}

/// Solve `A x = b` by Gauss-Jordan elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                let row_c = a[c].clone();
                for (x, y) in a[r].iter_mut().zip(&row_c) {
                    *x -= f * y;
                }
                b[r] -= f * b[c];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

#[test]
fn ols_fit_on_linear_demonstration_data_matches_generating_values() {
    let dir = tempfile::tempdir().unwrap();
    // the bundled file adds rapid episodes on top of the linear truth, so
    // recovery is checked on the same storms without them
    let opts = TrackSynthOptions {
        rapid: None,
        ..Default::default()
    };
    let tracks = dir.path().join("linear.csv");
    std::fs::write(&tracks, synthetic_tracks_csv(&opts)).unwrap();
    let o = tcim(&["--out", s(dir.path()), "--quiet", "fit", "ols", "--tracks", s(&tracks)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = ModelFile::load(&dir.path().join("model_ols.json")).unwrap().ols.unwrap();
    let report = std::fs::read_to_string(dir.path().join("report_ols.txt")).unwrap();
    assert!(report.contains("OLS model") && report.contains("sigma"));

    let storms = parse_tracks(&tracks, &ParseOptions::default()).unwrap();
    let data = build_dataset(storms, &IngestConfig::default()).unwrap();
    let (x, _) = data.pooled();
    // diagonal of (X'X)^-1 by solving against unit vectors
    let p = 7;
    let mut xtx = vec![vec![0.0; p]; p];
    for row in &x {
        let r: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..p {
            for j in 0..p {
                xtx[i][j] += r[i] * r[j];
            }
        }
    }
    let truth = opts.truth;
    let sc = &m.scaler;
    for j in 0..6 {
        let mut e = vec![0.0; p];
        e[j + 1] = 1.0;
        let var = solve(xtx.clone(), e)[j + 1];
        let scale = sc.response.sd / sc.covariates[j].sd;
        let se = m.fit.sigma * var.sqrt() * scale;
        let b = m.fit.coefficients[j] * scale;
        assert!(
            (b - truth.coefficients[j]).abs() < 4.0 * se,
            "coefficient {j}: {b} vs {} (se {se})",
            truth.coefficients[j]
        );
    }
}

#[test]
fn ri_correction_changes_paths_only_from_the_first_window() {
    let dir = tempfile::tempdir().unwrap();
    let model = reference_model(dir.path());
    let run = |mode: &str| {
        let out = dir.path().join(mode);
        let o = tcim(&[
            "--out",
            s(&out),
            "--seed",
            "3",
            "--quiet",
            "simulate",
            "--model",
            s(&model),
            "--tracks",
            s(&bundled()),
            "--n",
            "10",
            "--ri-correct",
            mode,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (off, on) = (run("off"), run("observed"));
    let manifest: serde_json::Value = serde_json::from_slice(&read(&on.join("manifest_simulate.json"))).unwrap();
    let mut storms_with_windows = 0;
    for (id, info) in manifest["details"]["storms"].as_object().unwrap() {
        let name = format!("ensemble_{id}.csv");
        let a = String::from_utf8(read(&off.join(&name))).unwrap();
        let b = String::from_utf8(read(&on.join(&name))).unwrap();
        let windows = info["ri_windows"].as_array().unwrap();
        let Some(first) = windows.iter().map(|w| w["start_index"].as_u64().unwrap()).min() else {
            assert_eq!(a, b, "storm {id} has no windows");
            continue;
        };
        storms_with_windows += 1;
        // realizations may end at different steps, so rows are keyed
        let rows = |t: &str| -> BTreeMap<(u64, u64), String> {
            t.lines()
                .skip(1)
                .map(|l| {
                    let f: Vec<&str> = l.split(',').collect();
                    ((f[0].parse().unwrap(), f[1].parse().unwrap()), l.to_string())
                })
                .collect()
        };
        let (ra, rb) = (rows(&a), rows(&b));
        // rows strictly before the first window are untouched
        let before = |r: &BTreeMap<(u64, u64), String>| -> Vec<String> { r.iter().filter(|(k, _)| k.1 < first).map(|(_, l)| l.clone()).collect() };
        assert_eq!(before(&ra), before(&rb), "storm {id}");
        assert_ne!(a, b, "storm {id}: correction had no effect");
    }
    assert!(storms_with_windows > 0);
}

#[test]
fn evaluate_observations_only_writes_no_envelopes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tcim(&["--out", s(dir.path()), "--quiet", "evaluate", "--tracks", s(&bundled())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n == "dv6h_hist_obs_obs.csv"));
    assert!(names.iter().any(|n| n == "lmi_obs_obs.csv"));
    assert!(names.iter().any(|n| n == "index.json"));
    assert!(!names.iter().any(|n| n.starts_with("envelope_")));
}

#[test]
fn evaluate_single_constant_realization_gives_zero_width_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let storms = parse_tracks(&bundled(), &ParseOptions::default()).unwrap();
    let storm = &storms[0];
    let ens = dir.path().join("ens");
    std::fs::create_dir_all(&ens).unwrap();
    let mut csv = String::from("realization,step_index,time,v_kt,dv_kt,state,over_land\n");
    for (t, p) in storm.points.iter().enumerate() {
        let dv = if t + 1 < storm.len() { "0.000000" } else { "" };
        csv.push_str(&format!(
            "0,{t},{},50.000000,{dv},0,{}\n",
            p.track.time.format("%Y-%m-%dT%H:%M:%SZ"),
            u8::from(p.track.over_land)
        ));
    }
    std::fs::write(ens.join(format!("ensemble_{}.csv", storm.storm_id)), csv).unwrap();
    let out = dir.path().join("eval");
    let o = tcim(&["--out", s(&out), "--quiet", "evaluate", "--tracks", s(&bundled()), "--ensembles", s(&ens)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let env = std::fs::read_to_string(out.join(format!("envelope_{}_sim_ens.csv", storm.storm_id))).unwrap();
    for line in env.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert!(f[2..].iter().all(|v| *v == "50.000000"), "{line}");
    }
}

#[test]
fn evaluate_missing_ensemble_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = tcim(&["--out", s(dir.path()), "evaluate", "--tracks", s(&bundled()), "--ensembles", "/no/such/dir"]);
    assert_eq!(o.status.code(), Some(2));
}

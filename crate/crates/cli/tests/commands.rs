use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use trispin_core::estimator::{synthesize, MeasurementRecord};
use trispin_core::pulse_sim::{simulate_ramsey_trace, uniform_grid, DecoherenceConfig, SignalModel};
use trispin_core::spin_model::{enumerate_transitions, transition_frequency, HamiltonianParams};

const STANDARD_SET_GHZ: [(&str, &str, f64); 7] = [
    ("000", "001", 2.58774),
    ("000", "010", 4.62194),
    ("000", "100", 5.42518),
    ("001", "011", 5.18069),
    ("100", "101", 2.59436),
    ("100", "110", 4.57770),
    ("110", "111", 3.18918),
];

fn trispin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trispin")).args(args).output().expect("binary runs")
}

fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--out-dir", out.to_str().unwrap(), "--quiet"]);
    trispin(&all)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, contents: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, contents).unwrap();
    p.to_str().unwrap().to_string()
}

fn standard_set_file(dir: &Path, n: usize) -> String {
    let items: Vec<String> = STANDARD_SET_GHZ[..n]
        .iter()
        .map(|(l, u, f)| format!(r#"{{"lower":"{l}","upper":"{u}","value_ghz":{f},"sigma_mhz":0.03}}"#))
        .collect();
    write(dir, "measurements.json", &format!(r#"{{"measurements":[{}]}}"#, items.join(",")))
}

#[test]
fn estimate_standard_set() {
    let tmp = TempDir::new().unwrap();
    let input = standard_set_file(tmp.path(), 7);
    let out = tmp.path().join("out");
    let o = run_in(&out, &["estimate", &input, "--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(out.join("estimate.json"));
    let p = &v["params_mhz"];
    let expect = [
        ("omega1", 5415.3875),
        ("omega2", 4888.2125),
        ("omega3", 2879.4425),
        ("j12", -6.55125),
        ("j13", 6.16375),
        ("j23", 144.19625),
        ("k123", -4.50875),
    ];
    for (name, value) in expect {
        assert!((p[name].as_f64().unwrap() - value).abs() < 1e-6, "{name}");
    }
    assert_eq!(v["metadata"]["seed"], 11);
    assert_eq!(json(out.join("metadata.json"))["seed"], 11);
    assert!(!out.join("selection_subsets.csv").exists());
}

#[test]
fn estimate_twelve_writes_selection_csv() {
    let tmp = TempDir::new().unwrap();
    let truth = HamiltonianParams::reference_device();
    let records: Vec<MeasurementRecord> =
        synthesize(&truth, &enumerate_transitions(), 0.03).iter().map(MeasurementRecord::from).collect();
    let input = write(tmp.path(), "all.json", &serde_json::to_string(&records).unwrap());
    let out = tmp.path().join("out");
    let o = run_in(&out, &["estimate", &input, "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("selection_subsets.csv")).unwrap();
    assert_eq!(csv.lines().count(), 385);
    let table = fs::read_to_string(out.join("estimate.csv")).unwrap();
    assert!(table.starts_with("parameter,value_mhz,sigma_mhz,selection_error_mhz"));
    assert_eq!(table.lines().count(), 8);
}

#[test]
fn estimate_error_codes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let six = standard_set_file(tmp.path(), 6);
    assert_eq!(code(&run_in(&out, &["estimate", &six])), 2);
    let bad = write(tmp.path(), "bad.json", "{not json");
    let o = run_in(&out, &["estimate", &bad]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    let no_unit = write(tmp.path(), "nounit.json", r#"[{"lower":"000","upper":"001","value":2587.0,"sigma_mhz":0.1}]"#);
    assert_eq!(code(&run_in(&out, &["estimate", &no_unit])), 1);
    let missing = tmp.path().join("missing.json");
    assert_eq!(code(&run_in(&out, &["estimate", missing.to_str().unwrap()])), 1);
    assert_eq!(code(&trispin(&["no-such-command"])), 1);
}

#[test]
fn subset_scan_counts() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(&run_in(&out, &["subset-scan"])), 0);
    let v = json(out.join("subsets.json"));
    assert_eq!(v["total"], 792);
    assert_eq!(v["complete"], 384);
}

#[test]
fn end_to_end_noiseless_and_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "cfg.json", r#"{"noise_sigma": 0.0}"#);
    let a = tmp.path().join("a");
    let o = run_in(&a, &["end-to-end", "--config", &cfg, "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(a.join("end_to_end.json"));
    assert_eq!(v["metadata"]["seed"], 9);
    let deltas = v["trials"][0]["deltas_mhz"].as_object().unwrap();
    assert_eq!(deltas.len(), 7);
    assert!(deltas.values().all(|d| d.as_f64().unwrap().abs() < 1e-6), "{deltas:?}");

    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert_eq!(code(&run_in(&b, &["end-to-end", "--trials", "3", "--seed", "5"])), 0);
    assert_eq!(code(&run_in(&c, &["end-to-end", "--trials", "3", "--seed", "5"])), 0);
    for f in ["end_to_end.json", "metadata.json"] {
        assert_eq!(fs::read(b.join(f)).unwrap(), fs::read(c.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn end_to_end_without_signal_exits_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "cfg.json",
        r#"{"signal": {"offset": 0.5, "background_per_spectator": 0.0, "amplitude": 0.0, "phase_rad": 0.0}}"#,
    );
    let out = tmp.path().join("out");
    assert_eq!(code(&run_in(&out, &["end-to-end", "--config", &cfg])), 2);
}

#[test]
fn fit_ramsey_json_and_csv_traces() {
    let tmp = TempDir::new().unwrap();
    let truth = HamiltonianParams::reference_device();
    let t = enumerate_transitions()[4];
    let f = transition_frequency(&truth, t);
    let dec = DecoherenceConfig { t2_ns: [150.0; 3], ..DecoherenceConfig::coupled_preset() };
    let delays = uniform_grid(0.0, 2.0, 200);
    let trace = simulate_ramsey_trace(&truth, t, f - 17.0, &dec, &SignalModel::default(), 0.02, 3, &delays).unwrap();
    let input = write(tmp.path(), "trace.json", &serde_json::to_string(&trace).unwrap());
    let out = tmp.path().join("out");
    let o = run_in(&out, &["fit-ramsey", &input]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(out.join("fit_ramsey.json"));
    let value = v["transition_mhz"].as_f64().unwrap();
    let sigma = v["transition_sigma_mhz"].as_f64().unwrap();
    assert!((value - f).abs() < 4.0 * sigma, "{value} vs {f} +/- {sigma}");
    assert!(v["fit"]["converged"].as_bool().unwrap());

    let csv = write(tmp.path(), "trace.csv", &trace.to_csv());
    assert_eq!(code(&run_in(&out, &["fit-ramsey", &csv])), 1);
    let meta = write(tmp.path(), "meta.json", &serde_json::to_string(&trace.metadata).unwrap());
    let o = run_in(&out, &["fit-ramsey", &csv, "--metadata", &meta, "--format", "csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("fit_ramsey.csv")).unwrap().contains("transition_mhz"));

    let flat = write(tmp.path(), "flat.csv", &(0..50).map(|i| format!("{},0.5\n", 2 * i)).collect::<String>());
    assert_eq!(code(&run_in(&out, &["fit-ramsey", &flat, "--metadata", &meta])), 2);
}

#[test]
fn calibrate_identity_device() {
    let tmp = TempDir::new().unwrap();
    let device = write(
        tmp.path(),
        "device.json",
        r#"{"c": [[1,0,0,0,0],[0,1,0,0,0],[0,0,1,0,0],[0,0,0,1,0],[0,0,0,0,1]], "f0": [0,0,0,0,0], "coupler": [3,4]}"#,
    );
    let out = tmp.path().join("out");
    let o = run_in(&out, &["calibrate-crosstalk", &device, "--iterations", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("residuals.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iteration,mean_percent,max_percent"));
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cols[1] < 1e-6 && cols[2] < 1e-6, "{line}");
    }
    let v = json(out.join("correction.json"));
    let m = v["correction"].as_array().unwrap();
    for (i, row) in m.iter().enumerate() {
        for (j, x) in row.as_array().unwrap().iter().enumerate() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((x.as_f64().unwrap() - expect).abs() < 1e-8);
        }
    }
}

#[test]
fn calibrate_rejects_bad_devices() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    let ragged = write(tmp.path(), "ragged.json", r#"{"c": [[1,0],[0]], "f0": [0,0]}"#);
    assert_eq!(code(&run_in(&out, &["calibrate-crosstalk", &ragged])), 1);
    let two = write(tmp.path(), "two.json", r#"{"c": [[1,0],[0,1]], "f0": [0,0]}"#);
    assert_eq!(code(&run_in(&out, &["calibrate-crosstalk", &two, "--iterations", "0"])), 2);
}

#[test]
fn coupling_sweep_default_template() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(&run_in(&out, &["coupling-sweep", "--format", "csv"])), 0);
    let csv = fs::read_to_string(out.join("coupling_sweep.csv")).unwrap();
    let gaps: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert!(gaps.len() > 5);
    assert!(gaps.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(code(&run_in(&out, &["coupling-sweep", "--gaps-mhz", "8000,9000"])), 2);
}

#[test]
fn coupling_sweep_single_system() {
    let tmp = TempDir::new().unwrap();
    let system = write(
        tmp.path(),
        "system.json",
        r#"{
          "subsystems": [
            {"kind": "flux_qubit", "name": "A", "epsilon": 0, "delta": 2700},
            {"kind": "flux_qubit", "name": "B", "epsilon": 0, "delta": 2400},
            {"kind": "flux_qubit", "name": "D", "epsilon": 0, "delta": 1400}
          ],
          "couplings": [{"strength": 20, "factors": [["A", "x"], ["B", "x"]]}],
          "qubits": ["A", "B", "D"]
        }"#,
    );
    let out = tmp.path().join("out");
    let o = run_in(&out, &["coupling-sweep", "--system", &system]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(out.join("effective.json"));
    assert!((v["params_mhz"]["omega3"].as_f64().unwrap() - 2800.0).abs() < 1e-6);
    assert!(v["params_mhz"]["k123"].as_f64().unwrap().abs() < 1e-6);
}

#[test]
fn flux_noise_round_trip() {
    let tmp = TempDir::new().unwrap();
    let mut csv = String::from("flux_slope_hz_per_phi0,gamma_phi_per_s\n");
    for i in 1..=12 {
        let slope = 5e8 * i as f64;
        let gamma = 27.2e-6 * std::f64::consts::LN_2.sqrt() * 2.0 * std::f64::consts::PI * slope;
        csv.push_str(&format!("{slope},{}\n", gamma * (1.0 + 0.01 * ((i % 3) as f64 - 1.0))));
    }
    let input = write(tmp.path(), "points.csv", &csv);
    let out = tmp.path().join("out");
    assert_eq!(code(&run_in(&out, &["flux-noise", &input])), 0);
    let a = json(out.join("flux_noise.json"))["sqrt_amplitude_micro_phi0"].as_f64().unwrap();
    assert!((a / 27.2 - 1.0).abs() < 0.02, "{a}");
    let one = write(tmp.path(), "one.csv", "flux_slope_hz_per_phi0,gamma_phi_per_s\n1e9,100\n");
    assert_eq!(code(&run_in(&out, &["flux-noise", &one])), 2);
}

#[test]
fn dispersion_reconstruction() {
    let tmp = TempDir::new().unwrap();
    let mut csv = String::from("flux_phi0,slope_mhz_per_phi0\n");
    for i in 0..=200 {
        let x = -0.2 + 0.002 * i as f64;
        csv.push_str(&format!("{x},{}\n", 3.0 * x * x - 0.01));
    }
    let input = write(tmp.path(), "slopes.csv", &csv);
    let out = tmp.path().join("out");
    assert_eq!(code(&run_in(&out, &["reconstruct-dispersion", &input, "--format", "csv"])), 0);
    let text = fs::read_to_string(out.join("dispersion.csv")).unwrap();
    let last: Vec<f64> = text.lines().last().unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    let exact = |x: f64| x.powi(3) - 0.01 * x;
    assert!((last[1] - (exact(0.2) - exact(-0.2))).abs() < 1e-5, "{last:?}");
    let unsorted = write(tmp.path(), "unsorted.csv", "flux_phi0,slope_mhz_per_phi0\n0.1,1\n0.0,1\n0.2,1\n");
    assert_eq!(code(&run_in(&out, &["reconstruct-dispersion", &unsorted])), 2);
}

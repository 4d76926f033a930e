use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fluxonium"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_json(o: &Output) -> Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    serde_json::from_str(text.lines().last().expect("stderr line")).expect("structured error")
}

/// Data tables of a CSV document: `#` lines are skipped, and a
/// `# table <name>` line starts a new table.
fn tables(doc: &str) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let mut out: Vec<(Vec<String>, Vec<Vec<String>>)> = Vec::new();
    let mut fresh = true;
    for line in doc.lines() {
        if let Some(rest) = line.strip_prefix("# ") {
            if rest.starts_with("table ") {
                fresh = true;
            }
            continue;
        }
        let cells: Vec<String> = split_csv(line);
        if fresh {
            out.push((cells, Vec::new()));
            fresh = false;
        } else {
            out.last_mut().unwrap().1.push(cells);
        }
    }
    out
}

fn split_csv(line: &str) -> Vec<String> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(line.as_bytes());
    r.records()
        .next()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .unwrap_or_default()
}

fn records(doc: &str, which: usize) -> Vec<HashMap<String, String>> {
    let (h, rows) = &tables(doc)[which];
    rows.iter()
        .map(|r| h.iter().cloned().zip(r.iter().cloned()).collect())
        .collect()
}

fn quantities(doc: &str) -> HashMap<String, String> {
    records(doc, 0)
        .into_iter()
        .map(|r| (r["quantity"].clone(), r["value"].clone()))
        .collect()
}

fn f(s: &str) -> f64 {
    s.parse().unwrap_or_else(|_| panic!("not a number: {s:?}"))
}

fn annotations(doc: &str, key: &str) -> Vec<Value> {
    let prefix = format!("# {key} ");
    doc.lines()
        .filter_map(|l| l.strip_prefix(prefix.as_str()))
        .map(|j| serde_json::from_str(j).unwrap())
        .collect()
}

#[test]
fn metadata_header_has_version_and_hash() {
    let o = run(&["convert", "--ec", "1", "--el", "1"]);
    assert!(o.status.success());
    let doc = stdout(&o);
    let lines: Vec<&str> = doc.lines().take(4).collect();
    assert!(lines[0].starts_with("# fluxonium "));
    assert_eq!(lines[1], "# command convert");
    let config = lines[2].strip_prefix("# config ").unwrap();
    let digest = lines[3].strip_prefix("# config_sha256 ").unwrap();
    use sha2::Digest;
    let expect: String = sha2::Sha256::digest(config.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(digest, expect);
}

#[test]
fn oscillator_point_has_no_anharmonicity() {
    let o = run(&["spectrum", "--ej-over-ec", "0", "--el-over-ec", "0.01"]);
    assert!(o.status.success(), "{o:?}");
    let r = &records(&stdout(&o), 0)[0];
    assert!(f(&r["rel_anharmonicity"]).abs() < 1e-9);
    assert!((f(&r["delta_10"]) - 0.2).abs() < 1e-9);
}

#[test]
fn delocalized_wavefunction_spans_several_wells() {
    let o = run(&[
        "spectrum",
        "--ej-over-ec",
        "1",
        "--el-over-ec",
        "1e-4",
        "--theta",
        "0",
        "--wavefunction",
    ]);
    assert!(o.status.success(), "{o:?}");
    let doc = stdout(&o);
    let wf = records(&doc, 1);
    let phi: Vec<f64> = wf.iter().map(|r| f(&r["phi"])).collect();
    let psi: Vec<f64> = wf.iter().map(|r| f(&r["psi0"])).collect();
    let h = phi[1] - phi[0];
    let norm: f64 = psi.iter().map(|p| p * p).sum::<f64>() * h;
    assert!((norm - 1.0).abs() < 1e-3, "{norm}");
    let peak = psi.iter().cloned().fold(0.0, f64::max);
    // weight well beyond the neighbouring minima at ±2π
    let far = phi
        .iter()
        .zip(&psi)
        .filter(|(x, _)| x.abs() >= 2.0 * TAU)
        .map(|(_, p)| p.abs())
        .fold(0.0, f64::max);
    assert!(far > 0.1 * peak, "far {far} peak {peak}");
    for r in &wf {
        let x = f(&r["phi"]);
        let v = 1e-4 * x * x - x.cos();
        assert!((f(&r["potential"]) - v).abs() < 1e-12);
    }
}

#[test]
fn physical_flags_match_explicit_energies() {
    // independent conversions from the SI constants
    let e: f64 = 1.602176634e-19;
    let h: f64 = 6.62607015e-34;
    let phi0 = h / (2.0 * e);
    let (c, l, ic) = (5e-15, 1e-5, 300e-12);
    let ec = (2.0 * e).powi(2) / (2.0 * c) / h / 1e9;
    let el = (phi0 / TAU).powi(2) / (2.0 * l) / h / 1e9;
    let ej = ic * phi0 / TAU / h / 1e9;
    let physical = run(&[
        "spectrum", "--L", "1e4nH", "--C", "5fF", "--Ic", "300pA", "--theta", "1",
    ]);
    let explicit = run(&[
        "spectrum",
        "--ec",
        &format!("{ec}"),
        "--el",
        &format!("{el}"),
        "--ej",
        &format!("{ej}"),
        "--theta",
        "1",
    ]);
    assert!(physical.status.success() && explicit.status.success());
    let a = &records(&stdout(&physical), 0)[0];
    let b = &records(&stdout(&explicit), 0)[0];
    for (k, v) in a {
        if k == "basis_dimension" {
            assert_eq!(v, &b[k]);
            continue;
        }
        let (x, y) = (f(v), f(&b[k]));
        assert!(
            (x - y).abs() <= 1e-9 * y.abs().max(1e-12),
            "{k}: {x} vs {y}"
        );
    }
}

#[test]
fn free_charge_dispersion() {
    let o = run(&[
        "dispersion",
        "--ej-over-ec",
        "0",
        "--ec",
        "2",
        "--points",
        "11",
    ]);
    assert!(o.status.success());
    let doc = stdout(&o);
    for r in records(&doc, 0) {
        let n = f(&r["n_tilde"]);
        assert!((f(&r["eps0"]) - 2.0 * n * n).abs() < 1e-12);
    }
    let s = &annotations(&doc, "summary")[0];
    assert!((s["e_c_star_numeric"].as_f64().unwrap() - 2.0).abs() < 1e-8);
    assert!(s["e_c_star_tb"].is_null());
}

#[test]
fn bands_anticross_at_the_zone_edge() {
    let o = run(&["dispersion", "--ej-over-ec", "0.5", "--points", "41"]);
    let rows = records(&stdout(&o), 0);
    let gaps: Vec<f64> = rows.iter().map(|r| f(&r["eps1"]) - f(&r["eps0"])).collect();
    let min = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(gaps[0], min);
    assert_eq!(gaps[gaps.len() - 1], min);
    assert!(min > 0.0 && min < gaps[gaps.len() / 2]);
}

#[test]
fn dispersion_summary_compares_both_capacitances() {
    let o = run(&["dispersion", "--ej-over-ec", "1"]);
    let s = &annotations(&stdout(&o), "summary")[0];
    let n = s["e_c_star_numeric"].as_f64().unwrap();
    let tb = s["e_c_star_tb"].as_f64().unwrap();
    let d = s["tb_relative_difference"].as_f64().unwrap();
    assert!(((n - tb).abs() / tb - d).abs() < 1e-15);
    assert!(n > 0.0 && n < 1.0);
}

#[test]
fn tradeoff_curve_is_monotone() {
    let o = run(&["tradeoff", "--r-imp", "log:60:170:6", "--r-j", "0.4"]);
    assert!(o.status.success(), "{o:?}");
    let doc = stdout(&o);
    let rows = records(&doc, 0);
    for w in rows.windows(2) {
        assert!(f(&w[0]["r_imp"]) < f(&w[1]["r_imp"]));
        assert!(f(&w[1]["m_phi_sq"]) < f(&w[0]["m_phi_sq"]));
        assert!(f(&w[1]["rel_anharmonicity"]).abs() < f(&w[0]["rel_anharmonicity"]).abs());
    }
    let fits = annotations(&doc, "fit");
    assert_eq!(fits.len(), 2);
    assert_eq!(fits[0]["column"], "m_phi_sq");
    assert!(fits[0]["slope"].as_f64().unwrap() < 0.0);
}

#[test]
fn empty_grid_is_rejected() {
    let o = run(&["sweep", "--r-imp", "", "--r-j", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "validation");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"command":"sweep","parameters":{"r_imp":[3,10,30],"r_j":"0.5,1.5","theta":"pi/2"}}"#,
    )
    .unwrap();
    let out = |name: &str| {
        let p = dir.path().join(name);
        let o = bin()
            .args(["--config", cfg.to_str().unwrap(), "-o", p.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(o.status.success(), "{o:?}");
        std::fs::read(p).unwrap()
    };
    let (a, b) = (out("a.csv"), out("b.csv"));
    assert_eq!(a, b);
    let doc = String::from_utf8(a).unwrap();
    let (header, rows) = &tables(&doc)[0];
    assert_eq!(
        header,
        &fluxonium::sweep::RECORD_COLUMNS.map(String::from).to_vec()
    );
    assert_eq!(rows.len(), 6);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"command":"convert","parameters":{"ec":"300MHz","el":1}}"#,
    )
    .unwrap();
    let o = bin()
        .args([
            "convert",
            "--config",
            cfg.to_str().unwrap(),
            "--el",
            "300MHz",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{o:?}");
    let q = quantities(&stdout(&o));
    assert!((f(&q["r_imp"]) - 1.0).abs() < 1e-15);
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    for body in [
        r#"{"command":"convert","parameters":{"ec":1,"e_c":1}}"#,
        r#"{"command":"convert","parameters":{"ec":1},"colour":"red"}"#,
        r#"{"command":"convert","parameters":{"r_j":[1]}}"#,
    ] {
        std::fs::write(&cfg, body).unwrap();
        let o = bin()
            .args(["--config", cfg.to_str().unwrap()])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(2), "{body}");
        assert!(o.stdout.is_empty());
    }
}

#[test]
fn conflicting_commands_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"command":"budget"}"#).unwrap();
    let o = bin()
        .args(["convert", "--ec", "1", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn json_mirror_matches_csv() {
    let args = ["sweep", "--r-imp", "5,20", "--r-j", "1"];
    let csv = stdout(&run(&args));
    let mut j = args.to_vec();
    j.extend(["--format", "json"]);
    let doc: Value = serde_json::from_str(&stdout(&run(&j))).unwrap();
    let rows = doc["tables"]["sweep"]["rows"].as_array().unwrap();
    let from_csv = records(&csv, 0);
    assert_eq!(rows.len(), from_csv.len());
    for (a, b) in rows.iter().zip(&from_csv) {
        for col in ["r_imp", "delta_10", "m_phi_sq", "i_p_max"] {
            assert_eq!(a[col].as_f64().unwrap(), f(&b[col]), "{col}");
        }
        assert_eq!(a["phase"].as_str().unwrap(), b["phase"]);
        assert!(a["error"].is_null());
    }
    assert_eq!(doc["config"]["format"], "json");
}

#[test]
fn io_failures_exit_four() {
    let o = run(&["convert", "--ec", "1", "-o", "/nonexistent-dir/x.csv"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_json(&o)["error"]["kind"], "io");
    let o = run(&["--config", "/nonexistent-dir/c.json"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn convergence_failures_exit_three() {
    let o = run(&[
        "spectrum",
        "--ej-over-ec",
        "1",
        "--el-over-ec",
        "1e-4",
        "--max-dimension",
        "64",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"]["kind"], "convergence");
}

#[test]
fn failed_sweep_points_are_flushed_then_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    let o = run(&[
        "sweep",
        "--r-imp",
        "2,100",
        "--r-j",
        "1",
        "--max-dimension",
        "64",
        "-o",
        p.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_json(&o);
    assert_eq!(e["error"]["kind"], "partial_failure");
    assert_eq!(e["error"]["points"].as_array().unwrap().len(), 1);
    let rows = records(&std::fs::read_to_string(&p).unwrap(), 0);
    assert_eq!(rows.len(), 2);
    assert!(rows[0]["error"].is_empty() && !rows[0]["delta_10"].is_empty());
    assert!(rows[1]["error"].starts_with("convergence"));
    assert!(rows[1]["delta_10"].is_empty());
}

#[test]
fn convert_matches_hand_numbers() {
    let o = run(&["convert", "--L", "1e4nH", "--ec", "300MHz"]);
    let q = quantities(&stdout(&o));
    let h: f64 = 6.62607015e-34;
    let phi0 = h / (2.0 * 1.602176634e-19);
    let el = (phi0 / TAU).powi(2) / (2.0 * 1e-5) / h / 1e9;
    assert!((f(&q["el"]) - el).abs() < 1e-12 * el);
    assert!((el - 8.17e-3).abs() < 1e-5);
    assert!((f(&q["r_imp"]) - 6.06).abs() < 5e-3);
    assert!(q["Ic"].is_empty() && q["r_j"].is_empty());
}

#[test]
fn convert_round_trips() {
    let q1 = quantities(&stdout(&run(&[
        "convert", "--L", "3.3uH", "--C", "7fF", "--Ic", "12nA",
    ])));
    let q2 = quantities(&stdout(&run(&[
        "convert", "--el", &q1["el"], "--ec", &q1["ec"], "--ej", &q1["ej"],
    ])));
    for k in ["L", "C", "Ic", "ec", "el", "ej", "z0"] {
        let (a, b) = (f(&q1[k]), f(&q2[k]));
        assert!((a - b).abs() <= 1e-14 * a.abs(), "{k}: {a} {b}");
    }
    assert!((f(&q1["L"]) - 3.3e-6).abs() < 1e-20);
}

#[test]
fn convert_names_bad_input_sets() {
    let o = run(&["convert", "--C", "5fF", "--ec", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = error_json(&o)["error"]["message"]
        .as_str()
        .unwrap()
        .to_string();
    assert!(
        msg.contains("over-determined") && msg.contains("C") && msg.contains("ec"),
        "{msg}"
    );
    let o = run(&["convert"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = error_json(&o)["error"]["message"]
        .as_str()
        .unwrap()
        .to_string();
    assert!(msg.contains("under-determined"), "{msg}");
    let o = run(&["convert", "--ec", "10nH"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn budget_anchor_chain() {
    let o = run(&[
        "budget",
        "--calibrate",
        "gamma=400kHz,mphi2=30",
        "--m-phi-sq",
        "3.75",
        "--delta",
        "1",
        "--gate-time",
        "10ns",
    ]);
    assert!(o.status.success(), "{o:?}");
    let q = quantities(&stdout(&o));
    assert!((f(&q["gamma_phi"]) - 5e4).abs() < 1e-7);
    assert!((f(&q["p_dephase"]) - 5e-4).abs() < 1e-15);
    assert!((f(&q["gate_time"]) - 1e-8).abs() < 1e-22);
    assert_eq!(q["out_of_regime"], "false");
}

#[test]
fn budget_leakage_vanishes_at_large_anharmonicity() {
    let o = run(&[
        "budget",
        "--gamma-phi",
        "1e4",
        "--delta",
        "1e9",
        "--rabi",
        "1e8",
    ]);
    let q = quantities(&stdout(&o));
    assert!(f(&q["p_leak"]) < 1e-20);
    assert!(q["alpha"].is_empty());
}

#[test]
fn budget_input_checks() {
    let o = run(&[
        "budget",
        "--gamma-phi",
        "1e4",
        "--m-phi-sq",
        "1",
        "--delta",
        "1",
        "--rabi",
        "1e8",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["budget", "--m-phi-sq", "1", "--delta", "1", "--rabi", "1e8"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "budget",
        "--m-phi-sq",
        "1",
        "--alpha",
        "1e-5",
        "--delta",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&[
        "budget",
        "--m-phi-sq",
        "1",
        "--alpha",
        "1e-5",
        "--bath-exponent",
        "3",
        "--delta",
        "1",
        "--rabi",
        "1e8",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "not_implemented");
}

#[test]
fn budget_from_a_circuit_uses_its_spectrum() {
    let o = run(&[
        "budget", "--ec", "1", "--ej", "2.5", "--el", "0.15", "--theta", "pi/2", "--alpha", "1e-6",
        "--rabi", "1e7",
    ]);
    assert!(o.status.success(), "{o:?}");
    let q = quantities(&stdout(&o));
    let p = fluxonium::CircuitParams::new(1.0, 0.15, 2.5, PI / 2.0).unwrap();
    let s = fluxonium::spectrum::observables(&p, 1e-9).unwrap();
    assert!((f(&q["m_phi_sq"]) - s.m_phi_sq).abs() <= 1e-12 * s.m_phi_sq);
    assert!((f(&q["delta"]) - s.anharmonicity.abs()).abs() <= 1e-12);
}

#[test]
fn phase_diagram_reports_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pd.csv");
    let o = run(&[
        "phase-diagram",
        "--el-over-ec",
        "1e-1,1e-2",
        "--r-j",
        "0.2,3",
        "-o",
        p.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let doc = std::fs::read_to_string(&p).unwrap();
    let (header, rows) = &tables(&doc)[0];
    assert_eq!(
        header,
        &fluxonium::sweep::PHASE_COLUMNS.map(String::from).to_vec()
    );
    assert_eq!(rows.len(), 4);
    assert_eq!(annotations(&doc, "row").len(), 2);
    assert!(
        annotations(&doc, "boundary")[0]["monotone"].is_boolean(),
        "{doc}"
    );
}

#[test]
fn wavefunction_can_go_to_its_own_file() {
    let dir = tempfile::tempdir().unwrap();
    let main = dir.path().join("s.csv");
    let wf = dir.path().join("wf.csv");
    let o = run(&[
        "spectrum",
        "--ej-over-ec",
        "1",
        "--el-over-ec",
        "0.05",
        "--wavefunction",
        "--wavefunction-points",
        "21",
        "--wavefunction-output",
        wf.to_str().unwrap(),
        "-o",
        main.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(tables(&std::fs::read_to_string(main).unwrap()).len(), 1);
    let t = tables(&std::fs::read_to_string(&wf).unwrap());
    assert_eq!(t[0].0, vec!["phi", "psi0", "potential"]);
    assert_eq!(t[0].1.len(), 21);
    assert!(Path::new(&wf).exists());
}

#[test]
fn help_exits_cleanly() {
    let o = run(&["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("phase-diagram"));
}

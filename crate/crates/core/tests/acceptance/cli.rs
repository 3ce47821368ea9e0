use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mambax(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mambax")).args(args).arg("--out").arg(out).output().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> usize {
    rows[0].iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"))
}

const SMALL_VERIFY: [&str; 12] = [
    "--set",
    "verify.scan_instances=20",
    "--set",
    "verify.max_len=12",
    "--set",
    "verify.quant_cases=10",
    "--set",
    "verify.invariance_lengths=[7,33,64]",
    "--set",
    "verify.invariance_datasets=2",
    "--set",
    "verify.datasets_per_shape=2",
];

#[test]
fn cli_fit_sfu_writes_tables_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = mambax(&["fit-sfu", "--seed", "4", "--set", "sfu.entries_sweep=[]"], dir);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for (name, entries) in [("exp", 16), ("silu", 32), ("softplus", 32)] {
        let lut: serde_json::Value = serde_json::from_slice(&fs::read(a.join(format!("lut_{name}.json"))).unwrap()).unwrap();
        assert_eq!(lut["meta"]["seed"], 4);
        assert_eq!(lut["meta"]["config_sha256"].as_str().unwrap().len(), 64);
        assert_eq!(lut["coeffs_a"].as_array().unwrap().len(), entries);
        assert_eq!(fs::read(a.join(format!("lut_{name}.json"))).unwrap(), fs::read(b.join(format!("lut_{name}.json"))).unwrap());
        let rows = csv_rows(&a.join(format!("lut_{name}_error.csv")));
        assert_eq!(rows[0], ["x", "true", "approx", "error"]);
        assert_eq!(rows.len(), 1002);
    }
}

#[test]
fn cli_identity_table_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("identity.json");
    fs::write(&cfg, r#"{"sfu": {"functions": [{"function": "identity", "entries": 2}], "entries_sweep": []}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mambax"))
        .args(["fit-sfu", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("sfu_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["tables"][0]["max_abs"], 0.0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("max_abs=0"));
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| mambax(args, tmp.path()).status.code().unwrap();
    assert_eq!(code(&["simulate", "--set", "hw.n_ssa=0"]), 2);
    assert_eq!(code(&["simulate", "--set", "preset=huge"]), 2);
    assert_eq!(code(&["simulate", "--set", "hw.typo=1"]), 2);
    assert_eq!(code(&["fit-sfu", "--set", "sfu.functions=[]"]), 2);
    assert_eq!(code(&["report", "--set", "image_px=224"]), 2, "no report.json yet");

    let empty = mambax(&["verify", "--set", "verify.chunk_sizes=[]"], tmp.path());
    assert_eq!(empty.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("no cases"));

    let mut args = vec!["verify"];
    args.extend(SMALL_VERIFY);
    assert_eq!(code(&args), 0);
    args.extend(["--set", "verify.fault_flip_lisu=true"]);
    let fault = mambax(&args, tmp.path());
    assert_eq!(fault.status.code(), Some(1));
    let err = String::from_utf8_lossy(&fault.stderr);
    assert!(err.contains("FAIL chunk_invariance"), "{err}");
    assert!(err.contains("seed=") && err.contains("L="), "{err}");
    let junit = fs::read_to_string(tmp.path().join("verify_junit.xml")).unwrap();
    assert!(junit.contains("<failure"));
}

#[test]
fn cli_simulate_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mambax(&["simulate", "--set", "simulate.sim_hidden=32"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_blocks"], 24);
    assert_eq!(report["tokens"], 196);
    let rows = csv_rows(&tmp.path().join("breakdown.csv"));
    assert_eq!(rows[0], ["category", "cycles", "latency_s", "share"]);
    let sum: u64 = rows[1..].iter().map(|r| r[1].parse::<u64>().unwrap()).sum();
    assert_eq!(sum, report["total_cycles"].as_u64().unwrap());
    assert_eq!(csv_rows(&tmp.path().join("trace.csv"))[0], ["cycle", "ssa_id", "stage", "active_spes", "event"]);

    assert!(mambax(&["report"], tmp.path()).status.success());
    let md = fs::read_to_string(tmp.path().join("report.md")).unwrap();
    assert!(md.contains("selective_ssm") && md.contains("Roofline"));
}

#[test]
fn cli_sweep_directions() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(mambax(&["sweep"], tmp.path()).status.success());
    let rows = csv_rows(&tmp.path().join("sweep.csv"));
    let (model, px, n, scan, share) = (
        column(&rows, "model"),
        column(&rows, "image_px"),
        column(&rows, "n_ssa"),
        column(&rows, "selective_ssm_cycles"),
        column(&rows, "selective_ssm_share"),
    );
    let body = &rows[1..];
    assert_eq!(body.len(), 36);
    assert_eq!(fs::read_dir(tmp.path().join("cases")).unwrap().count(), 36);
    for m in ["tiny", "small", "base"] {
        for p in ["224", "512", "1024"] {
            let mut pts: Vec<(usize, u64)> = body
                .iter()
                .filter(|r| r[model] == m && r[px] == p)
                .map(|r| (r[n].parse().unwrap(), r[scan].parse().unwrap()))
                .collect();
            pts.sort();
            assert!(pts.windows(2).all(|w| w[1].1 <= w[0].1), "{m}@{p}: {pts:?}");
        }
        let shares: Vec<f64> = ["224", "512", "1024"]
            .iter()
            .map(|p| body.iter().find(|r| r[model] == m && r[px] == *p && r[n] == "8").unwrap()[share].parse().unwrap())
            .collect();
        assert!(shares.windows(2).all(|w| w[1] > w[0]), "{m}: {shares:?}");
    }
}

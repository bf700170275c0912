use std::fs;
use std::path::Path;
use std::process::Command;

use qsmodel::cli::run;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qsmodel"))
}

/// Runs in-process with `--out`, returning (exit code, file contents).
fn run_to_file(args: &[&str], dir: &Path, name: &str) -> (i32, String) {
    let out = dir.join(name);
    let mut argv = vec!["qsmodel"];
    argv.extend_from_slice(args);
    argv.extend_from_slice(&["--out", out.to_str().unwrap()]);
    let code = run(argv);
    (code, fs::read_to_string(&out).unwrap_or_default())
}

fn json(args: &[&str]) -> Value {
    let dir = tempfile::tempdir().unwrap();
    let mut a = args.to_vec();
    a.extend_from_slice(&["--format", "json"]);
    let (code, text) = run_to_file(&a, dir.path(), "out.json");
    assert_eq!(code, 0, "{args:?}");
    serde_json::from_str(&text).unwrap()
}

#[test]
fn pair_row_for_deepseek_at_64() {
    let v = json(&["pair", "--model", "deepseek-v3", "--gpus", "64", "--q", "5", "--context", "131072"]);
    let row = &v[0];
    assert_eq!(row["s"], 0.03125);
    assert_eq!(row["qs"], 0.15625);
    assert_eq!(row["routing_factor"], 32.0);
    assert_eq!(row["moe"]["feasible"], true);
    assert!(row["reuse"]["total_gap"].as_f64().unwrap() > 32.0);
}

#[test]
fn qs_builtin_prints_the_literature_table() {
    let v = json(&["qs", "--builtin"]);
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[3]["name"], "Switch-C");
    assert_eq!(rows[3]["qs_lo"], 3.0 / 2048.0);
}

#[test]
fn single_context_sweep_is_its_own_anchor() {
    let v = json(&["sweep", "--contexts", "1024"]);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["tput_moe_rel"], 100.0);
    assert!(rows[0]["speedup"].as_f64().unwrap() > 0.0);
    assert_eq!(v["anchor"]["context_length"], 1024);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["pair", "--builtin"],
        vec!["sweep", "--contexts", "1024,131072"],
        vec!["attribution"],
        vec!["compare", "--builtin"],
        vec!["autotune", "--model", "grok-1", "--gpus", "16"],
    ] {
        for format in ["table", "csv", "json"] {
            let mut a = args.clone();
            a.extend_from_slice(&["--format", format]);
            let (c1, first) = run_to_file(&a, dir.path(), "a");
            let (c2, second) = run_to_file(&a, dir.path(), "b");
            assert_eq!((c1, c2), (0, 0), "{a:?}");
            assert!(!first.is_empty());
            assert_eq!(first, second, "{a:?}");
        }
    }
}

/// Every CSV number parses back to the JSON value; every table cell is
/// that value at display precision.
#[test]
fn renderings_agree_numerically() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sweep", "--contexts", "1024,16384,131072"];
    let with = |f: &str| {
        let mut a = args.to_vec();
        a.extend_from_slice(&["--format", f]);
        run_to_file(&a, dir.path(), f).1
    };
    let (table, csv, json) = (with("table"), with("csv"), with("json"));
    let v: Value = serde_json::from_str(&json).unwrap();
    let rows = v["rows"].as_array().unwrap();

    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["context", "B_moe", "B_dense", "moe_rel_pct", "dense_rel_pct", "speedup", "moe_plan", "dense_plan"]
    );
    let table_lines: Vec<&str> = table.lines().skip(2).collect();
    for ((rec, row), line) in reader.records().map(Result::unwrap).zip(rows).zip(&table_lines) {
        let cells: Vec<&str> = line.split_whitespace().collect();
        for (i, key) in [(0, "context_length"), (1, "b_moe"), (2, "b_dense")] {
            assert_eq!(rec[i].parse::<u64>().unwrap(), row[key].as_u64().unwrap());
            assert_eq!(cells[i].parse::<u64>().unwrap(), row[key].as_u64().unwrap());
        }
        for (i, key, shown) in [(3, "tput_moe_rel", 1), (4, "tput_dense_rel", 1), (5, "speedup", 2)] {
            let exact = row[key].as_f64().unwrap();
            assert_eq!(rec[i].parse::<f64>().unwrap(), exact);
            assert_eq!(cells[i], qsmodel::render::format_num(exact, if shown == 1 { qsmodel::render::Prec::Pct } else { qsmodel::render::Prec::Ratio }));
        }
    }
}

#[test]
fn oom_rows_render_with_dashes() {
    let dir = tempfile::tempdir().unwrap();
    // A single GPU cannot hold DeepSeek-V3 at all.
    let (code, table) = run_to_file(&["pair", "--model", "deepseek-v3", "--gpus", "1"], dir.path(), "t");
    assert_eq!(code, 0);
    let row = table.lines().nth(2).unwrap();
    assert!(row.contains("OOM"), "{row}");
    assert!(row.split_whitespace().filter(|c| *c == "-").count() >= 4, "{row}");
}

#[test]
fn exit_codes() {
    let status = bin().args(["feasible", "--model", "deepseek-v3", "--gpus", "1", "--plan", "tp=1"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));

    let status = bin().args(["feasible", "--model", "llama-2-70b", "--gpus", "8"]).output().unwrap();
    assert_eq!(status.status.code(), Some(0));

    let status = bin().args(["autotune", "--model", "deepseek-v3", "--gpus", "1"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));

    let out = bin().args(["sweep", "--bogus-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = bin().args(["pair", "--model", "no-such-model"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["sweep", "--contexts", "4096,1024"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn calibration_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let mut cal: Value = serde_json::to_value(qsmodel::config::builtin_calibration_file()).unwrap();
    cal["calibration"]["id"] = Value::from("tight");
    cal["calibration"]["memory"]["misc_bytes"] = Value::from(120e9);
    let path = dir.path().join("cal.json");
    fs::write(&path, cal.to_string()).unwrap();
    let base = json(&["feasible", "--model", "deepseek-v3"]);
    let tight = json(&["feasible", "--model", "deepseek-v3", "--calibration", path.to_str().unwrap()]);
    assert!(tight["memory"]["n_eff_max"].as_u64().unwrap() < base["memory"]["n_eff_max"].as_u64().unwrap());
}

#[test]
fn cluster_file_sets_hardware_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut hw = serde_json::to_value(qsmodel::config::builtin_hardware()).unwrap();
    hw["hbm_capacity_bytes"] = Value::from(225e9);
    let file = serde_json::json!({
        "schema_version": 1, "id": "big", "cluster": {
            "hardware": hw, "num_gpus": 32, "reserve_bytes": 0.0, "misc_bytes": 0.0, "safety_fraction": 0.0
        }
    });
    let path = dir.path().join("cluster.json");
    fs::write(&path, file.to_string()).unwrap();
    let big = json(&["pair", "--model", "deepseek-v3", "--cluster", path.to_str().unwrap()]);
    let base = json(&["pair", "--model", "deepseek-v3", "--gpus", "32"]);
    assert_eq!(big[0]["num_gpus"], 32);
    assert!(big[0]["moe"]["batch_aggregate"].as_u64() > base[0]["moe"]["batch_aggregate"].as_u64());
}

//! End-to-end runs of the binary: exit codes, reports and artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isorg"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("isorg-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> (i32, Value) {
    let out = bin().args(args).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let v = serde_json::from_str(&text).unwrap_or(Value::String(text));
    (out.status.code().unwrap(), v)
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn csv_column(text: &str, name: &str) -> Vec<f64> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().parse().unwrap()).collect()
}

#[test]
fn strict_ledger_is_admissible() {
    let (code, v) = run(&["ledger", "--strict"]);
    assert_eq!(code, 0, "{v}");
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["all_admissible"], true);
}

#[test]
fn large_eps_f_flags_the_first_condition() {
    let d = scratch("epsf");
    let cfg = write_config(&d, "[ledger]\nsequence = [8.0, 8.0]\neps_f = 0.5\n");
    let (code, v) = run(&["ledger", "--strict", "--config", &cfg]);
    assert_eq!(code, 1, "{v}");
    let entries = v["entries"].as_array().unwrap();
    assert!(entries.iter().all(|e| e["admissibility"]["gap_margin_ok"] == false));
}

#[test]
fn empty_sequence_reports_the_basis_only() {
    let d = scratch("empty");
    let cfg = write_config(&d, "[ledger]\nsequence = []\n");
    let (code, v) = run(&["ledger", "--strict", "--config", &cfg]);
    assert_eq!(code, 0, "{v}");
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0]["ell"], 0);
    assert_eq!(entries[0]["caps"]["eps"], v["basis"]);
}

#[test]
fn free_flow_trajectory_is_constant() {
    let d = scratch("free");
    let out = d.join("out");
    let (code, v) = run(&["flow", "--preset", "free", "--s", "1.5", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{v}");
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    for col in ["re_e_center", "im_e_center", "norm_i", "re_eigenvalue", "error_bar"] {
        assert!(csv_column(&csv, col).iter().all(|x| *x == 0.0), "{col}");
    }
    for col in ["norm_f", "norm_z"] {
        let xs = csv_column(&csv, col);
        assert!(xs.iter().all(|x| (x - xs[0]).abs() <= 1e-14), "{col}: {xs:?}");
    }
    let back = isorg::kernels::KernelFamily::from_json(&fs::read_to_string(out.join("family_final.json")).unwrap()).unwrap();
    assert!(back.interaction_is_zero());
}

#[test]
fn coupling_flow_decays_and_is_deterministic() {
    let d = scratch("coupling");
    let cfg = write_config(
        &d,
        "seed = 5\n[grids]\nn_modes = 8\nn_r = 10\n[family]\npreset = \"coupling\"\ncoupling = [0.005, 0.0]\n[flow]\ns = 2.0\n",
    );
    let (o1, o2) = (d.join("a"), d.join("b"));
    let (code, v) = run(&["flow", "--config", &cfg, "--out-dir", o1.to_str().unwrap()]);
    assert_eq!(code, 0, "{v}");
    let (code, _) = run(&["flow", "--config", &cfg, "--out-dir", o2.to_str().unwrap()]);
    assert_eq!(code, 0);
    let a = fs::read_to_string(o1.join("trajectory.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(o2.join("trajectory.csv")).unwrap());
    let s = csv_column(&a, "s");
    let ni = csv_column(&a, "norm_i");
    // decay from the first full step against e^{-mu s / 4}, mu = 1/2
    for k in 2..ni.len() {
        assert!(ni[k] < ni[k - 1]);
        assert!(ni[k] <= ni[1] * (-0.125 * (s[k] - s[1])).exp());
    }
}

#[test]
fn random_preset_is_reproducible_from_the_seed() {
    let d = scratch("random");
    let cfg = write_config(&d, "seed = 11\n[grids]\nn_modes = 6\nn_r = 8\n[family]\npreset = \"random\"\nrandom_amplitude = 1e-5\n[flow]\ns = 0.5\n");
    let outs: Vec<String> = ["a", "b"]
        .iter()
        .map(|n| {
            let o = d.join(n);
            let (code, v) = run(&["flow", "--config", &cfg, "--out-dir", o.to_str().unwrap()]);
            assert_eq!(code, 0, "{v}");
            fs::read_to_string(o.join("trajectory.csv")).unwrap()
        })
        .collect();
    assert_eq!(outs[0], outs[1]);
    let o = d.join("c");
    let (code, _) = run(&["flow", "--config", &cfg, "--seed", "12", "--out-dir", o.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_ne!(outs[0], fs::read_to_string(o.join("trajectory.csv")).unwrap());
}

#[test]
fn domain_violation_exits_with_the_gate_code() {
    let d = scratch("domain");
    let (code, v) = run(&["flow", "--z-center", "0.4", "0", "--out-dir", d.to_str().unwrap()]);
    assert_eq!(code, 3, "{v}");
    assert!(v["error"].as_str().unwrap().contains("domain"));
}

#[test]
fn config_errors_name_the_field() {
    let d = scratch("bad");
    let cfg = write_config(&d, "[grids]\nl_max = 1\n");
    let (code, v) = run(&["flow", "--config", &cfg]);
    assert_eq!(code, 2);
    assert!(v["error"].as_str().unwrap().starts_with("grids.l_max"), "{v}");
    let cfg = write_config(&d, "[stencil]\nradius = 1.0\n");
    let (code, v) = run(&["ledger", "--config", &cfg]);
    assert_eq!(code, 2);
    assert!(v["error"].as_str().unwrap().contains("radius"), "{v}");
    let (code, _) = run(&["flow", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code, 2);
}

#[test]
fn oracle_checks_pass_on_the_default_coupling() {
    let (code, v) = run(&["oracle", "--preset", "free"]);
    assert_eq!(code, 0, "{v}");
    assert_eq!(v["wick_vs_oracle"]["comparison"]["residual"], 0.0);
    let (code, v) = run(&["oracle"]);
    assert_eq!(code, 0, "{v}");
    assert_eq!(v["semigroup"]["pass"], true);
    assert_eq!(v["wick_vs_oracle"]["pass"], true);
}

#[test]
fn spectrum_of_the_free_family_is_zero() {
    let (code, v) = run(&["spectrum", "--preset", "free", "--s", "1.0"]);
    assert_eq!(code, 0, "{v}");
    assert_eq!(v["estimate"][0], 0.0);
    assert_eq!(v["error_bar"], 0.0);
    assert_eq!(v["series"].as_array().unwrap().len(), 3);
}

#[test]
fn config_commands_round_trip() {
    let (code, v) = run(&["strict-defaults"]);
    assert_eq!(code, 0);
    let text = v.as_str().unwrap();
    let cfg = isorg::cli::RunConfig::from_toml(text).unwrap();
    assert_eq!(cfg, isorg::cli::RunConfig::strict_default());
    let (code, v) = run(&["config", "--s", "3.5"]);
    assert_eq!(code, 0);
    assert_eq!(isorg::cli::RunConfig::from_toml(v.as_str().unwrap()).unwrap().flow.s, 3.5);
}

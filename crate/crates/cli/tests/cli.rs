use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fbmlab_cli::catalog::{Catalog, CatalogEntry};
use fbmlab_cli::config::ExperimentConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn fbmlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbmlab")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn catalog() -> Catalog {
    Catalog::load(&configs().join("catalog.toml")).unwrap()
}

#[test]
fn every_shipped_config_validates() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap() == "catalog.toml" {
            continue;
        }
        ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let out = fbmlab(&["validate", p.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
}

#[test]
fn catalog_covers_the_statements_and_references_existing_files() {
    let cat = catalog();
    let tags: BTreeSet<&str> = cat.entry.iter().map(|e| e.tag.as_str()).collect();
    for want in ["Thm 2.1", "Prop 2.6", "Thm 2.9", "Prop 2.11", "Prop 2.14", "Thm 2.15", "Prop 2.7(b)"] {
        assert!(tags.contains(want), "missing {want}");
    }
    for e in &cat.entry {
        assert!(cat.config_path(e).is_file(), "{}", e.config.display());
    }
    let loaded = cat.configs().unwrap();
    for (e, cfg) in loaded {
        assert_eq!(e.tag, cfg.statement);
    }
}

#[test]
fn catalog_round_trips_through_json() {
    let path = configs().join("catalog.toml");
    let out = fbmlab(&["list", "--catalog", path.to_str().unwrap(), "--format", "json"]);
    assert_eq!(code(&out), 0);
    let back: Vec<CatalogEntry> = serde_json::from_slice(&out.stdout).unwrap();
    let cat = catalog();
    assert_eq!(back.len(), cat.entry.len());
    for (a, b) in back.iter().zip(&cat.entry) {
        assert_eq!((&a.tag, &a.config, &a.summary), (&b.tag, &b.config, &b.summary));
    }
    let text = fbmlab(&["list", "--catalog", path.to_str().unwrap()]);
    assert_eq!(String::from_utf8(text.stdout).unwrap(), cat.table());
}

#[test]
fn brownian_kernel_table_is_the_minimum() {
    let dir = scratch("kernel");
    let cfg = configs().join("fbm_h05_kernel.toml");
    let out = fbmlab(&["run", cfg.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.join("fbm_h05_kernel/kernel.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("s,t,value"));
    let mut n = 0;
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[2] - v[0].min(v[1])).abs() < 1e-12, "{line}");
        n += 1;
    }
    assert_eq!(n, 100);
    assert!(dir.join("fbm_h05_kernel/gram.json").is_file());
}

#[test]
fn shipped_subfbm_lattice_config_passes() {
    let dir = scratch("subfbm");
    let cfg = configs().join("thm2_9_subfbm.toml");
    let out = fbmlab(&["run", cfg.to_str().unwrap(), "--replicates", "20000", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}\n{}", String::from_utf8_lossy(&out.stdout), stderr(&out));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("thm2_9_subfbm/report.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert_eq!(report["replicates"], 20000);
    let csv = std::fs::read_to_string(dir.join("thm2_9_subfbm/samples_odd_pair.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("replicate,t,value"));
    assert_eq!(csv.lines().count(), 1 + 20000 * 4);
}

const LATTICE_ALPHA_15: &str = r#"
name = "bad"
statement = "none"
description = "rescaled lattice outside its range"
seed = 1
replicates = 100
grid = [1.0, 2.0]

[model]
kind = "rescaled_lattice"
alpha = 1.5
scale_t = 10.0
count = 1
placement = { kind = "left_endpoint" }
window = { kind = "auto", rel_tol = 1e-3 }
families = ["odd_pair"]

[oracle]
odd_pair = { kind = "sub_fbm", h = 0.25 }

[check]
kind = "covariance"
threshold = 4.0
fit_constant = true
finite_size = "fold_bias"

[output]
dir = "out"
format = "csv"
"#;

#[test]
fn rescaled_lattice_above_one_is_a_validation_error() {
    let dir = scratch("alpha");
    let p = write_config(&dir, LATTICE_ALPHA_15);
    for sub in ["run", "validate"] {
        let out = fbmlab(&[sub, p.to_str().unwrap()]);
        assert_eq!(code(&out), 2);
        assert!(stderr(&out).contains("alpha < 1"), "{}", stderr(&out));
    }
}

#[test]
fn unknown_keys_and_missing_fields_are_rejected() {
    let dir = scratch("keys");
    let typo = LATTICE_ALPHA_15.replace("seed = 1", "seed = 1\nsede = 2");
    assert_eq!(code(&fbmlab(&["validate", write_config(&dir, &typo).to_str().unwrap()])), 2);
    let missing = LATTICE_ALPHA_15.replace("seed = 1\n", "");
    assert_eq!(code(&fbmlab(&["validate", write_config(&dir, &missing).to_str().unwrap()])), 2);
    assert_eq!(code(&fbmlab(&["validate", dir.join("absent.toml").to_str().unwrap()])), 2);
}

#[test]
fn oversized_branching_system_is_a_budget_error() {
    let dir = scratch("budget");
    let body = r#"
name = "big"
statement = "none"
description = "too many ancestors"
seed = 1
replicates = 10
grid = [1.0]

[model]
kind = "occupation_branching"
alpha = 1.0
intensity = 100.0
rate_v = 2.0
horizon = 2.0
dt = 0.05
radius = 1000.0
max_ancestors = 1000.0
families = ["odd_pair"]

[oracle]
odd_pair = { kind = "ns_fbm", h = 1.5 }

[check]
kind = "covariance"
threshold = 4.0
fit_constant = true
finite_size = "exact"

[output]
dir = "out"
format = "csv"
"#;
    let out = fbmlab(&["run", write_config(&dir, body).to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn failed_check_exits_with_one() {
    let dir = scratch("fail");
    let body = format!(
        r#"
name = "mismatch"
statement = "none"
description = "fBm is not sub-fBm"
seed = 0
replicates = 0
grid = [0.5, 1.0, 2.0]

[model]
kind = "kernel_only"
spec = {{ kind = "fbm", h = 0.3 }}

[oracle]

[check]
kind = "kernel_match"
reference = {{ kind = "sub_fbm", h = 0.3 }}
rel_tol = 1e-5

[output]
dir = "{}"
format = "csv"
"#,
        dir.join("out").display()
    );
    let out = fbmlab(&["run", write_config(&dir, &body).to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn outputs_do_not_depend_on_thread_count_or_format_choice_of_run() {
    let cfg = configs().join("prop2_7b_null.toml");
    let mut trees = Vec::new();
    for threads in ["1", "3"] {
        let dir = scratch(&format!("threads{threads}"));
        let out = fbmlab(&[
            "run",
            cfg.to_str().unwrap(),
            "--replicates",
            "3000",
            "--seed",
            "9",
            "--threads",
            threads,
            "--format",
            "json",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert!(code(&out) <= 1, "{}", stderr(&out));
        trees.push(tree(&dir));
    }
    assert!(!trees[0].is_empty());
    assert_eq!(trees[0], trees[1]);
    assert!(trees[0].iter().any(|(p, _)| p.ends_with("samples_indicator_right.json")));
}

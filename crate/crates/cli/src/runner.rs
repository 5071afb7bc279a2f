//! Executes an experiment and writes its artifacts.
//!
//! Execution and writing are separate so that callers can inspect an
//! [`Outcome`] without touching the file system.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fbmlab::estimation::{
    cholesky_batch, compare_to_matrix, estimate_batch, fit_constant, increment_sign_test, ComparisonReport, SignVerdict,
};
use fbmlab::kernels::{gram_json, gram_matrix, normalize, psd_check, write_kernel_csv, KernelSpec};
use fbmlab::oracles::{
    branching_occupation_cov_grid, branching_window_budget, occupation_cov_grid, occupation_dt_budget,
};
use fbmlab::particles::{
    branching_occupation_batch, occupation_batches, BranchingOccupationModel, CellExperiment, FluctuationBatch,
    OccupationModel, RunSpec,
};
use fbmlab::stable::StableLaw;
use fbmlab::step::TestFamily;
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::config::{CheckConfig, ExpectedSign, ExperimentConfig, FiniteSize, Format, ModelConfig};
use crate::CliError;

/// Command-line values that replace fields of a loaded experiment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub format: Option<Format>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig, CliError> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.replicates {
            cfg.replicates = r;
        }
        if let Some(d) = &self.out_dir {
            cfg.output.dir = d.clone();
        }
        if let Some(f) = self.format {
            cfg.output.format = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub statement: String,
    pub pass: bool,
    pub batches: Vec<FluctuationBatch>,
    pub comparisons: Vec<FamilyComparison>,
    /// Gram matrix for kernel-only experiments.
    pub kernel: Option<DMatrix<f64>>,
    pub report: Value,
    pub summary: String,
}

/// Comparison of one family's estimate against its oracle kernel, plus the
/// comparison against the exact finite-system covariance when one exists.
#[derive(Debug, Clone)]
pub struct FamilyComparison {
    pub family: String,
    pub oracle: KernelSpec,
    pub limit: ComparisonReport,
    pub finite: Option<ComparisonReport>,
    pub pass: bool,
}

/// Simulated batches with per-family finite-system covariances and
/// systematic allowances.
struct Simulated {
    batches: Vec<FluctuationBatch>,
    finite: Vec<Option<DMatrix<f64>>>,
    allowance: Vec<DMatrix<f64>>,
    notes: Value,
}

fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, k| rows[i][k])
}

fn pair_matrix<F>(family: &TestFamily, grid: &[f64], f: F) -> Result<DMatrix<f64>, CliError>
where
    F: Fn(&fbmlab::step::StepFunction, &fbmlab::step::StepFunction) -> fbmlab::Result<f64>,
{
    let fns = grid.iter().map(|t| family.at(*t)).collect::<fbmlab::Result<Vec<_>>>()?;
    let d = grid.len();
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for k in i..d {
            let v = f(&fns[i], &fns[k])?;
            m[(i, k)] = v;
            m[(k, i)] = v;
        }
    }
    Ok(m)
}

fn simulate(cfg: &ExperimentConfig) -> Result<Simulated, CliError> {
    let run = RunSpec { replicates: cfg.replicates, seed: cfg.seed };
    let families = cfg.model.families()?;
    let grid = &cfg.grid;
    let d = grid.len();
    match &cfg.model {
        ModelConfig::Density { .. } | ModelConfig::RescaledLattice { .. } => {
            let exp = match &cfg.model {
                ModelConfig::Density { alpha, scale_t, theta, placement, window, .. } => {
                    CellExperiment::density(theta.clone(), placement.clone(), *scale_t, *alpha, *window)
                }
                ModelConfig::RescaledLattice { alpha, scale_t, count, placement, window, .. } => {
                    CellExperiment::rescaled_lattice(*count, placement.clone(), *scale_t, *alpha, *window)?
                }
                _ => unreachable!(),
            };
            let out = exp.run(&families, grid, run)?;
            let n = out.batches.len();
            Ok(Simulated {
                batches: out.batches,
                finite: out.exact.iter().map(|m| Some(matrix(m))).collect(),
                allowance: vec![DMatrix::from_element(d, d, out.truncation_budget); n],
                notes: json!({
                    "truncation_budget": out.truncation_budget,
                    "window_radius": out.window_radius,
                    "normalization": exp.normalization,
                }),
            })
        }
        ModelConfig::Occupation { alpha, intensity, horizon, dt, .. } => {
            let model = OccupationModel { intensity: *intensity, alpha: *alpha, horizon: *horizon, dt: *dt };
            let batches = occupation_batches(&model, &families, grid, run)?;
            let mut finite = Vec::new();
            let mut allowance = Vec::new();
            for fam in &families {
                finite.push(Some(pair_matrix(fam, grid, |f, g| {
                    occupation_cov_grid(*intensity, *alpha, *horizon, *dt, f, g)
                })?));
                allowance.push(pair_matrix(fam, grid, |f, g| {
                    occupation_dt_budget(*intensity, *alpha, *horizon, *dt, f, g)
                })?);
            }
            Ok(Simulated { batches, finite, allowance, notes: json!({ "steps": model.steps()? }) })
        }
        ModelConfig::OccupationBranching { alpha, intensity, rate_v, horizon, dt, radius, max_ancestors, .. } => {
            let model = BranchingOccupationModel {
                intensity: *intensity,
                rate_v: *rate_v,
                alpha: *alpha,
                horizon: *horizon,
                dt: *dt,
                radius: *radius,
                max_ancestors: *max_ancestors,
            };
            let law = StableLaw::new(*alpha)?;
            let t_max = grid[d - 1];
            let mut batches = Vec::new();
            let mut finite = Vec::new();
            let mut allowance = Vec::new();
            let mut budgets = Vec::new();
            for fam in &families {
                batches.push(branching_occupation_batch(&model, fam, grid, run)?);
                finite.push(Some(pair_matrix(fam, grid, |f, g| {
                    branching_occupation_cov_grid(*rate_v, *alpha, *horizon, *dt, f, g)
                })?));
                let widest = fam.at(t_max)?;
                let level = widest.levels().iter().fold(0.0f64, |m, l| m.max(l.abs()));
                let b = branching_window_budget(&law, *rate_v, *horizon, *dt, widest.support(), level, *radius)?;
                budgets.push(b);
                allowance.push(DMatrix::from_element(d, d, b));
            }
            Ok(Simulated { batches, finite, allowance, notes: json!({ "window_budget": budgets }) })
        }
        ModelConfig::ReferenceGaussian { spec } => {
            let batch = cholesky_batch(spec, grid, run)?;
            Ok(Simulated {
                batches: vec![batch],
                finite: vec![None],
                allowance: vec![DMatrix::zeros(d, d)],
                notes: Value::Null,
            })
        }
        ModelConfig::KernelOnly { .. } => unreachable!("kernel-only experiments are not simulated"),
    }
}

fn compare_family(
    batch: &FluctuationBatch,
    spec: &KernelSpec,
    finite: Option<&DMatrix<f64>>,
    allowance: &DMatrix<f64>,
    threshold: f64,
    fit: bool,
    finite_size: FiniteSize,
) -> Result<FamilyComparison, CliError> {
    let est = estimate_batch(batch)?;
    let kernel = gram_matrix(spec, &batch.grid)?;
    let label = format!("{} vs {}", batch.meta.family, spec.label());
    let exact_report = |m: &DMatrix<f64>| {
        compare_to_matrix(&est, m, Some(allowance), false, threshold, &format!("{} vs exact finite system", batch.meta.family))
    };
    let (limit, finite_report) = match (finite_size, finite) {
        (FiniteSize::None, f) => {
            let r = compare_to_matrix(&est, &kernel, Some(allowance), fit, threshold, &label)?;
            (r, f.map(exact_report).transpose()?)
        }
        (FiniteSize::Exact, Some(f)) => {
            let r = exact_report(f)?;
            let diag = compare_to_matrix(&est, &kernel, Some(allowance), fit, threshold, &format!("{label} (diagnostic)"))?;
            (diag, Some(r))
        }
        (FiniteSize::FoldBias, Some(f)) => {
            let c = if fit { fit_constant(&est.cov, &est.se, &kernel)? } else { 1.0 };
            let bias = DMatrix::from_fn(f.nrows(), f.ncols(), |i, k| {
                (f[(i, k)] - c * kernel[(i, k)]).abs() + allowance[(i, k)]
            });
            let r = compare_to_matrix(&est, &kernel, Some(&bias), fit, threshold, &label)?;
            (r, Some(exact_report(f)?))
        }
        (_, None) => {
            return Err(CliError::Validation("this model has no exact finite-system covariance".into()));
        }
    };
    let pass = match finite_size {
        FiniteSize::None => limit.pass,
        FiniteSize::Exact => finite_report.as_ref().is_some_and(|r| r.pass),
        FiniteSize::FoldBias => limit.pass && finite_report.as_ref().is_some_and(|r| r.pass),
    };
    Ok(FamilyComparison { family: batch.meta.family.clone(), oracle: spec.clone(), limit, finite: finite_report, pass })
}

fn expected_verdict(e: ExpectedSign) -> SignVerdict {
    match e {
        ExpectedSign::Negative => SignVerdict::Negative,
        ExpectedSign::Null => SignVerdict::Null,
        ExpectedSign::Positive => SignVerdict::Positive,
    }
}

fn verdict_line(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Runs the experiment in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let head = json!({
        "name": cfg.name,
        "statement": cfg.statement,
        "description": cfg.description,
        "model": cfg.model,
        "seed": cfg.seed,
        "replicates": cfg.replicates,
        "grid": cfg.grid,
        "check": cfg.check,
    });
    if let ModelConfig::KernelOnly { spec } = &cfg.model {
        return execute_kernel(cfg, spec, head);
    }
    let sim = simulate(cfg)?;
    let mut summary = format!("{} [{}]\n", cfg.name, cfg.statement);
    let mut comparisons = Vec::new();
    let (pass, detail) = match &cfg.check {
        CheckConfig::Covariance { threshold, fit_constant, finite_size } => {
            for (i, batch) in sim.batches.iter().enumerate() {
                let spec = match &cfg.model {
                    ModelConfig::ReferenceGaussian { spec } => spec.clone(),
                    _ => cfg.oracle[&batch.meta.family].clone(),
                };
                let c = compare_family(
                    batch,
                    &spec,
                    sim.finite[i].as_ref(),
                    &sim.allowance[i],
                    *threshold,
                    *fit_constant,
                    *finite_size,
                )?;
                summary.push_str(&c.limit.table());
                if let Some(f) = &c.finite {
                    summary.push_str(&f.table());
                }
                comparisons.push(c);
            }
            let pass = comparisons.iter().all(|c| c.pass);
            let detail: Vec<Value> = comparisons
                .iter()
                .map(|c| {
                    json!({
                        "family": c.family,
                        "oracle": c.oracle,
                        "limit": c.limit.to_json(),
                        "finite": c.finite.as_ref().map(ComparisonReport::to_json),
                        "pass": c.pass,
                    })
                })
                .collect();
            (pass, json!({ "families": detail }))
        }
        CheckConfig::IncrementSign { family, quadruple, expect } => {
            let batch = sim
                .batches
                .iter()
                .find(|b| &b.meta.family == family)
                .ok_or_else(|| CliError::Validation(format!("family '{family}' was not simulated")))?;
            let test = increment_sign_test(batch, *quadruple)?;
            let pass = test.verdict == expected_verdict(*expect);
            summary.push_str(&format!(
                "increment covariance {:?}: {:.6} (se {:.2e}) -> {:?}, expected {:?}\n",
                quadruple, test.estimate, test.se, test.verdict, expect
            ));
            (pass, json!({ "sign_test": test, "expected": expect }))
        }
        CheckConfig::KernelMatch { .. } | CheckConfig::Psd => unreachable!("validated for kernel_only"),
    };
    summary.push_str(&format!("{}: {}\n", cfg.name, verdict_line(pass)));
    let mut report = head;
    report["result"] = detail;
    report["systematics"] = sim.notes;
    report["pass"] = json!(pass);
    Ok(Outcome {
        name: cfg.name.clone(),
        statement: cfg.statement.clone(),
        pass,
        batches: sim.batches,
        comparisons,
        kernel: None,
        report,
        summary,
    })
}

fn execute_kernel(cfg: &ExperimentConfig, spec: &KernelSpec, mut report: Value) -> Result<Outcome, CliError> {
    let gram = gram_matrix(spec, &cfg.grid)?;
    let (pass, detail, line) = match &cfg.check {
        CheckConfig::Psd => {
            let (min_eig, ok) = psd_check(&gram)?;
            (ok, json!({ "min_eigenvalue": min_eig }), format!("smallest eigenvalue {min_eig:.3e}"))
        }
        CheckConfig::KernelMatch { reference, rel_tol } => {
            let a = normalize(&gram)?;
            let b = normalize(&gram_matrix(reference, &cfg.grid)?)?;
            let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let err = (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs())) / scale;
            (
                err <= *rel_tol,
                json!({ "reference": reference, "max_rel_diff": err }),
                format!("max relative difference to {} is {err:.3e} (tolerance {rel_tol:e})", reference.label()),
            )
        }
        CheckConfig::Covariance { .. } | CheckConfig::IncrementSign { .. } => {
            unreachable!("validated for simulated models")
        }
    };
    let summary = format!(
        "{} [{}]\n{}: {line}\n{}: {}\n",
        cfg.name,
        cfg.statement,
        spec.label(),
        cfg.name,
        verdict_line(pass)
    );
    report["result"] = detail;
    report["pass"] = json!(pass);
    Ok(Outcome {
        name: cfg.name.clone(),
        statement: cfg.statement.clone(),
        pass,
        batches: Vec::new(),
        comparisons: Vec::new(),
        kernel: Some(gram),
        report,
        summary,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Writes the artifacts of `outcome` under `<output.dir>/<name>/` and
/// returns the written paths in a fixed order.
pub fn write_outputs(cfg: &ExperimentConfig, outcome: &Outcome) -> Result<Vec<PathBuf>, CliError> {
    let dir = cfg.output.dir.join(&cfg.name);
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for batch in &outcome.batches {
        let stem = format!("samples_{}", batch.meta.family);
        let path = match cfg.output.format {
            Format::Csv => {
                let p = dir.join(format!("{stem}.csv"));
                let mut w = create(&p)?;
                batch.write_csv(&mut w)?;
                w.flush()?;
                p
            }
            Format::Json => {
                let p = dir.join(format!("{stem}.json"));
                write_json(&p, &serde_json::to_value(batch)?)?;
                p
            }
        };
        files.push(path);
        let side = dir.join(format!("{stem}.meta.json"));
        write_json(&side, &batch.sidecar())?;
        files.push(side);
    }
    if let Some(gram) = &outcome.kernel {
        let p = dir.join("kernel.csv");
        let mut w = create(&p)?;
        write_kernel_csv(&mut w, &cfg.grid, gram)?;
        w.flush()?;
        files.push(p);
        let g = dir.join("gram.json");
        write_json(&g, &gram_json(&cfg.grid, gram))?;
        files.push(g);
    }
    let r = dir.join("report.json");
    write_json(&r, &outcome.report)?;
    files.push(r);
    Ok(files)
}

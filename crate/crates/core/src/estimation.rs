//! Covariance estimates with standard errors, comparisons against kernels,
//! and the statistical checks built on them.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram_matrix, KernelSpec};
use crate::par;
use crate::particles::{FluctuationBatch, FluctuationSample, RunSpec, SampleMeta};
use crate::rng::replicate_rng;

/// Sample covariance matrix of a batch with delta-method standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MCCovResult {
    pub grid: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub n: usize,
}

/// Unbiased covariance of `rows` (one row per replicate). The standard error
/// of entry `(i, k)` is `√((m₄ − c²)/n)` with `m₄` the empirical mean of
/// `(x_i − x̄_i)²(x_k − x̄_k)²`.
pub fn estimate_rows(rows: &[Vec<f64>], grid: &[f64]) -> Result<MCCovResult> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Input(format!("need at least two replicates, got {n}")));
    }
    let d = grid.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape(format!("every replicate must have {d} values")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("replicate values must be finite".into()));
    }
    let nf = n as f64;
    let mean: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / nf).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut m4 = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            for k in i..d {
                let p = c[i] * c[k];
                cov[(i, k)] += p;
                m4[(i, k)] += p * p;
            }
        }
    }
    let mut se = DMatrix::zeros(d, d);
    for i in 0..d {
        for k in i..d {
            let biased = cov[(i, k)] / nf;
            let var = (m4[(i, k)] / nf - biased * biased).max(0.0);
            let c = cov[(i, k)] / (nf - 1.0);
            cov[(i, k)] = c;
            cov[(k, i)] = c;
            se[(i, k)] = (var / nf).sqrt();
            se[(k, i)] = se[(i, k)];
        }
    }
    Ok(MCCovResult { grid: grid.to_vec(), cov, se, n })
}

/// [`estimate_rows`] over single samples, which must share their metadata.
pub fn estimate_cov(samples: &[FluctuationSample], grid: &[f64]) -> Result<MCCovResult> {
    let Some(first) = samples.first() else {
        return Err(Error::Input("no samples".into()));
    };
    if samples.iter().any(|s| s.meta != first.meta) {
        return Err(Error::Input("samples come from different experiments".into()));
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.values.clone()).collect();
    estimate_rows(&rows, grid)
}

pub fn estimate_batch(batch: &FluctuationBatch) -> Result<MCCovResult> {
    estimate_rows(&batch.values, &batch.grid)
}

/// Element-wise comparison of an estimate against an oracle matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub label: String,
    pub grid: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub oracle: DMatrix<f64>,
    /// Systematic error allowance added in quadrature to `se`.
    pub bias: DMatrix<f64>,
    pub z_scores: DMatrix<f64>,
    pub fitted_const: f64,
    pub max_abs_z: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Default acceptance threshold on `max |z|`.
pub const Z_THRESHOLD: f64 = 4.0;

/// Compares against `gram_matrix(spec, grid)`, optionally fitting one
/// multiplicative constant.
pub fn compare_to_kernel(result: &MCCovResult, spec: &KernelSpec, fit_constant: bool) -> Result<ComparisonReport> {
    let oracle = gram_matrix(spec, &result.grid)?;
    compare_to_matrix(result, &oracle, None, fit_constant, Z_THRESHOLD, &spec.label())
}

/// Weighted least-squares constant `c` minimizing `Σ w (e − c o)²` with
/// `w = 1/se²` (unit weights when an entry has zero error).
pub fn fit_constant(cov: &DMatrix<f64>, se: &DMatrix<f64>, oracle: &DMatrix<f64>) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for ((e, s), o) in cov.iter().zip(se.iter()).zip(oracle.iter()) {
        let w = if *s > 0.0 { 1.0 / (s * s) } else { 1.0 };
        num += w * e * o;
        den += w * o * o;
    }
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::Fit("oracle is identically zero".into()));
    }
    Ok(num / den)
}

/// General comparison. With `bias`, each z-score uses
/// `√(se² + bias²)` as its scale.
pub fn compare_to_matrix(
    result: &MCCovResult,
    oracle: &DMatrix<f64>,
    bias: Option<&DMatrix<f64>>,
    fit: bool,
    threshold: f64,
    label: &str,
) -> Result<ComparisonReport> {
    let d = result.grid.len();
    if oracle.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "oracle is {}x{}, estimate is {d}x{d}",
            oracle.nrows(),
            oracle.ncols()
        )));
    }
    let bias = bias.cloned().unwrap_or_else(|| DMatrix::zeros(d, d));
    if bias.shape() != (d, d) {
        return Err(Error::Shape("bias matrix does not match the grid".into()));
    }
    let c = if fit { fit_constant(&result.cov, &result.se, oracle)? } else { 1.0 };
    let z_scores = DMatrix::from_fn(d, d, |i, k| {
        let diff = result.cov[(i, k)] - c * oracle[(i, k)];
        let scale = result.se[(i, k)].hypot(bias[(i, k)]);
        if scale > 0.0 {
            diff / scale
        } else if diff.abs() <= 1e-12 * oracle[(i, k)].abs().max(1e-300) {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    });
    let max_abs_z = z_scores.iter().fold(0.0f64, |m, z| m.max(z.abs()));
    Ok(ComparisonReport {
        label: label.to_string(),
        grid: result.grid.clone(),
        cov: result.cov.clone(),
        se: result.se.clone(),
        oracle: oracle.clone(),
        bias,
        z_scores,
        fitted_const: c,
        max_abs_z,
        threshold,
        pass: max_abs_z <= threshold,
    })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ComparisonReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "label": self.label,
            "grid": self.grid,
            "cov": rows(&self.cov),
            "se": rows(&self.se),
            "oracle": rows(&self.oracle),
            "bias": rows(&self.bias),
            "z": rows(&self.z_scores),
            "fitted_const": self.fitted_const,
            "max_abs_z": self.max_abs_z,
            "threshold": self.threshold,
            "pass": self.pass,
        })
    }

    /// Plain-text table of the upper triangle.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}  (fitted constant {:.6})", self.label, self.fitted_const);
        let _ = writeln!(out, "{:>8} {:>8} {:>12} {:>12} {:>10} {:>8}", "s", "t", "empirical", "oracle", "se", "z");
        let d = self.grid.len();
        for i in 0..d {
            for k in i..d {
                let _ = writeln!(
                    out,
                    "{:>8.4} {:>8.4} {:>12.6} {:>12.6} {:>10.2e} {:>8.2}",
                    self.grid[i],
                    self.grid[k],
                    self.cov[(i, k)],
                    self.fitted_const * self.oracle[(i, k)],
                    self.se[(i, k)],
                    self.z_scores[(i, k)]
                );
            }
        }
        let _ = writeln!(
            out,
            "max |z| = {:.3} (threshold {}): {}",
            self.max_abs_z,
            self.threshold,
            if self.pass { "PASS" } else { "FAIL" }
        );
        out
    }
}

/// Sign of an increment covariance at three standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignVerdict {
    Negative,
    Null,
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub estimate: f64,
    pub se: f64,
    pub verdict: SignVerdict,
}

/// Covariance of `(X_t − X_s, X_v − X_u)` for grid times `s < t ≤ u < v`.
pub fn increment_sign_test(batch: &FluctuationBatch, quadruple: [f64; 4]) -> Result<SignTest> {
    let [s, t, u, v] = quadruple;
    if !(s < t && t <= u && u < v) {
        return Err(Error::Input(format!("need s < t <= u < v, got {quadruple:?}")));
    }
    let idx = |x: f64| {
        batch
            .grid
            .iter()
            .position(|g| (g - x).abs() <= 1e-12 * x.abs().max(1.0))
            .ok_or_else(|| Error::Input(format!("time {x} is not on the grid")))
    };
    let (is, it, iu, iv) = (idx(s)?, idx(t)?, idx(u)?, idx(v)?);
    let pairs: Vec<Vec<f64>> = batch
        .values
        .iter()
        .map(|r| vec![r[it] - r[is], r[iv] - r[iu]])
        .collect();
    let est = estimate_rows(&pairs, &[0.0, 1.0])?;
    let (estimate, se) = (est.cov[(0, 1)], est.se[(0, 1)]);
    let verdict = if estimate < -3.0 * se {
        SignVerdict::Negative
    } else if estimate > 3.0 * se {
        SignVerdict::Positive
    } else {
        SignVerdict::Null
    };
    Ok(SignTest { estimate, se, verdict })
}

/// Log-log regression of an analytic increment covariance against the lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrdFit {
    pub slope: f64,
    pub intercept: f64,
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    /// Set when some covariance is zero or changes sign over the range.
    pub degenerate: bool,
}

/// Slope of `log |Cov(X_t − X_s, X_{v+τ} − X_{u+τ})|` against `log τ` for
/// `τ` geometric over `tau_range` (`points` values).
pub fn lrd_slope(spec: &KernelSpec, times: [f64; 4], tau_range: (f64, f64), points: usize) -> Result<LrdFit> {
    let [s, t, u, v] = times;
    let (lo, hi) = tau_range;
    if !(s < t && t <= u && u < v) || !(lo > 0.0 && hi > lo) || points < 2 {
        return Err(Error::Input("need s < t <= u < v, 0 < tau_lo < tau_hi, and two or more lags".into()));
    }
    spec.validate()?;
    let taus: Vec<f64> = (0..points)
        .map(|i| lo * (hi / lo).powf(i as f64 / (points - 1) as f64))
        .collect();
    let values = taus
        .iter()
        .map(|tau| spec.increment_cov(s, t, u + tau, v + tau))
        .collect::<Result<Vec<f64>>>()?;
    let sign = values[0].signum();
    let degenerate = values.iter().any(|v| *v == 0.0 || v.signum() != sign || !v.is_finite());
    if degenerate {
        return Ok(LrdFit { slope: f64::NAN, intercept: f64::NAN, taus, values, degenerate });
    }
    let xs: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.abs().ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(LrdFit { slope, intercept: my - slope * mx, taus, values, degenerate })
}

/// Lower factor `L` with `L Lᵀ = m + εI`, where the jitter `ε` is zero if
/// possible and never above `1e−12 · trace`.
pub fn jittered_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c.l());
    }
    let trace = m.trace();
    let mut eps = 1e-16 * trace;
    while eps <= 1e-12 * trace * (1.0 + 1e-9) {
        let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * eps;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c.l());
        }
        eps *= 10.0;
    }
    Err(Error::Factorization(format!(
        "matrix is not positive semidefinite within a jitter of {:e}",
        1e-12 * trace
    )))
}

fn gaussian_row<R: Rng + ?Sized>(l: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let d = l.nrows();
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    (0..d).map(|i| (0..=i).map(|k| l[(i, k)] * z[k]).sum()).collect()
}

/// `n` centered Gaussian vectors with covariance `gram_matrix(spec, grid)`.
pub fn cholesky_sample<R: Rng + ?Sized>(spec: &KernelSpec, grid: &[f64], n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let l = jittered_cholesky(&gram_matrix(spec, grid)?)?;
    Ok((0..n).map(|_| gaussian_row(&l, rng)).collect())
}

/// Parallel reference sampler; replicate `r` uses its own stream.
pub fn cholesky_batch(spec: &KernelSpec, grid: &[f64], run: RunSpec) -> Result<FluctuationBatch> {
    let l = jittered_cholesky(&gram_matrix(spec, grid)?)?;
    let values = par::map_indexed(run.replicates, |r| gaussian_row(&l, &mut replicate_rng(run.seed, r as u64)));
    Ok(FluctuationBatch {
        meta: SampleMeta {
            model: "reference_gaussian".into(),
            scale_t: 0.0,
            alpha: f64::NAN,
            theta: None,
            family: spec.label(),
            seed: run.seed,
            normalization: 1.0,
            truncation_budget: 0.0,
            window_radius: None,
        },
        grid: grid.to_vec(),
        values,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn two_sample_ks(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 100 || b.len() < 100 {
        return Err(Error::Input(format!(
            "each sample needs at least 100 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Input("samples contain NaN".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    Ok((d, kolmogorov_q((en + 0.12 + 0.11 / en) * d)))
}

/// `Q(λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 * sum.abs() {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

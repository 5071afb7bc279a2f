//! Limit covariance kernels: closed forms for the fBm family and spectral
//! quadratures for the particle-system limits, plus Gram matrices and a
//! positive-semidefiniteness check.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{param, Error, Result};
use crate::par;
use crate::quad::{cosine_integral, CosineCombo, CosineOptions, Shape};
use crate::stable::{heat_pair, StableLaw, StableParams};
use crate::step::{spectral_combo, StepFunction, TestFamily};

/// Hurst index.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HurstParam(f64);

impl HurstParam {
    /// `H ∈ (0, 1)`: fBm and its odd part.
    pub fn fbm(h: f64) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(param(format!("Hurst index must lie in (0, 1), got {h}")));
        }
        Ok(Self(h))
    }

    /// `H ∈ (0, 1) ∪ (1, 2)`: sub-fBm and its negative counterpart.
    pub fn sub(h: f64) -> Result<Self> {
        if !(h > 0.0 && h < 2.0) || h == 1.0 {
            return Err(param(format!(
                "sub-fractional Hurst index must lie in (0, 1) or (1, 2), got {h}"
            )));
        }
        Ok(Self(h))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Law of the number of particles per unit cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaLaw {
    Deterministic { count: u32 },
    Poisson { mean: f64 },
    /// `probs[k] = P(θ = k)`.
    Custom { probs: Vec<f64> },
}

impl ThetaLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Deterministic { .. } => Ok(()),
            Self::Poisson { mean } => {
                if *mean > 0.0 && mean.is_finite() {
                    Ok(())
                } else {
                    Err(param(format!("Poisson mean must be positive, got {mean}")))
                }
            }
            Self::Custom { probs } => {
                if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
                    return Err(param("custom count law needs nonnegative probabilities"));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(param(format!("custom count law sums to {s}, not 1")));
                }
                Ok(())
            }
        }
    }

    fn moment(&self, k: i32) -> f64 {
        match self {
            Self::Deterministic { count } => (*count as f64).powi(k),
            Self::Poisson { mean: m } => match k {
                1 => *m,
                2 => m + m * m,
                _ => m + 3.0 * m * m + m * m * m,
            },
            Self::Custom { probs } => probs
                .iter()
                .enumerate()
                .map(|(i, p)| p * (i as f64).powi(k))
                .sum(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        match self {
            Self::Poisson { mean } => *mean,
            _ => {
                let m = self.mean();
                (self.moment(2) - m * m).max(0.0)
            }
        }
    }

    /// `E θ³`.
    pub fn third_moment(&self) -> f64 {
        self.moment(3)
    }

    /// `P(θ = k)`.
    pub fn pmf(&self, k: u32) -> f64 {
        match self {
            Self::Deterministic { count } => f64::from(u8::from(*count == k)),
            Self::Poisson { mean } => {
                let lk = k as f64 * mean.ln() - mean - statrs::function::gamma::ln_gamma(k as f64 + 1.0);
                lk.exp()
            }
            Self::Custom { probs } => probs.get(k as usize).copied().unwrap_or(0.0),
        }
    }

    /// Smallest `K` with `P(θ > K) < eps`.
    pub fn support_bound(&self, eps: f64) -> u32 {
        match self {
            Self::Deterministic { count } => *count,
            Self::Custom { probs } => probs.len().saturating_sub(1) as u32,
            Self::Poisson { .. } => {
                let mut cdf = 0.0;
                let mut k = 0;
                loop {
                    cdf += self.pmf(k);
                    if 1.0 - cdf < eps || k > 100_000 {
                        return k;
                    }
                    k += 1;
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            Self::Deterministic { count } => *count,
            Self::Poisson { mean } => {
                let d = Poisson::new(*mean).expect("validated mean");
                d.sample(rng) as u32
            }
            Self::Custom { probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k as u32;
                    }
                }
                (probs.len() - 1) as u32
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Deterministic { count } => format!("deterministic({count})"),
            Self::Poisson { mean } => format!("poisson({mean})"),
            Self::Custom { probs } => format!("custom({probs:?})"),
        }
    }
}

/// A named covariance kernel on the half line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Fbm { h: f64 },
    SubFbm { h: f64 },
    NsFbm { h: f64 },
    OddPart { h: f64 },
    /// `∫(1 − cos sx)(1 − cos tx)|x|^{-3} dx`.
    SpecialH1,
    /// Covariance of the density field at time one paired with `ψ_s, ψ_t`.
    DensityRho { theta: ThetaLaw, alpha: StableParams, family: TestFamily },
    /// `(Eθ/π)∫ψ̂_s conj(ψ̂_t)|x|^α dx`.
    ZLimit { theta_mean: f64, alpha: StableParams, family: TestFamily },
    /// `(1/π)∫ψ̂_s conj(ψ̂_t)|x|^{−α} dx`.
    OccLimit { alpha: StableParams, family: TestFamily },
    /// `prefactor · ∫(1 − cos sx)(1 − cos tx)|x|^{−gamma} dx`.
    NsfK { gamma: f64, prefactor: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fbm { h } | Self::OddPart { h } => HurstParam::fbm(*h).map(|_| ()),
            Self::SubFbm { h } => {
                if *h >= 1.0 {
                    return Err(param(format!("sub-fBm needs H in (0, 1), got {h}")));
                }
                HurstParam::sub(*h).map(|_| ())
            }
            Self::NsFbm { h } => {
                if !(*h > 1.0 && *h < 2.0) {
                    return Err(param(format!("negative sub-fBm needs H in (1, 2), got {h}")));
                }
                Ok(())
            }
            Self::SpecialH1 => Ok(()),
            Self::DensityRho { theta, .. } => theta.validate(),
            Self::ZLimit { alpha, family, theta_mean } => {
                if !(*theta_mean > 0.0) {
                    return Err(param("mean particle count must be positive"));
                }
                if alpha.alpha() >= 1.0 && !matches!(family, TestFamily::Custom(_)) {
                    return Err(Error::Integrability(format!(
                        "the rescaled-lattice limit needs alpha < 1, got {}",
                        alpha.alpha()
                    )));
                }
                Ok(())
            }
            Self::OccLimit { alpha, family } => {
                let a = alpha.alpha();
                let ok = match family {
                    TestFamily::OddPair => a < 3.0,
                    TestFamily::Custom(_) => true,
                    _ => a < 1.0,
                };
                if ok {
                    Ok(())
                } else {
                    Err(Error::Integrability(format!(
                        "occupation limit diverges for alpha = {a} with the {} family",
                        family.name()
                    )))
                }
            }
            Self::NsfK { gamma, .. } => check_gamma(*gamma),
        }
    }

    /// The Hurst index of the limit process when the kernel is (a multiple
    /// of) one of the closed-form kernels.
    pub fn hurst(&self) -> Option<f64> {
        match self {
            Self::Fbm { h } | Self::SubFbm { h } | Self::NsFbm { h } | Self::OddPart { h } => Some(*h),
            Self::SpecialH1 => Some(1.0),
            Self::ZLimit { alpha, .. } => Some((1.0 - alpha.alpha()) / 2.0),
            Self::OccLimit { alpha, .. } => Some((1.0 + alpha.alpha()) / 2.0),
            Self::NsfK { gamma, .. } => Some((gamma - 1.0) / 2.0),
            Self::DensityRho { .. } => None,
        }
    }

    /// `Cov(X_t − X_s, X_v − X_u)`. Field kernels are evaluated on the
    /// increment functions directly, which avoids cancellation at large lags.
    pub fn increment_cov(&self, s: f64, t: f64, u: f64, v: f64) -> Result<f64> {
        let inc = |family: &TestFamily, a: f64, b: f64| -> Result<StepFunction> {
            let at = |x: f64| if x == 0.0 { Ok(StepFunction::zero()) } else { family.at(x) };
            Ok(at(b)?.sub(&at(a)?))
        };
        match self {
            Self::DensityRho { theta, alpha, family } => {
                theta.validate()?;
                let (f, g) = (inc(family, s, t)?, inc(family, u, v)?);
                let excess = theta.variance() - theta.mean();
                let far = if excess == 0.0 { 0.0 } else { StableLaw::new(*alpha)?.pair_direct(2.0, &f, &g)? };
                Ok(theta.mean() * f.l2_inner(&g) + excess * far)
            }
            Self::ZLimit { theta_mean, alpha, family } => {
                z_limit_cov(*theta_mean, *alpha, &inc(family, s, t)?, &inc(family, u, v)?)
            }
            Self::OccLimit { alpha, family } => occ_limit_cov(*alpha, &inc(family, s, t)?, &inc(family, u, v)?),
            _ => Ok(self.eval(t, v)? - self.eval(t, u)? - self.eval(s, v)? + self.eval(s, u)?),
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> Result<f64> {
        if !(s >= 0.0 && t >= 0.0) {
            return Err(param(format!("kernel times must be nonnegative, got ({s}, {t})")));
        }
        match self {
            Self::Fbm { h } => fbm_cov(HurstParam::fbm(*h)?, s, t),
            Self::OddPart { h } => oddpart_cov(HurstParam::fbm(*h)?, s, t),
            Self::SubFbm { h } | Self::NsFbm { h } => subfbm_cov(HurstParam::sub(*h)?, s, t),
            Self::SpecialH1 => special_h1_cov(s, t),
            Self::NsfK { gamma, prefactor } => nsfbm_k(*gamma, *prefactor, s, t),
            Self::DensityRho { theta, alpha, family } => {
                if s == 0.0 || t == 0.0 {
                    return Ok(0.0);
                }
                density_field_cov(theta, *alpha, &family.at(s)?, &family.at(t)?, 1.0, 1.0)
            }
            Self::ZLimit { theta_mean, alpha, family } => {
                if s == 0.0 || t == 0.0 {
                    return Ok(0.0);
                }
                z_limit_cov(*theta_mean, *alpha, &family.at(s)?, &family.at(t)?)
            }
            Self::OccLimit { alpha, family } => {
                if s == 0.0 || t == 0.0 {
                    return Ok(0.0);
                }
                occ_limit_cov(*alpha, &family.at(s)?, &family.at(t)?)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Fbm { h } => format!("fbm(H={h})"),
            Self::SubFbm { h } => format!("subfbm(H={h})"),
            Self::NsFbm { h } => format!("nsfbm(H={h})"),
            Self::OddPart { h } => format!("oddpart(H={h})"),
            Self::SpecialH1 => "special_h1".into(),
            Self::DensityRho { theta, alpha, family } => {
                format!("density({}, alpha={}, {})", theta.label(), alpha.alpha(), family.name())
            }
            Self::ZLimit { theta_mean, alpha, family } => {
                format!("z_limit(mean={theta_mean}, alpha={}, {})", alpha.alpha(), family.name())
            }
            Self::OccLimit { alpha, family } => format!("occ_limit(alpha={}, {})", alpha.alpha(), family.name()),
            Self::NsfK { gamma, prefactor } => format!("nsf_k(gamma={gamma}, prefactor={prefactor})"),
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    // (1 − cos sx)(1 − cos tx) ~ s²t²x⁴/4 at the origin.
    if gamma > 1.0 && gamma < 5.0 {
        Ok(())
    } else {
        Err(Error::Integrability(format!(
            "cosine-product kernel needs exponent in (1, 5), got {gamma}"
        )))
    }
}

fn nonneg(s: f64, t: f64) -> Result<()> {
    if s >= 0.0 && t >= 0.0 {
        Ok(())
    } else {
        Err(param(format!("times must be nonnegative, got ({s}, {t})")))
    }
}

/// `½(s^{2H} + t^{2H} − |t − s|^{2H})`.
pub fn fbm_cov(h: HurstParam, s: f64, t: f64) -> Result<f64> {
    nonneg(s, t)?;
    let e = 2.0 * h.0;
    Ok(0.5 * (s.powf(e) + t.powf(e) - (t - s).abs().powf(e)))
}

/// `(1 − H)(s^{2H} + t^{2H} − ½((s + t)^{2H} + |t − s|^{2H}))`.
pub fn subfbm_cov(h: HurstParam, s: f64, t: f64) -> Result<f64> {
    nonneg(s, t)?;
    let e = 2.0 * h.0;
    Ok((1.0 - h.0) * (s.powf(e) + t.powf(e) - 0.5 * ((s + t).powf(e) + (t - s).abs().powf(e))))
}

/// `(s + t)^{2H} − |t − s|^{2H}`.
pub fn oddpart_cov(h: HurstParam, s: f64, t: f64) -> Result<f64> {
    nonneg(s, t)?;
    let e = 2.0 * h.0;
    Ok((s + t).powf(e) - (t - s).abs().powf(e))
}

fn opts() -> CosineOptions {
    CosineOptions::default()
}

/// `∫₀^∞ combo(x) x^p dx` for a pure power.
fn power_integral(combo: &CosineCombo, p: f64) -> Result<f64> {
    Ok(cosine_integral(combo, &|x: f64| x.powf(p), Shape::Power { coef: 1.0, exponent: p }, opts())?.value)
}

/// Covariance of the density field, `s ≤ t`:
/// `Eθ ∫ f T_{t−s} g + (Var θ − Eθ) ∫ (T_s f)(T_t g)`.
pub fn density_field_cov(
    theta: &ThetaLaw,
    alpha: StableParams,
    f: &StepFunction,
    g: &StepFunction,
    s: f64,
    t: f64,
) -> Result<f64> {
    theta.validate()?;
    let (s, t) = if s <= t { (s, t) } else { (t, s) };
    let a = alpha.alpha();
    let first = theta.mean() * heat_pair(a, t - s, f, g)?;
    let excess = theta.variance() - theta.mean();
    let second = if excess == 0.0 { 0.0 } else { excess * heat_pair(a, s + t, f, g)? };
    Ok(first + second)
}

/// `(Eθ/π) ∫ f̂ conj(ĝ) |x|^α dx`.
pub fn z_limit_cov(theta_mean: f64, alpha: StableParams, f: &StepFunction, g: &StepFunction) -> Result<f64> {
    let combo = spectral_combo(f, g);
    Ok(2.0 * theta_mean / PI * power_integral(&combo, alpha.alpha() - 2.0)?)
}

/// `(1/π) ∫ f̂ conj(ĝ) |x|^{−α} dx`.
pub fn occ_limit_cov(alpha: StableParams, f: &StepFunction, g: &StepFunction) -> Result<f64> {
    let combo = spectral_combo(f, g);
    Ok(2.0 / PI * power_integral(&combo, -2.0 - alpha.alpha())?)
}

/// Real-space form of [`occ_limit_cov`] for `α < 1`:
/// `c_α ∬ f(x) g(y)|x − y|^{α−1} dx dy` with
/// `c_α = 2^{1−α} Γ((1−α)/2) / (√π Γ(α/2))`.
///
/// The double integral is summed exactly over the jumps of `f` and `g`.
pub fn occ_limit_real_space(alpha: StableParams, f: &StepFunction, g: &StepFunction) -> Result<f64> {
    let a = alpha.alpha();
    if a >= 1.0 {
        return Err(param(format!("the real-space form needs alpha < 1, got {a}")));
    }
    let c = 2f64.powf(1.0 - a) * gamma((1.0 - a) / 2.0) / (PI.sqrt() * gamma(a / 2.0));
    Ok(c * riesz_double_integral(a - 1.0, f, g))
}

/// `∬ f(x) g(y)|x − y|^β dx dy` for `β > −1`, exact for step functions.
pub fn riesz_double_integral(beta: f64, f: &StepFunction, g: &StepFunction) -> f64 {
    let phi = |u: f64| -u.abs().powf(beta + 2.0) / ((beta + 1.0) * (beta + 2.0));
    let mut acc = 0.0;
    for &(p, c) in &f.jumps() {
        for &(q, d) in &g.jumps() {
            acc += c * d * phi(p - q);
        }
    }
    acc
}

/// `(1 − cos sx)(1 − cos tx)` as a cosine combination.
pub fn product_combo(s: f64, t: f64) -> CosineCombo {
    let mut c = CosineCombo::new();
    c.push(1.0, s);
    c.push(1.0, t);
    c.push(-0.5, s - t);
    c.push(-0.5, s + t);
    c
}

/// `prefactor · ∫_ℝ (1 − cos sx)(1 − cos tx)|x|^{−γ} dx`.
pub fn nsfbm_k(gamma: f64, prefactor: f64, s: f64, t: f64) -> Result<f64> {
    check_gamma(gamma)?;
    nonneg(s, t)?;
    if s == 0.0 || t == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * prefactor * power_integral(&product_combo(s, t), -gamma)?)
}

/// `∫_ℝ (1 − cos sx)(1 − cos tx)|x|^{−3} dx`, unit prefactor.
pub fn special_h1_cov(s: f64, t: f64) -> Result<f64> {
    nsfbm_k(3.0, 1.0, s, t)
}

/// `C_α = 1 / ∫_ℝ (1 − cos u)|u|^{α−2} du`, so `|t|^{1−α} = C_α ∫(1 − cos xt)|x|^{α−2} dx`.
pub fn frac_identity_constant(alpha: StableParams) -> Result<f64> {
    let a = alpha.alpha();
    if a >= 1.0 {
        return Err(param(format!("the fractional identity needs alpha < 1, got {a}")));
    }
    let mut c = CosineCombo::new();
    c.push(1.0, 1.0);
    Ok(1.0 / (2.0 * power_integral(&c, a - 2.0)?))
}

/// `∫_ℝ (1 − cos xt)|x|^{α−2} dx`.
pub fn frac_identity_integral(alpha: StableParams, t: f64) -> Result<f64> {
    let mut c = CosineCombo::new();
    c.push(1.0, t);
    Ok(2.0 * power_integral(&c, alpha.alpha() - 2.0)?)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(param("time grid is empty"));
    }
    if grid[0] <= 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(param("time grid must be positive and strictly increasing"));
    }
    Ok(())
}

/// Symmetric matrix `K(t_i, t_j)`.
pub fn gram_matrix(spec: &KernelSpec, grid: &[f64]) -> Result<DMatrix<f64>> {
    check_grid(grid)?;
    spec.validate()?;
    let n = grid.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals = par::try_map_indexed(pairs.len(), |k| {
        let (i, j) = pairs[k];
        spec.eval(grid[i], grid[j])
    })?;
    let mut m = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    Ok(m)
}

/// Correlation-normalised copy of a covariance matrix.
pub fn normalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)]).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Fit("covariance matrix has a nonpositive diagonal".into()));
    }
    Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / (d[i] * d[j]).sqrt()))
}

/// Relative tolerance used by [`psd_check`].
pub const PSD_TOL: f64 = 1e-10;

/// Smallest eigenvalue and whether it clears `−PSD_TOL · trace`.
pub fn psd_check(m: &DMatrix<f64>) -> Result<(f64, bool)> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Shape(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min, min >= -PSD_TOL * m.trace().abs()))
}

/// Kernel values as CSV rows `s,t,value`.
pub fn write_kernel_csv<W: Write>(out: &mut W, grid: &[f64], m: &DMatrix<f64>) -> std::io::Result<()> {
    writeln!(out, "s,t,value")?;
    for (i, s) in grid.iter().enumerate() {
        for (j, t) in grid.iter().enumerate() {
            writeln!(out, "{s},{t},{:e}", m[(i, j)])?;
        }
    }
    Ok(())
}

/// Gram matrix as JSON with the grid and row-major values.
pub fn gram_json(grid: &[f64], m: &DMatrix<f64>) -> serde_json::Value {
    let rows: Vec<f64> = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    serde_json::json!({ "grid": grid, "values": rows })
}

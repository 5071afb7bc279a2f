//! Finite-horizon covariance formulas for the simulated systems.
//!
//! The limit kernels in [`crate::kernels`] describe `T → ∞`; the functions
//! here give the exact second moments of what the simulators actually
//! compute, so Monte Carlo output can be checked without asymptotic bias.

use std::f64::consts::PI;

use crate::error::{param, Result};
use crate::quad::{cosine_integral, Adaptive, CosineOptions, Shape};
use crate::stable::{StableLaw, StableParams};
use crate::step::{spectral_combo, StepFunction};

fn check_horizon(horizon: f64, dt: Option<f64>) -> Result<usize> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(param(format!("horizon must be positive, got {horizon}")));
    }
    let Some(dt) = dt else { return Ok(0) };
    if !(dt > 0.0) {
        return Err(param(format!("time step must be positive, got {dt}")));
    }
    let k = (horizon / dt).round();
    if k < 1.0 || (k * dt - horizon).abs() > 1e-9 * horizon {
        return Err(param(format!("horizon {horizon} is not a whole number of steps of {dt}")));
    }
    Ok(k as usize)
}

/// `Σ_{j,k<K} q^{|j−k|}` with `q = e^{−ε}`.
struct GridSums {
    k: f64,
    /// `M_n = Σ_{j,k} |j−k|^n` for the small-`Kε` expansion.
    moments: [f64; 6],
}

impl GridSums {
    fn new(k: usize) -> Self {
        let mut moments = [0.0; 6];
        moments[0] = (k * k) as f64;
        for m in 1..k {
            let w = 2.0 * (k - m) as f64;
            let mf = m as f64;
            let mut p = 1.0;
            for slot in moments.iter_mut().skip(1) {
                p *= mf;
                *slot += w * p;
            }
        }
        Self { k: k as f64, moments }
    }

    fn s1(&self, eps: f64) -> f64 {
        let k = self.k;
        if k * eps < 1e-3 {
            let mut term = 1.0;
            let mut acc = 0.0;
            for (n, m) in self.moments.iter().enumerate() {
                if n > 0 {
                    term *= -eps / n as f64;
                }
                acc += term * m;
            }
            return acc;
        }
        let q = (-eps).exp();
        let u = -(-eps).exp_m1();
        let v = -(-k * eps).exp_m1();
        k + 2.0 * q * (k * u - v) / (u * u)
    }

    /// `Σ_{j,k} q^{|j−k|}(1 − q^{2 min(j,k)})`.
    fn branching_sum(&self, eps: f64) -> f64 {
        let k = self.k as usize;
        let q = (-eps).exp();
        let den = (-eps).exp_m1();
        (1..k)
            .map(|m| {
                let n = (k - 1 - m) as f64;
                let geo = if n == 0.0 { 0.0 } else { (-n * eps).exp_m1() / den };
                -(-2.0 * m as f64 * eps).exp_m1() * (1.0 + 2.0 * q * geo)
            })
            .sum()
    }
}

/// `(z − 1 + e^{−z})/z²`.
fn phi(z: f64) -> f64 {
    if z < 1e-3 {
        0.5 - z / 6.0 + z * z / 24.0 - z * z * z / 120.0
    } else {
        (z + (-z).exp_m1()) / (z * z)
    }
}

/// `(z − 2(1 − e^{−z}) + (1 − e^{−2z})/2)/z³`.
fn psi(z: f64) -> f64 {
    if z < 2e-3 {
        1.0 / 3.0 - z / 4.0 + 7.0 * z * z / 60.0 - z * z * z / 24.0
    } else {
        (z + 2.0 * (-z).exp_m1() - 0.5 * (-2.0 * z).exp_m1()) / (z * z * z)
    }
}

fn spectral<H: Fn(f64) -> f64>(f: &StepFunction, g: &StepFunction, h: H) -> Result<f64> {
    let combo = spectral_combo(f, g);
    Ok(cosine_integral(&combo, &h, Shape::General, CosineOptions::default())?.value / PI)
}

/// Covariance of `(L_f − E L_f)/√T` and `(L_g − E L_g)/√T` for the
/// occupation times `L` of a Poisson system with the given intensity,
/// sampled on the grid `{k dt : k < T/dt}`.
pub fn occupation_cov_grid(
    intensity: f64,
    alpha: StableParams,
    horizon: f64,
    dt: f64,
    f: &StepFunction,
    g: &StepFunction,
) -> Result<f64> {
    let k = check_horizon(horizon, Some(dt))?;
    let sums = GridSums::new(k);
    let a = alpha.alpha();
    let c = intensity * dt * dt / horizon;
    spectral(f, g, |x| c * sums.s1(dt * x.powf(a)) / (x * x))
}

/// The same covariance for exact occupation integrals over `[0, T]`.
pub fn occupation_cov_exact(
    intensity: f64,
    alpha: StableParams,
    horizon: f64,
    f: &StepFunction,
    g: &StepFunction,
) -> Result<f64> {
    check_horizon(horizon, None)?;
    let a = alpha.alpha();
    spectral(f, g, |x| 2.0 * intensity * horizon * phi(horizon * x.powf(a)) / (x * x))
}

/// Step-size bias budget `2 |C_dt − C_{dt/2}|` for the grid covariance.
pub fn occupation_dt_budget(
    intensity: f64,
    alpha: StableParams,
    horizon: f64,
    dt: f64,
    f: &StepFunction,
    g: &StepFunction,
) -> Result<f64> {
    let coarse = occupation_cov_grid(intensity, alpha, horizon, dt, f, g)?;
    let fine = occupation_cov_grid(intensity, alpha, horizon, dt / 2.0, f, g)?;
    Ok(2.0 * (coarse - fine).abs())
}

/// Covariance of the branching occupation pairings normalized by
/// `√(T V H)`, on the simulation grid.
pub fn branching_occupation_cov_grid(
    rate_v: f64,
    alpha: StableParams,
    horizon: f64,
    dt: f64,
    f: &StepFunction,
    g: &StepFunction,
) -> Result<f64> {
    let k = check_horizon(horizon, Some(dt))?;
    if !(rate_v > 0.0) {
        return Err(param(format!("branching rate must be positive, got {rate_v}")));
    }
    let sums = GridSums::new(k);
    let a = alpha.alpha();
    let c = dt * dt / (horizon * rate_v);
    spectral(f, g, |x| {
        let r = x.powf(a);
        let eps = dt * r;
        c * (sums.s1(eps) + rate_v * sums.branching_sum(eps) / (2.0 * r)) / (x * x)
    })
}

/// The branching occupation covariance for exact time integrals.
pub fn branching_occupation_cov_exact(
    rate_v: f64,
    alpha: StableParams,
    horizon: f64,
    f: &StepFunction,
    g: &StepFunction,
) -> Result<f64> {
    check_horizon(horizon, None)?;
    if !(rate_v > 0.0) {
        return Err(param(format!("branching rate must be positive, got {rate_v}")));
    }
    let a = alpha.alpha();
    let t = horizon;
    spectral(f, g, |x| {
        let z = t * x.powf(a);
        (2.0 * t / rate_v * phi(z) + t * t * psi(z)) / (x * x)
    })
}

/// Heuristic allowance for ancestors left outside `[−radius, radius]` in
/// the branching occupation covariance (normalized by `T V H`).
///
/// A tree rooted at distance `u` from the support contributes at most
/// `M T g · E L(u)` to the second moment, where `g = 1 + V T` stands in for its
/// largest population and `E L(u) = M |S| Σ_k dt P(X_{k dt} > u)` is its
/// expected occupation. Integrating over both far sides gives the bound.
pub fn branching_window_budget(
    law: &StableLaw,
    rate_v: f64,
    horizon: f64,
    dt: f64,
    support: (f64, f64),
    max_level: f64,
    radius: f64,
) -> Result<f64> {
    let k = check_horizon(horizon, Some(dt))?;
    let reach = support.0.abs().max(support.1.abs());
    let gap = radius - reach;
    if !(gap > 0.0) {
        return Err(param(format!("ancestor window radius {radius} does not cover the support")));
    }
    let g = 1.0 + rate_v * horizon;
    let width = support.1 - support.0;
    let tail: f64 = (1..k).map(|j| dt * 0.5 * law.tail_mass(j as f64 * dt, gap)).sum();
    Ok(2.0 * max_level * max_level * g * width * tail / rate_v)
}

/// First and second moments of `⟨N_r, φ⟩` for the branching system started
/// from one particle at `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchingMoments {
    pub mean: f64,
    pub second: f64,
}

/// `E⟨N_r, φ⟩ = T_r φ(x)` and
/// `E⟨N_r, φ⟩² = T_r(φ²)(x) + V ∫₀^r T_v((T_{r−v} φ)²)(x) dv`.
pub fn branching_moments(
    law: &StableLaw,
    rate_v: f64,
    r: f64,
    phi: &StepFunction,
    x: f64,
) -> Result<BranchingMoments> {
    if !(rate_v > 0.0) || !(r >= 0.0) {
        return Err(param("branching rate must be positive and the time nonnegative"));
    }
    let squared = StepFunction::new(
        phi.breakpoints().to_vec(),
        phi.levels().iter().map(|l| l * l).collect(),
    )?;
    let mean = law.apply(r, phi, x);
    let first = law.apply(r, &squared, x);
    if r == 0.0 {
        return Ok(BranchingMoments { mean, second: first });
    }
    let alpha = law.alpha();
    let inner = Adaptive::new(1e-11, 1e-9);
    // `T_v h(x) = ∫ p_1(u) h(x + v^{1/α} u) du` with `u = tan θ`.
    let smoothed = |v: f64| -> f64 {
        if v <= 0.0 {
            let w = law.apply(r, phi, x);
            return w * w;
        }
        let s = v.powf(1.0 / alpha);
        let h = |theta: f64| {
            let u = theta.tan();
            let c = theta.cos();
            let w = law.apply(r - v, phi, x + s * u);
            law.unit_density(u) / (c * c) * w * w
        };
        let half = PI / 2.0;
        let mut points = vec![-half];
        points.extend(phi.breakpoints().iter().map(|b| ((b - x) / s).atan()));
        points.push(0.0);
        points.push(half);
        points.sort_by(f64::total_cmp);
        points.dedup();
        inner.integrate(&h, &points).map(|i| i.value).unwrap_or(f64::NAN)
    };
    let outer = Adaptive::new(1e-10, 1e-8).integrate(&smoothed, &[0.0, r])?;
    if !outer.value.is_finite() {
        return Err(crate::Error::Numeric {
            message: "branching second moment quadrature failed".into(),
            residual: outer.error,
        });
    }
    Ok(BranchingMoments { mean, second: first + rate_v * outer.value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::occ_limit_cov;
    use crate::step::TestFamily;

    fn brute_s1(k: usize, eps: f64) -> f64 {
        let mut acc = 0.0;
        for j in 0..k {
            for l in 0..k {
                acc += (-eps * (j as f64 - l as f64).abs()).exp();
            }
        }
        acc
    }

    fn brute_branching(k: usize, eps: f64) -> f64 {
        let mut acc = 0.0;
        for j in 0..k {
            for l in 0..k {
                let m = j.min(l) as f64;
                acc += (-eps * (j as f64 - l as f64).abs()).exp() * -(-2.0 * eps * m).exp_m1();
            }
        }
        acc
    }

    #[test]
    fn grid_sums_match_brute_force() {
        for k in [1, 2, 7, 40] {
            let s = GridSums::new(k);
            for eps in [1e-7, 1e-5, 1e-3, 0.1, 2.0] {
                let want = brute_s1(k, eps);
                assert!((s.s1(eps) - want).abs() <= 1e-10 * want, "k={k} eps={eps}");
                let want = brute_branching(k, eps);
                assert!((s.branching_sum(eps) - want).abs() <= 1e-10 * want.max(1e-300), "k={k} eps={eps}");
            }
        }
    }

    #[test]
    fn series_branches_are_continuous() {
        for (f, cut) in [(phi as fn(f64) -> f64, 1e-3), (psi, 2e-3)] {
            let below = f(cut * (1.0 - 1e-9));
            let above = f(cut * (1.0 + 1e-9));
            assert!((below - above).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_occupation_approaches_exact_occupation() {
        let a = StableParams::new(1.5).unwrap();
        let f = TestFamily::OddPair.at(1.0).unwrap();
        let exact = occupation_cov_exact(1.0, a, 5.0, &f, &f).unwrap();
        let coarse = occupation_cov_grid(1.0, a, 5.0, 0.05, &f, &f).unwrap();
        let fine = occupation_cov_grid(1.0, a, 5.0, 0.0125, &f, &f).unwrap();
        assert!((fine - exact).abs() < (coarse - exact).abs());
        assert!((fine - exact).abs() < 0.01 * exact);
    }

    #[test]
    fn exact_occupation_grows_to_the_limit() {
        let a = StableParams::new(0.5).unwrap();
        let f = TestFamily::IndicatorRight.at(1.0).unwrap();
        let limit = occ_limit_cov(a, &f, &f).unwrap();
        let near = occupation_cov_exact(1.0, a, 1e6, &f, &f).unwrap();
        assert!((near - limit).abs() < 0.01 * limit, "{near} vs {limit}");
    }

    #[test]
    fn branching_forms_agree_for_small_steps() {
        let a = StableParams::new(1.0).unwrap();
        let f = TestFamily::OddPair.at(1.0).unwrap();
        let exact = branching_occupation_cov_exact(2.0, a, 2.0, &f, &f).unwrap();
        let grid = branching_occupation_cov_grid(2.0, a, 2.0, 0.002, &f, &f).unwrap();
        assert!((grid - exact).abs() < 0.01 * exact, "{grid} vs {exact}");
    }

    #[test]
    fn window_budget_decays_with_radius() {
        let law = StableLaw::new(StableParams::new(1.0).unwrap()).unwrap();
        let b = |r: f64| branching_window_budget(&law, 2.0, 2.0, 0.05, (-1.0, 1.0), 1.0, r).unwrap();
        assert!(b(100.0) > 5.0 * b(1000.0));
        assert!(branching_window_budget(&law, 2.0, 2.0, 0.05, (-1.0, 1.0), 1.0, 0.5).is_err());
    }

    #[test]
    fn branching_moments_at_time_zero() {
        let law = StableLaw::new(StableParams::new(1.0).unwrap()).unwrap();
        let phi = StepFunction::new(vec![-1.0, 0.0, 2.0], vec![2.0, -1.0]).unwrap();
        let m = branching_moments(&law, 2.0, 0.0, &phi, -0.5).unwrap();
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.second, 4.0);
    }

    #[test]
    fn constant_test_function_has_linear_variance() {
        // With φ ≡ 1 on a huge box the population variance is V r.
        let law = StableLaw::new(StableParams::new(2.0).unwrap()).unwrap();
        let phi = StepFunction::indicator(-1e4, 1e4).unwrap();
        let m = branching_moments(&law, 0.5, 1.0, &phi, 0.0).unwrap();
        assert!((m.mean - 1.0).abs() < 1e-9);
        assert!((m.second - 1.5).abs() < 1e-6, "{}", m.second);
    }
}

//! Compactly supported step functions, the canonical test families and the
//! space rescaling `S_T f = f(·/T)`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::quad::CosineCombo;

/// Piecewise-constant function, zero outside `[breakpoints[0], breakpoints[n-1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStep", into = "RawStep")]
pub struct StepFunction {
    breakpoints: Vec<f64>,
    levels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawStep {
    breakpoints: Vec<f64>,
    levels: Vec<f64>,
}

impl TryFrom<RawStep> for StepFunction {
    type Error = Error;
    fn try_from(r: RawStep) -> Result<Self> {
        StepFunction::new(r.breakpoints, r.levels)
    }
}

impl From<StepFunction> for RawStep {
    fn from(s: StepFunction) -> Self {
        RawStep {
            breakpoints: s.breakpoints,
            levels: s.levels,
        }
    }
}

impl StepFunction {
    pub fn new(breakpoints: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(param("a step function needs at least two breakpoints"));
        }
        if levels.len() + 1 != breakpoints.len() {
            return Err(Error::Shape(format!(
                "{} breakpoints need {} levels, got {}",
                breakpoints.len(),
                breakpoints.len() - 1,
                levels.len()
            )));
        }
        if breakpoints.iter().chain(&levels).any(|v| !v.is_finite()) {
            return Err(param("breakpoints and levels must be finite"));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(param("breakpoints must be strictly increasing"));
        }
        Ok(Self { breakpoints, levels })
    }

    /// `1_{[a,b)}`.
    pub fn indicator(a: f64, b: f64) -> Result<Self> {
        Self::new(vec![a, b], vec![1.0])
    }

    /// The zero function, represented on `[0, 1)`.
    pub fn zero() -> Self {
        Self {
            breakpoints: vec![0.0, 1.0],
            levels: vec![0.0],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn support(&self) -> (f64, f64) {
        (self.breakpoints[0], *self.breakpoints.last().unwrap())
    }

    pub fn is_zero(&self) -> bool {
        self.levels.iter().all(|&l| l == 0.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let b = &self.breakpoints;
        if x < b[0] || x >= b[b.len() - 1] {
            return 0.0;
        }
        let i = b.partition_point(|&p| p <= x) - 1;
        self.levels[i]
    }

    /// Intervals `(a, b, level)` with nonzero level.
    pub fn pieces(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.breakpoints
            .windows(2)
            .zip(&self.levels)
            .filter(|(_, &l)| l != 0.0)
            .map(|(w, &l)| (w[0], w[1], l))
    }

    pub fn integral(&self) -> f64 {
        self.pieces().map(|(a, b, l)| l * (b - a)).sum()
    }

    /// Jump decomposition `f = Σ c_j 1_{x ≥ p_j}`; the jumps sum to zero.
    pub fn jumps(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.breakpoints.len());
        let mut prev = 0.0;
        for (i, &p) in self.breakpoints.iter().enumerate() {
            let next = self.levels.get(i).copied().unwrap_or(0.0);
            let c = next - prev;
            if c != 0.0 {
                out.push((p, c));
            }
            prev = next;
        }
        out
    }

    /// `f̂(x) = ∫ e^{ixy} f(y) dy`.
    pub fn fourier(&self, x: f64) -> Complex64 {
        if x.abs() < 1e-8 {
            let mut acc = Complex64::new(0.0, 0.0);
            for (a, b, l) in self.pieces() {
                let m1 = b - a;
                let m2 = (b * b - a * a) / 2.0;
                let m3 = (b * b * b - a * a * a) / 6.0;
                acc += l * Complex64::new(m1 - x * x * m3, x * m2);
            }
            return acc;
        }
        // (e^{ixb} − e^{ixa})/(ix) = e^{ixm} · 2 sin(xh)/x, free of cancellation.
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, b, l) in self.pieces() {
            let m = 0.5 * (a + b);
            let h = 0.5 * (b - a);
            acc += Complex64::from_polar(l * 2.0 * (x * h).sin() / x, x * m);
        }
        acc
    }

    /// `S_T f = f(·/T)`.
    pub fn rescale(&self, t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(param(format!("scale factor must be positive, got {t}")));
        }
        Ok(Self {
            breakpoints: self.breakpoints.iter().map(|b| b * t).collect(),
            levels: self.levels.clone(),
        })
    }

    /// `f(· − tau)`.
    pub fn shift(&self, tau: f64) -> Self {
        Self {
            breakpoints: self.breakpoints.iter().map(|b| b + tau).collect(),
            levels: self.levels.clone(),
        }
    }

    /// `a·f + b·g` on the union of breakpoints.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        let grid = merge_breakpoints(&self.breakpoints, &other.breakpoints);
        let levels = grid
            .windows(2)
            .map(|w| {
                let m = 0.5 * (w[0] + w[1]);
                a * self.eval(m) + b * other.eval(m)
            })
            .collect();
        Self {
            breakpoints: grid,
            levels,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.combine(1.0, other, -1.0)
    }

    /// Exact `∫ f g`.
    pub fn l2_inner(&self, other: &Self) -> f64 {
        let grid = merge_breakpoints(&self.breakpoints, &other.breakpoints);
        grid.windows(2)
            .map(|w| {
                let m = 0.5 * (w[0] + w[1]);
                self.eval(m) * other.eval(m) * (w[1] - w[0])
            })
            .sum()
    }

    /// True when `f(−x) = −f(x)` up to the breakpoint convention.
    pub fn is_odd(&self) -> bool {
        let n = self.breakpoints.len();
        let tol = 1e-12 * self.breakpoints.iter().fold(1.0f64, |m, b| m.max(b.abs()));
        (0..n).all(|i| (self.breakpoints[i] + self.breakpoints[n - 1 - i]).abs() <= tol)
            && (0..n - 1).all(|i| self.levels[i] == -self.levels[n - 2 - i])
    }

    /// True when `f(−x) = f(x)` up to the breakpoint convention.
    pub fn is_even(&self) -> bool {
        let n = self.breakpoints.len();
        let tol = 1e-12 * self.breakpoints.iter().fold(1.0f64, |m, b| m.max(b.abs()));
        (0..n).all(|i| (self.breakpoints[i] + self.breakpoints[n - 1 - i]).abs() <= tol)
            && (0..n - 1).all(|i| self.levels[i] == self.levels[n - 2 - i])
    }
}

/// Sorted union of two breakpoint lists.
pub fn merge_breakpoints(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut g: Vec<f64> = a.iter().chain(b).copied().collect();
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Cosine combination with `Re f̂(x) conj ĝ(x) = combo(x) / x²`.
///
/// For any even multiplier `m`,
/// `(1/2π) ∫_ℝ f̂ conj(ĝ) m = (1/π) ∫₀^∞ combo(x) m(x) x^{-2} dx`.
pub fn spectral_combo(f: &StepFunction, g: &StepFunction) -> CosineCombo {
    let mut combo = CosineCombo::new();
    for &(p, c) in &f.jumps() {
        for &(q, d) in &g.jumps() {
            combo.push(-c * d, p - q);
        }
    }
    combo
}

/// Generator for custom test families.
#[derive(Clone)]
pub struct CustomFamily(pub Arc<dyn Fn(f64) -> StepFunction + Send + Sync>);

impl fmt::Debug for CustomFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomFamily(..)")
    }
}

/// A one-parameter family `t ↦ ψ_t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFamily {
    /// `1_{[0,t]}`.
    IndicatorRight,
    /// `1_{[0,t]} − 1_{[−t,0]}`.
    OddPair,
    /// `1_{[−t,t]}`.
    SymmetricInterval,
    #[serde(skip)]
    Custom(CustomFamily),
}

impl TestFamily {
    pub const CANONICAL: [TestFamily; 3] = [
        TestFamily::IndicatorRight,
        TestFamily::OddPair,
        TestFamily::SymmetricInterval,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::IndicatorRight => "indicator_right",
            Self::OddPair => "odd_pair",
            Self::SymmetricInterval => "symmetric_interval",
            Self::Custom(_) => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "indicator_right" => Ok(Self::IndicatorRight),
            "odd_pair" => Ok(Self::OddPair),
            "symmetric_interval" => Ok(Self::SymmetricInterval),
            other => Err(param(format!("unknown test family '{other}'"))),
        }
    }

    pub fn is_odd(&self) -> bool {
        matches!(self, Self::OddPair)
    }

    pub fn at(&self, t: f64) -> Result<StepFunction> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(param(format!("family parameter must be positive, got {t}")));
        }
        Ok(match self {
            Self::IndicatorRight => StepFunction::new(vec![0.0, t], vec![1.0])?,
            Self::OddPair => StepFunction::new(vec![-t, 0.0, t], vec![-1.0, 1.0])?,
            Self::SymmetricInterval => StepFunction::new(vec![-t, t], vec![1.0])?,
            Self::Custom(g) => (g.0)(t),
        })
    }
}

/// `ψ_t` for the named family.
pub fn family_at(family: &TestFamily, t: f64) -> Result<StepFunction> {
    family.at(t)
}

//! Symmetric α-stable motion normalised so that `E exp(iuX_t) = exp(−t|u|^α)`.
//!
//! Densities for `α ∉ {1, 2}` come from a [`DensityTable`]: Fourier inversion
//! on a grid, cubic Hermite interpolation inside it and the Bergström series
//! beyond it.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{param, Error, Result};
use crate::quad::{cosine_integral, Adaptive, CosineOptions, Integral, Shape, Wynn};
use crate::step::{spectral_combo, StepFunction};

/// Environment variable naming the density-table cache directory.
pub const CACHE_ENV: &str = "FBMLAB_CACHE_DIR";

/// Stability index `α ∈ (0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct StableParams {
    alpha: f64,
}

impl StableParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(param(format!("stability index must lie in (0, 2], got {alpha}")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(self) -> f64 {
        self.alpha
    }

    /// Self-similarity exponent `1/α`.
    pub fn scale_at(self, t: f64) -> f64 {
        t.powf(1.0 / self.alpha)
    }
}

impl TryFrom<f64> for StableParams {
    type Error = Error;
    fn try_from(a: f64) -> Result<Self> {
        Self::new(a)
    }
}

impl From<StableParams> for f64 {
    fn from(p: StableParams) -> f64 {
        p.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SamplerKind {
    Gauss,
    Cauchy,
    Half,
    Cms,
}

/// Draws increments of the stable motion.
///
/// Chambers–Mallows–Stuck in general; closed forms for `α ∈ {1, 2}` and the
/// difference of two Lévy variables for `α = 1/2`.
#[derive(Debug, Clone, Copy)]
pub struct StableSampler {
    alpha: f64,
    inv_alpha: f64,
    exponent: f64,
    kind: SamplerKind,
}

impl StableSampler {
    pub fn new(params: StableParams) -> Self {
        let a = params.alpha;
        let kind = if a == 2.0 {
            SamplerKind::Gauss
        } else if a == 1.0 {
            SamplerKind::Cauchy
        } else if a == 0.5 {
            SamplerKind::Half
        } else {
            SamplerKind::Cms
        };
        Self {
            alpha: a,
            inv_alpha: 1.0 / a,
            exponent: (1.0 - a) / a,
            kind,
        }
    }

    /// Forces the Chambers–Mallows–Stuck path for every α.
    pub fn cms_only(params: StableParams) -> Self {
        Self {
            kind: SamplerKind::Cms,
            ..Self::new(params)
        }
    }

    /// One draw at unit time.
    #[inline]
    pub fn unit<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            SamplerKind::Gauss => {
                let z: f64 = StandardNormal.sample(rng);
                std::f64::consts::SQRT_2 * z
            }
            SamplerKind::Cauchy => (PI * (rng.random::<f64>() - 0.5)).tan(),
            SamplerKind::Half => {
                let z1: f64 = StandardNormal.sample(rng);
                let z2: f64 = StandardNormal.sample(rng);
                0.25 * (1.0 / (z1 * z1) - 1.0 / (z2 * z2))
            }
            SamplerKind::Cms => {
                let v = PI * (rng.random::<f64>() - 0.5);
                let w: f64 = Exp1.sample(rng);
                let a = self.alpha;
                (a * v).sin() / v.cos().powf(self.inv_alpha)
                    * ((v - a * v).cos() / w).powf(self.exponent)
            }
        }
    }

    /// One increment over time `t ≥ 0`.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        t.powf(self.inv_alpha) * self.unit(rng)
    }
}

/// One increment of the stable motion over time `t`.
pub fn sample_stable<R: Rng + ?Sized>(params: StableParams, t: f64, rng: &mut R) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(param(format!("time must be nonnegative, got {t}")));
    }
    Ok(StableSampler::new(params).sample(t, rng))
}

/// `∫₀^∞ u^m trig(xu) e^{−u^α} du` with `trig = sin` when `odd`.
fn fourier_halfline(alpha: f64, x: f64, odd: bool, m: i32) -> Result<f64> {
    let amp = move |u: f64| {
        let e = (-u.powf(alpha)).exp();
        if m == 0 {
            e
        } else {
            u.powi(m) * e
        }
    };
    let f = move |u: f64| {
        let tr = if odd { (x * u).sin() } else { (x * u).cos() };
        tr * amp(u)
    };
    let u_cut = 46f64.powf(1.0 / alpha) * (1.0 + m as f64);
    let fine = Adaptive::new(1e-16, 1e-13);
    if x * u_cut <= 8.0 * PI {
        let mut pts = vec![0.0];
        let mut g = 1e-6f64.min(u_cut / 10.0);
        while g < u_cut {
            pts.push(g);
            g *= 4.0;
        }
        pts.push(u_cut);
        return Ok(fine.integrate(&f, &pts)?.value);
    }
    let half = PI / x;
    let first = if odd { half } else { 0.5 * half };
    let mut pts = vec![0.0];
    let mut g = 1e-6 * first;
    while g < first {
        pts.push(g);
        g *= 4.0;
    }
    pts.push(first);
    let mut partial = fine.integrate(&f, &pts)?.value;
    let mut z = first;
    let mut wynn = Wynn::default();
    let mut last = wynn.push(partial);
    let mut stable_steps = 0;
    for k in 0..200_000 {
        let panel = fine.integrate(&f, &[z, z + half])?;
        partial += panel.value;
        z += half;
        if panel.value.abs() < 1e-17 || z > u_cut {
            return Ok(partial);
        }
        let est = wynn.push(partial);
        if est.is_finite() && (est - last).abs() < 1e-16 && k > 8 {
            stable_steps += 1;
            if stable_steps >= 3 {
                return Ok(est);
            }
        } else {
            stable_steps = 0;
        }
        last = est;
    }
    Err(Error::Numeric {
        message: format!("density inversion at x = {x} did not settle"),
        residual: (last - partial).abs(),
    })
}

#[derive(Clone, Copy)]
enum SeriesKind {
    Density,
    Survival,
}

/// Bergström expansion at large `x` (convergent for α < 1, asymptotic for α > 1).
fn tail_series(alpha: f64, x: f64, kind: SeriesKind) -> f64 {
    let lx = x.ln();
    let mut sum = 0.0;
    let mut prev_mag = f64::INFINITY;
    for k in 1..=400 {
        let kf = k as f64;
        let (lg, pow) = match kind {
            SeriesKind::Density => (ln_gamma(kf * alpha + 1.0), -kf * alpha - 1.0),
            SeriesKind::Survival => (ln_gamma(kf * alpha), -kf * alpha),
        };
        let mag = (lg - ln_gamma(kf + 1.0) + pow * lx).exp();
        if alpha > 1.0 && mag > prev_mag {
            break;
        }
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        let s = (kf * PI * alpha / 2.0).sin();
        let term = sign * s * mag;
        sum += term;
        if mag < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
        prev_mag = mag;
    }
    sum / PI
}

/// Smallest `x` at which the series is accurate to `1e-13` relative.
fn series_cutoff(alpha: f64) -> f64 {
    let mut x: f64 = 2.0;
    while x < 2000.0 {
        let lx = x.ln();
        let first = ln_gamma(alpha + 1.0) - alpha * lx;
        let mut prev = first;
        let mut ok = false;
        for k in 2..=400 {
            let kf = k as f64;
            let lm = ln_gamma(kf * alpha + 1.0) - ln_gamma(kf + 1.0) - kf * alpha * lx;
            if alpha > 1.0 && lm > prev {
                break;
            }
            if lm - first < (1e-13f64).ln() {
                ok = true;
                break;
            }
            prev = lm;
        }
        if ok {
            return x;
        }
        x *= 1.05;
    }
    x
}

const MIN_UNIFORM_STEPS: usize = 256;
const MAX_UNIFORM_STEPS: usize = 20_000;
const LOG_RATIO: f64 = 1.002;
const CACHE_MAGIC: &[u8; 8] = b"FBMLDT01";

/// Tabulated unit-time density `p₁` on `[0, x_max]` for one α.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    alpha: f64,
    grid: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
    cumulative: Vec<f64>,
    tail_at_max: f64,
    tail_constant: f64,
}

impl DensityTable {
    pub fn build(params: StableParams) -> Result<Self> {
        let alpha = params.alpha;
        let x_max = series_cutoff(alpha);
        // Near the origin the interpolation error is driven by the fourth
        // derivative at 0, which grows like Γ(1 + 5/α).
        let d4 = (ln_gamma(1.0 + 5.0 / alpha) - ln_gamma(1.0 + 1.0 / alpha)).exp();
        let steps = ((d4 / (384.0 * 1e-9)).powf(0.25).ceil() as usize).clamp(MIN_UNIFORM_STEPS, MAX_UNIFORM_STEPS);
        let mut grid: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        let mut x = 1.0;
        while x < x_max {
            x *= LOG_RATIO;
            grid.push(x);
        }
        let mut values = Vec::with_capacity(grid.len());
        let mut slopes = Vec::with_capacity(grid.len());
        for &x in &grid {
            if x == 0.0 {
                values.push(gamma(1.0 + 1.0 / alpha) / PI);
                slopes.push(0.0);
            } else {
                values.push(fourier_halfline(alpha, x, false, 0)? / PI);
                slopes.push(-fourier_halfline(alpha, x, true, 1)? / PI);
            }
        }
        Self::from_parts(alpha, grid, values, slopes)
    }

    fn from_parts(alpha: f64, grid: Vec<f64>, values: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for i in 1..grid.len() {
            let h = grid[i] - grid[i - 1];
            acc += h * (values[i - 1] + values[i]) / 2.0 + h * h * (slopes[i - 1] - slopes[i]) / 12.0;
            cumulative.push(acc);
        }
        let x_max = *grid.last().unwrap();
        let table = Self {
            alpha,
            tail_at_max: tail_series(alpha, x_max, SeriesKind::Survival),
            tail_constant: gamma(alpha + 1.0) * (PI * alpha / 2.0).sin() / PI,
            grid,
            values,
            slopes,
            cumulative,
        };
        let mass = table.total_mass();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric {
                message: format!("density table for alpha = {alpha} has mass {mass}"),
                residual: (mass - 1.0).abs(),
            });
        }
        Ok(table)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `C` in `p₁(x) ~ C |x|^{−1−α}`.
    pub fn tail_constant(&self) -> f64 {
        self.tail_constant
    }

    pub fn x_max(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Trapezoid rule over the symmetric table plus the analytic tails.
    pub fn trapezoid_mass(&self) -> f64 {
        let half: f64 = self
            .grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(g, v)| (g[1] - g[0]) * (v[0] + v[1]) / 2.0)
            .sum();
        2.0 * (half + self.tail_at_max)
    }

    fn total_mass(&self) -> f64 {
        2.0 * (self.cumulative.last().unwrap() + self.tail_at_max)
    }

    fn locate(&self, x: f64) -> usize {
        (self.grid.partition_point(|&g| g <= x).max(1) - 1).min(self.grid.len() - 2)
    }

    /// `p₁(x)`.
    pub fn density(&self, x: f64) -> f64 {
        let x = x.abs();
        if x >= self.x_max() {
            return tail_series(self.alpha, x, SeriesKind::Density);
        }
        let i = self.locate(x);
        let (x0, x1) = (self.grid[i], self.grid[i + 1]);
        let h = x1 - x0;
        let s = (x - x0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        self.values[i] * (2.0 * s3 - 3.0 * s2 + 1.0)
            + h * self.slopes[i] * (s3 - 2.0 * s2 + s)
            + self.values[i + 1] * (-2.0 * s3 + 3.0 * s2)
            + h * self.slopes[i + 1] * (s3 - s2)
    }

    /// `∫₀^x p₁` for `0 ≤ x ≤ x_max`.
    fn partial_mass(&self, x: f64) -> f64 {
        let i = self.locate(x);
        let (x0, x1) = (self.grid[i], self.grid[i + 1]);
        let h = x1 - x0;
        let s = (x - x0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let s4 = s3 * s;
        self.cumulative[i]
            + h * (self.values[i] * (s4 / 2.0 - s3 + s)
                + h * self.slopes[i] * (s4 / 4.0 - 2.0 * s3 / 3.0 + s2 / 2.0)
                + self.values[i + 1] * (-s4 / 2.0 + s3)
                + h * self.slopes[i + 1] * (s4 / 4.0 - s3 / 3.0))
    }

    /// `P(X₁ > x)` for `x ≥ 0`.
    pub fn survival(&self, x: f64) -> f64 {
        if x >= self.x_max() {
            return tail_series(self.alpha, x, SeriesKind::Survival);
        }
        self.tail_at_max + (self.cumulative.last().unwrap() - self.partial_mass(x))
    }

    /// `P(X₁ ≤ x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x >= 0.0 {
            1.0 - self.survival(x)
        } else {
            self.survival(-x)
        }
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 24 * self.grid.len());
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&self.alpha.to_le_bytes());
        buf.extend_from_slice(&(self.grid.len() as u64).to_le_bytes());
        for v in self.grid.iter().chain(&self.values).chain(&self.slopes) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::Cache(e.to_string()))?;
        f.write_all(&buf).map_err(|e| Error::Cache(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| Error::Cache(e.to_string()))
    }

    pub fn read_cache(path: &Path, params: StableParams) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::Cache(e.to_string()))?;
        let word = |i: usize| -> Result<[u8; 8]> {
            buf.get(i..i + 8)
                .map(|s| s.try_into().unwrap())
                .ok_or_else(|| Error::Cache("truncated cache file".into()))
        };
        if &word(0)? != CACHE_MAGIC {
            return Err(Error::Cache("bad magic bytes".into()));
        }
        let alpha = f64::from_le_bytes(word(8)?);
        if alpha.to_bits() != params.alpha.to_bits() {
            return Err(Error::Cache(format!("cache holds alpha = {alpha}")));
        }
        let n = u64::from_le_bytes(word(16)?) as usize;
        if buf.len() != 24 + 24 * n || n < 2 {
            return Err(Error::Cache("cache length mismatch".into()));
        }
        let read = |k: usize| -> Vec<f64> {
            (0..n)
                .map(|i| f64::from_le_bytes(word(24 + 8 * (k * n + i)).unwrap()))
                .collect()
        };
        Self::from_parts(alpha, read(0), read(1), read(2))
    }

    /// Process-wide table for `params`, read from or written to the cache
    /// directory named by [`CACHE_ENV`] when it is set.
    pub fn shared(params: StableParams) -> Result<Arc<Self>> {
        static REGISTRY: OnceLock<Mutex<HashMap<u64, Arc<DensityTable>>>> = OnceLock::new();
        let reg = REGISTRY.get_or_init(|| Mutex::new(HashMap::new()));
        let key = params.alpha.to_bits();
        if let Some(t) = reg.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let table = Arc::new(Self::load_or_build(params, cache_dir().as_deref())?);
        Ok(reg.lock().unwrap().entry(key).or_insert(table).clone())
    }

    /// Reads the cached table when present, otherwise builds and stores it.
    pub fn load_or_build(params: StableParams, dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Self::build(params);
        };
        let path = dir.join(format!("density_{:016x}.bin", params.alpha.to_bits()));
        if let Ok(t) = Self::read_cache(&path, params) {
            return Ok(t);
        }
        let t = Self::build(params)?;
        // The cache is an optimisation; a read-only directory is not an error.
        if fs::create_dir_all(dir).is_ok() {
            let _ = t.write_cache(&path);
        }
        Ok(t)
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

/// Handle on the law of the motion: densities, distribution functions and
/// semigroup actions at any time.
#[derive(Debug, Clone)]
pub struct StableLaw {
    params: StableParams,
    table: Option<Arc<DensityTable>>,
}

impl StableLaw {
    pub fn new(params: StableParams) -> Result<Self> {
        let a = params.alpha;
        let table = if a == 1.0 || a == 2.0 {
            None
        } else {
            Some(DensityTable::shared(params)?)
        };
        Ok(Self { params, table })
    }

    pub fn params(&self) -> StableParams {
        self.params
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha
    }

    pub fn table(&self) -> Option<&DensityTable> {
        self.table.as_deref()
    }

    pub fn unit_density(&self, x: f64) -> f64 {
        match &self.table {
            Some(t) => t.density(x),
            None if self.params.alpha == 1.0 => 1.0 / (PI * (1.0 + x * x)),
            None => (-x * x / 4.0).exp() / (4.0 * PI).sqrt(),
        }
    }

    /// `P(X₁ > x)` for `x ≥ 0`.
    pub fn unit_survival(&self, x: f64) -> f64 {
        match &self.table {
            Some(t) => t.survival(x),
            None if self.params.alpha == 1.0 => (1.0 / x).atan() / PI,
            None => 0.5 * erfc(x / 2.0),
        }
    }

    pub fn unit_cdf(&self, x: f64) -> f64 {
        if x >= 0.0 {
            1.0 - self.unit_survival(x)
        } else {
            self.unit_survival(-x)
        }
    }

    /// `p_t(x) = t^{−1/α} p₁(t^{−1/α} x)`.
    pub fn density(&self, t: f64, x: f64) -> f64 {
        let s = self.params.scale_at(t);
        self.unit_density(x / s) / s
    }

    pub fn cdf(&self, t: f64, x: f64) -> f64 {
        if t == 0.0 {
            return if x >= 0.0 { 1.0 } else { 0.0 };
        }
        self.unit_cdf(x / self.params.scale_at(t))
    }

    /// `P(|X_t| > a)`.
    pub fn tail_mass(&self, t: f64, a: f64) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        2.0 * self.unit_survival(a / self.params.scale_at(t))
    }

    /// `C` in `p₁(x) ~ C|x|^{−1−α}`; zero for the Gaussian case.
    pub fn tail_constant(&self) -> f64 {
        let a = self.params.alpha;
        if a == 2.0 {
            0.0
        } else {
            gamma(a + 1.0) * (PI * a / 2.0).sin() / PI
        }
    }

    /// `(T_t f)(x) = E f(x + X_t)`.
    pub fn apply(&self, t: f64, f: &StepFunction, x: f64) -> f64 {
        if t == 0.0 {
            return f.eval(x);
        }
        let s = self.params.scale_at(t);
        f.pieces()
            .map(|(a, b, l)| l * (self.unit_cdf((b - x) / s) - self.unit_cdf((a - x) / s)))
            .sum()
    }

    /// `P(x + X_t ∈ [a, b))`, accurate far out in either tail.
    pub fn interval_mass(&self, t: f64, x: f64, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        if t == 0.0 {
            return if x >= a && x < b { 1.0 } else { 0.0 };
        }
        let s = self.params.scale_at(t);
        let (lo, hi) = ((a - x) / s, (b - x) / s);
        if lo >= 0.0 {
            self.unit_survival(lo) - self.unit_survival(hi)
        } else if hi <= 0.0 {
            self.unit_survival(-hi) - self.unit_survival(-lo)
        } else {
            1.0 - self.unit_survival(-lo) - self.unit_survival(hi)
        }
    }

    /// `∫ f T_t g` in real space. Slower than [`StableLaw::pair`] but keeps
    /// full relative accuracy when the supports are far apart.
    pub fn pair_direct(&self, t: f64, f: &StepFunction, g: &StepFunction) -> Result<f64> {
        let quad = Adaptive::new(0.0, 1e-10);
        let mut acc = 0.0;
        for (a, b, l) in f.pieces() {
            for (c, d, m) in g.pieces() {
                if l == 0.0 || m == 0.0 {
                    continue;
                }
                let mut pts = vec![a, b];
                pts.extend([c, d].into_iter().filter(|p| *p > a && *p < b));
                pts.sort_by(f64::total_cmp);
                let h = |x: f64| self.interval_mass(t, x, c, d);
                acc += l * m * quad.integrate(&h, &pts)?.value;
            }
        }
        Ok(acc)
    }

    /// `∫ f T_t g` through the Fourier representation.
    pub fn pair(&self, t: f64, f: &StepFunction, g: &StepFunction) -> Result<f64> {
        heat_pair(self.params.alpha, t, f, g)
    }
}

/// `(1/2π)∫ f̂ conj(ĝ) e^{−t|x|^α} dx`; the plain inner product at `t = 0`.
pub(crate) fn heat_pair(alpha: f64, t: f64, f: &StepFunction, g: &StepFunction) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(param(format!("time must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(f.l2_inner(g));
    }
    let combo = spectral_combo(f, g);
    let h = |x: f64| (-t * x.powf(alpha)).exp() / (x * x);
    let r: Integral = cosine_integral(&combo, &h, Shape::General, CosineOptions::default())?;
    Ok(r.value / PI)
}

/// `p_t(x)`.
pub fn density_at(params: StableParams, t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(param(format!("time must be positive, got {t}")));
    }
    Ok(StableLaw::new(params)?.density(t, x))
}

/// `P(|X_t| > a)`.
pub fn tail_mass(params: StableParams, t: f64, a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(param(format!("radius must be positive, got {a}")));
    }
    Ok(StableLaw::new(params)?.tail_mass(t, a))
}

/// `∫ f(x) (T_t g)(x) dx`.
pub fn semigroup_pair(params: StableParams, t: f64, f: &StepFunction, g: &StepFunction) -> Result<f64> {
    heat_pair(params.alpha, t, f, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Zolotarev's non-oscillatory representation of `p₁(x)`, `x > 0`, `α ≠ 1`.
    pub(crate) fn zolotarev(alpha: f64, x: f64) -> f64 {
        let e = alpha / (alpha - 1.0);
        let v = |th: f64| (th.cos() / (alpha * th).sin()).powf(e) * ((alpha - 1.0) * th).cos() / th.cos();
        let xe = x.powf(e);
        let f = |th: f64| {
            let vv = v(th);
            let r = vv * (-xe * vv).exp();
            if r.is_finite() {
                r
            } else {
                0.0
            }
        };
        let pts: Vec<f64> = (0..=64).map(|k| k as f64 * PI / 128.0).collect();
        let i = Adaptive::new(1e-17, 1e-13).integrate(&f, &pts).unwrap().value;
        alpha * x.powf(1.0 / (alpha - 1.0)) / (PI * (alpha - 1.0).abs()) * i
    }

    #[test]
    fn table_matches_zolotarev() {
        for &a in &[0.5, 0.75, 1.5, 1.8] {
            let t = DensityTable::build(StableParams::new(a).unwrap()).unwrap();
            for &x in &[0.01, 0.3, 1.0, 2.7, 9.0, 40.0, 150.0] {
                let got = t.density(x);
                let want = zolotarev(a, x);
                assert!((got - want).abs() < 1e-8 * want.max(1e-3), "alpha {a} x {x}: {got} vs {want}");
            }
            assert!((t.density(0.0) - gamma(1.0 + 1.0 / a) / PI).abs() < 1e-15);
            assert!((t.trapezoid_mass() - 1.0).abs() < 1e-6, "{}", t.trapezoid_mass());
        }
    }

    #[test]
    fn closed_forms() {
        let p = |a| StableParams::new(a).unwrap();
        assert!((density_at(p(1.0), 2.0, 0.0).unwrap() - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((density_at(p(2.0), 1.0, 0.0).unwrap() - 0.282_094_791_773_878).abs() < 1e-14);
        let c = tail_mass(p(1.0), 1.0, 10.0).unwrap();
        assert!((c - 2.0 / PI * (0.1f64).atan()).abs() < 1e-15);
        let g = tail_mass(p(2.0), 1.0, 6.0).unwrap();
        assert!((g - 2.209e-5).abs() < 1e-8, "{g}");
        let law = StableLaw::new(p(0.5)).unwrap();
        let asym = 2.0 * law.tail_constant() / 0.5 * 100f64.powf(-0.5);
        let tm = law.tail_mass(1.0, 100.0);
        assert!((tm / asym - 1.0).abs() < 0.05, "{tm} vs {asym}");
    }

    #[test]
    fn cdf_is_consistent_with_density() {
        let law = StableLaw::new(StableParams::new(1.5).unwrap()).unwrap();
        let (n, w) = crate::quad::gauss_legendre(40);
        for &(a, b) in &[(0.0, 0.5), (0.3, 3.0), (2.0, 30.0), (-1.0, 1.0)] {
            let mid = 0.5 * (a + b);
            let half = 0.5 * (b - a);
            let q: f64 = n.iter().zip(&w).map(|(u, w)| half * w * law.unit_density(mid + half * u)).sum();
            let d = law.unit_cdf(b) - law.unit_cdf(a);
            assert!((q - d).abs() < 1e-10, "[{a},{b}]: {q} vs {d}");
        }
    }

    #[test]
    fn cache_round_trip_is_bit_identical() {
        let p = StableParams::new(0.75).unwrap();
        let dir = std::env::temp_dir().join(format!("fbmlab-cache-{}", std::process::id()));
        let a = DensityTable::load_or_build(p, Some(&dir)).unwrap();
        let b = DensityTable::load_or_build(p, Some(&dir)).unwrap();
        let c = DensityTable::build(p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        for &x in &[0.1, 1.0, 17.0] {
            assert_eq!(b.density(x).to_bits(), c.density(x).to_bits());
        }
        assert!(DensityTable::read_cache(&dir.join("missing.bin"), p).is_err());
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn half_sampler_agrees_with_cms() {
        let p = StableParams::new(0.5).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let fast = StableSampler::new(p);
        let cms = StableSampler::cms_only(p);
        let mut a: Vec<f64> = (0..20_000).map(|_| fast.unit(&mut r1)).collect();
        let mut b: Vec<f64> = (0..20_000).map(|_| cms.unit(&mut r2)).collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        // 0.1% critical value for n = m = 20000.
        assert!(d < 1.95 * (2.0 / 20_000f64).sqrt(), "{d}");
    }

    #[test]
    fn rejects_bad_alpha() {
        assert!(StableParams::new(0.0).is_err());
        assert!(StableParams::new(2.5).is_err());
        assert!(StableParams::new(f64::NAN).is_err());
    }

    #[test]
    fn pair_at_zero_time_is_inner_product() {
        let f = StepFunction::indicator(0.0, 1.0).unwrap();
        let p = StableParams::new(0.7).unwrap();
        assert_eq!(semigroup_pair(p, 0.0, &f, &f).unwrap(), 1.0);
    }
}

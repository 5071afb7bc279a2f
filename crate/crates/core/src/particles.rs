//! Particle systems: initial configurations, one-step stable evolution,
//! occupation times and critical binary branching, observed through step
//! functions.
//!
//! Pairings with step functions only depend on how many particles (or how
//! much occupation time) fall in each interval between breakpoints, so every
//! simulator here produces binned values and [`Observable`] turns bins into
//! pairings.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{param, Error, Result};
use crate::kernels::ThetaLaw;
use crate::par;
use crate::quad::{gauss_legendre, Adaptive};
use crate::rng::{aux_rng, replicate_rng};
use crate::stable::{StableLaw, StableParams, StableSampler};
use crate::step::{merge_breakpoints, StepFunction, TestFamily};

/// Where the `k` particles of a cell go inside `[j, j + 1)`.
///
/// Points are placed independently of each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlacementRule {
    LeftEndpoint,
    UniformIid,
    Midpoint,
    /// Each point picks one of `offsets` (in `[0, 1)`) uniformly at random.
    Custom { offsets: Vec<f64> },
}

impl PlacementRule {
    pub fn validate(&self) -> Result<()> {
        if let Self::Custom { offsets } = self {
            if offsets.is_empty() || offsets.iter().any(|o| !(*o >= 0.0 && *o < 1.0)) {
                return Err(param("custom placement offsets must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    #[inline]
    fn offset<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::LeftEndpoint => 0.0,
            Self::Midpoint => 0.5,
            Self::UniformIid => rng.random(),
            Self::Custom { offsets } => offsets[rng.random_range(0..offsets.len())],
        }
    }

    /// Offsets and weights that integrate exactly against the offset law
    /// (Gauss–Legendre nodes for the uniform law).
    fn quadrature(&self) -> Vec<(f64, f64)> {
        match self {
            Self::LeftEndpoint => vec![(0.0, 1.0)],
            Self::Midpoint => vec![(0.5, 1.0)],
            Self::UniformIid => {
                let (x, w) = gauss_legendre(6);
                x.iter().zip(&w).map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).collect()
            }
            Self::Custom { offsets } => {
                let w = 1.0 / offsets.len() as f64;
                offsets.iter().map(|&o| (o, w)).collect()
            }
        }
    }

    fn mean_offset(&self) -> f64 {
        self.quadrature().iter().map(|(o, w)| o * w).sum()
    }

    fn is_symmetric(&self) -> bool {
        match self {
            Self::Midpoint | Self::UniformIid => true,
            Self::LeftEndpoint => false,
            Self::Custom { offsets } => {
                let mut a: Vec<f64> = offsets.clone();
                let mut b: Vec<f64> = offsets.iter().map(|o| 1.0 - o).collect();
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-15)
            }
        }
    }
}

/// The random point measure `ν_T` restricted to cells `j_min ≤ j ≤ j_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialConfig {
    pub theta: ThetaLaw,
    pub placement: PlacementRule,
    /// Cells are `[j, j + 1) / scale_t`.
    pub scale_t: f64,
    pub j_min: i64,
    pub j_max: i64,
}

impl InitialConfig {
    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.placement.validate()?;
        if !(self.scale_t > 0.0) || !self.scale_t.is_finite() {
            return Err(param(format!("scale T must be positive, got {}", self.scale_t)));
        }
        if self.j_max < self.j_min {
            return Err(param("cell window is empty"));
        }
        Ok(())
    }
}

/// Positions of `ν_T`: `θ_j` points per cell, placed, then divided by `T`.
pub fn build_initial<R: Rng + ?Sized>(cfg: &InitialConfig, rng: &mut R) -> Result<Vec<f64>> {
    cfg.validate()?;
    let theta = ThetaSampler::new(&cfg.theta);
    let mut out = Vec::new();
    for j in cfg.j_min..=cfg.j_max {
        for _ in 0..theta.sample(rng) {
            out.push((j as f64 + cfg.placement.offset(rng)) / cfg.scale_t);
        }
    }
    Ok(out)
}

/// Prebuilt sampler for the per-cell count.
#[derive(Debug, Clone)]
enum ThetaSampler {
    Fixed(u32),
    Poisson(Poisson<f64>),
    Table(Vec<f64>),
}

impl ThetaSampler {
    fn new(law: &ThetaLaw) -> Self {
        match law {
            ThetaLaw::Deterministic { count } => Self::Fixed(*count),
            ThetaLaw::Poisson { mean } => Self::Poisson(Poisson::new(*mean).expect("validated mean")),
            ThetaLaw::Custom { probs } => Self::Table(cumulative(probs)),
        }
    }

    #[inline]
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            Self::Fixed(k) => *k,
            Self::Poisson(d) => d.sample(rng) as u32,
            Self::Table(cdf) => pick(cdf, rng.random()) as u32,
        }
    }
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

/// Index `i` with `cdf[i−1] ≤ u < cdf[i]`; the last index absorbs rounding.
#[inline]
fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Pairings of binned values with a set of step functions.
#[derive(Debug, Clone)]
pub struct Observable {
    breaks: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl Observable {
    pub fn new(fns: &[StepFunction]) -> Result<Self> {
        let mut breaks: Vec<f64> = Vec::new();
        for f in fns {
            if !f.is_zero() {
                breaks = merge_breakpoints(&breaks, f.breakpoints());
            }
        }
        if breaks.len() < 2 {
            breaks = vec![0.0, 1.0];
        }
        let rows = fns
            .iter()
            .map(|f| breaks.windows(2).map(|w| f.eval(0.5 * (w[0] + w[1]))).collect())
            .collect();
        Ok(Self { breaks, rows })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breaks
    }

    pub fn bins(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Support `[first, last]` breakpoint.
    pub fn span(&self) -> (f64, f64) {
        (self.breaks[0], self.breaks[self.breaks.len() - 1])
    }

    pub fn max_level(&self) -> f64 {
        self.rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn pair(&self, bins: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().zip(bins).map(|(l, b)| l * b).sum())
            .collect()
    }

    #[inline]
    fn bin_of(&self, x: f64) -> Option<usize> {
        if x < self.breaks[0] || x >= self.breaks[self.breaks.len() - 1] {
            return None;
        }
        Some(self.breaks.partition_point(|&b| b <= x) - 1)
    }
}

/// Whole-family observable on a time grid: one row per `(family, t)`.
pub fn family_rows(families: &[TestFamily], grid: &[f64], scale: f64) -> Result<Vec<StepFunction>> {
    let mut out = Vec::new();
    for fam in families {
        for &t in grid {
            out.push(fam.at(t)?.rescale(scale)?);
        }
    }
    Ok(out)
}

/// `P(X_t > u)` and friends for a fixed time.
#[derive(Debug, Clone)]
struct Motion {
    law: StableLaw,
    sampler: StableSampler,
    scale: f64,
}

impl Motion {
    fn new(alpha: StableParams, time: f64) -> Result<Self> {
        if !(time > 0.0) {
            return Err(param(format!("evolution time must be positive, got {time}")));
        }
        Ok(Self {
            law: StableLaw::new(alpha)?,
            sampler: StableSampler::new(alpha),
            scale: alpha.scale_at(time),
        })
    }

    #[inline]
    fn surv(&self, u: f64) -> f64 {
        if u >= 0.0 {
            self.law.unit_survival(u / self.scale)
        } else {
            1.0 - self.law.unit_survival(-u / self.scale)
        }
    }

    #[inline]
    fn density(&self, u: f64) -> f64 {
        self.law.unit_density(u / self.scale) / self.scale
    }

    /// `P(y + X ∈ [a, b))`, accurate in both tails.
    #[inline]
    fn mass(&self, y: f64, a: f64, b: f64) -> f64 {
        if y >= b {
            self.surv(y - b) - self.surv(y - a)
        } else if y <= a {
            self.surv(a - y) - self.surv(b - y)
        } else {
            1.0 - self.surv(y - a) - self.surv(b - y)
        }
    }

    /// `max P(y + X ∈ I)` over intervals `I` of length `len` at distance `d`.
    fn landing_bound(&self, d: f64, len: f64) -> f64 {
        (self.surv(d)).min(len * self.density(d)).min(1.0)
    }

    /// `∫_{u1}^{u2} P(X > u) du` for `0 ≤ u1 ≤ u2`.
    fn surv_integral(&self, u1: f64, u2: f64) -> f64 {
        if u2 <= u1 {
            return 0.0;
        }
        let f = |u: f64| self.surv(u);
        let q = Adaptive::new(1e-300, 1e-10);
        let mut pts = vec![u1];
        let mut x = u1.max(self.scale);
        while x < u2 {
            if x > u1 {
                pts.push(x);
            }
            x *= 4.0;
        }
        pts.push(u2);
        q.integrate(&f, &pts).map(|r| r.value).unwrap_or(0.0)
    }

    /// `∫_{y1}^{y2} P(y + X ∈ [a, b)) dy` for a range entirely beyond `b`
    /// (`right`) or entirely before `a`.
    fn far_integral(&self, y1: f64, y2: f64, a: f64, b: f64, right: bool) -> f64 {
        if y2 <= y1 {
            return 0.0;
        }
        if right {
            self.surv_integral(y1 - b, y1 - a) - self.surv_integral(y2 - b, y2 - a)
        } else {
            self.surv_integral(a - y2, b - y2) - self.surv_integral(a - y1, b - y1)
        }
    }
}

/// Truncation policy for the cell window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowPolicy {
    /// Smallest window whose truncation budget is below `rel_tol` times the
    /// smallest target variance.
    Auto { rel_tol: f64 },
    /// Cells within `radius` (in space units) of the origin.
    Radius { radius: f64 },
}

impl Default for WindowPolicy {
    fn default() -> Self {
        Self::Auto { rel_tol: 1e-3 }
    }
}

const NEAR_BOUND: f64 = 0.1;
const BAND_RATIO: f64 = 1.25;
const MAX_RADIUS: f64 = 1e13;
const DIRECT_CELLS: f64 = 4e5;

/// A cell system evolved once by the stable motion and observed through
/// binned counts.
#[derive(Debug, Clone)]
pub struct CellSystem {
    theta: ThetaLaw,
    sampler: ThetaSampler,
    placement: PlacementRule,
    width: f64,
    j_lo: i64,
    j_hi: i64,
    motion: Motion,
}

/// A band of far cells sharing one landing-probability bound.
#[derive(Debug, Clone)]
struct Band {
    start: i64,
    end: i64,
    bound: f64,
    /// `P(cell has ≥ 1 candidate)`.
    hit: f64,
    /// Conditional cdf of the candidate count given at least one.
    counts: Vec<f64>,
}

/// Precomputed near window and far bands for one observable.
#[derive(Debug, Clone)]
pub struct Plan {
    near: (i64, i64),
    left: Vec<Band>,
    right: Vec<Band>,
}

impl CellSystem {
    /// Cells of width `width` with `j_lo ≤ j < j_hi`, evolved for `time`.
    pub fn new(
        theta: ThetaLaw,
        placement: PlacementRule,
        width: f64,
        j_lo: i64,
        j_hi: i64,
        alpha: StableParams,
        time: f64,
    ) -> Result<Self> {
        theta.validate()?;
        placement.validate()?;
        if !(width > 0.0) || j_hi <= j_lo {
            return Err(param("cell system needs positive width and a nonempty window"));
        }
        Ok(Self {
            sampler: ThetaSampler::new(&theta),
            theta,
            placement,
            width,
            j_lo,
            j_hi,
            motion: Motion::new(alpha, time)?,
        })
    }

    pub fn from_initial(cfg: &InitialConfig, alpha: StableParams, time: f64) -> Result<Self> {
        cfg.validate()?;
        Self::new(
            cfg.theta.clone(),
            cfg.placement.clone(),
            1.0 / cfg.scale_t,
            cfg.j_min,
            cfg.j_max + 1,
            alpha,
            time,
        )
    }

    /// Symmetric window of the given radius.
    pub fn with_radius(
        theta: ThetaLaw,
        placement: PlacementRule,
        width: f64,
        radius: f64,
        alpha: StableParams,
        time: f64,
    ) -> Result<Self> {
        if !(radius > 0.0) || radius > MAX_RADIUS {
            return Err(Error::Budget(format!("window radius {radius:e} is out of range")));
        }
        let j = (radius / width).ceil() as i64;
        Self::new(theta, placement, width, -j, j, alpha, time)
    }

    pub fn window(&self) -> (i64, i64) {
        (self.j_lo, self.j_hi)
    }

    pub fn radius(&self) -> f64 {
        (self.j_hi as f64 * self.width).max(-self.j_lo as f64 * self.width)
    }

    fn x(&self, j: i64, offset: f64) -> f64 {
        (j as f64 + offset) * self.width
    }

    /// Cells `[a, b)` whose points lie within `d` of `[lo, hi]`.
    fn cells_near(&self, lo: f64, hi: f64, d: f64) -> (i64, i64) {
        let a = (((lo - d) / self.width).floor() as i64 - 1).max(self.j_lo);
        let b = (((hi + d) / self.width).ceil() as i64 + 1).min(self.j_hi);
        (a, b.max(a))
    }

    fn direct_radius(&self, lo: f64, hi: f64) -> f64 {
        let want = (64.0 * self.motion.scale).max(8.0 * (hi - lo)).max(1000.0 * self.width);
        want.min(DIRECT_CELLS * self.width)
    }

    /// `Σ_j E_offset P(x_j + X ∈ [a, b))` over the window.
    pub fn mass_sum(&self, a: f64, b: f64) -> f64 {
        let quad = self.placement.quadrature();
        let d = self.direct_radius(a, b);
        let (ja, jb) = self.cells_near(a, b, d);
        let mut direct = 0.0;
        for j in ja..jb {
            for &(o, w) in &quad {
                direct += w * self.motion.mass(self.x(j, o), a, b);
            }
        }
        // Far cells by the midpoint rule in `j`.
        let shift = (self.placement.mean_offset() - 0.5) * self.width;
        let left = self.motion.far_integral(self.x(self.j_lo, 0.0) + shift, self.x(ja, 0.0) + shift, a, b, false);
        let right = self.motion.far_integral(self.x(jb, 0.0) + shift, self.x(self.j_hi, 0.0) + shift, a, b, true);
        direct + (left + right) / self.width
    }

    /// Expected binned counts.
    pub fn expected_bins(&self, obs: &Observable) -> Vec<f64> {
        let m = self.theta.mean();
        obs.breaks.windows(2).map(|w| m * self.mass_sum(w[0], w[1])).collect()
    }

    /// Exact covariance of the raw pairings divided by `norm²`:
    /// `Σ_j Eθ E c(x_j) + (Var θ − Eθ) E m_f(x_j) E m_g(x_j)`.
    pub fn covariance(&self, obs: &Observable, norm: f64) -> Vec<Vec<f64>> {
        let n = obs.len();
        let bins = obs.bins();
        let mean = self.theta.mean();
        let excess = self.theta.variance() - mean;
        let masses: Vec<f64> = obs.breaks.windows(2).map(|w| self.mass_sum(w[0], w[1])).collect();
        let mut cov = vec![vec![0.0; n]; n];
        for i in 0..n {
            for k in 0..n {
                let c: f64 = (0..bins).map(|b| obs.rows[i][b] * obs.rows[k][b] * masses[b]).sum();
                cov[i][k] = mean * c;
            }
        }
        if excess != 0.0 {
            let quad = self.placement.quadrature();
            let (lo, hi) = obs.span();
            let d = self.direct_radius(lo, hi);
            let (ja, jb) = self.cells_near(lo, hi, d);
            let mut acc = vec![vec![0.0; n]; n];
            let mut bm = vec![0.0; bins];
            let mut pm = vec![0.0; n];
            for j in ja..jb {
                pm.iter_mut().for_each(|v| *v = 0.0);
                for &(o, w) in &quad {
                    let y = self.x(j, o);
                    for (b, win) in obs.breaks.windows(2).enumerate() {
                        bm[b] = self.motion.mass(y, win[0], win[1]);
                    }
                    for (p, row) in pm.iter_mut().zip(&obs.rows) {
                        *p += w * row.iter().zip(&bm).map(|(l, m)| l * m).sum::<f64>();
                    }
                }
                for i in 0..n {
                    for k in i..n {
                        acc[i][k] += pm[i] * pm[k];
                    }
                }
            }
            let profile = |y: f64, row: &[f64]| -> f64 {
                obs.breaks
                    .windows(2)
                    .zip(row)
                    .map(|(w, l)| l * self.motion.mass(y, w[0], w[1]))
                    .sum()
            };
            // `∫ m_f m_g dy` over `sign · [r1, r2]`, with `y = sign · r1 e^s`.
            let far = |i: usize, k: usize, sign: f64, r1: f64, r2: f64| -> f64 {
                if !(r1 > 0.0) || r2 <= r1 {
                    return 0.0;
                }
                let g = |s: f64| {
                    let y = sign * r1 * s.exp();
                    profile(y, &obs.rows[i]) * profile(y, &obs.rows[k]) * y.abs()
                };
                let smax = (r2 / r1).ln();
                let mut pts: Vec<f64> = (0..).map(|k| 0.5 * k as f64).take_while(|&s| s < smax).collect();
                pts.push(smax);
                Adaptive::new(1e-300, 1e-9).integrate(&g, &pts).map(|r| r.value).unwrap_or(0.0)
            };
            let shift = (self.placement.mean_offset() - 0.5) * self.width;
            for i in 0..n {
                for k in i..n {
                    let right = far(i, k, 1.0, self.x(jb, 0.0) + shift, self.x(self.j_hi, 0.0) + shift);
                    let left = far(i, k, -1.0, -(self.x(ja, 0.0) + shift), -(self.x(self.j_lo, 0.0) + shift));
                    acc[i][k] += (right + left) / self.width;
                    acc[k][i] = acc[i][k];
                }
            }
            for i in 0..n {
                for k in 0..n {
                    cov[i][k] += excess * acc[i][k];
                }
            }
        }
        let n2 = norm * norm;
        cov.iter_mut().flatten().for_each(|v| *v /= n2);
        cov
    }

    /// Upper bound on the variance contributed by cells outside the window,
    /// per pairing, divided by `norm²`.
    pub fn truncation_budget(&self, obs: &Observable, norm: f64) -> f64 {
        let (lo, hi) = obs.span();
        let outside_right = self.motion.far_integral(self.x(self.j_hi, 0.0), f64::INFINITY.min(1e300), lo, hi, true);
        let outside_left = self.motion.far_integral(-1e300, self.x(self.j_lo, 0.0), lo, hi, false);
        let m = obs.max_level();
        let weight = self.theta.mean() + (self.theta.variance() - self.theta.mean()).abs();
        weight * m * m * (outside_left + outside_right) / self.width / (norm * norm)
    }

    pub fn plan(&self, obs: &Observable) -> Plan {
        let (lo, hi) = obs.span();
        let len = hi - lo;
        let mut r_near = 0.5 * self.motion.scale;
        while self.motion.landing_bound(r_near, len) > NEAR_BOUND {
            r_near *= 1.25;
        }
        let near = self.cells_near(lo, hi, r_near);
        let mut right = Vec::new();
        let mut start = near.1;
        while start < self.j_hi {
            let d = (self.x(start, 0.0) - hi).max(r_near);
            let mut end = ((hi + d * BAND_RATIO) / self.width).ceil() as i64;
            end = end.max(start + 1).min(self.j_hi);
            right.push(self.band(start, end, d, len));
            start = end;
        }
        let mut left = Vec::new();
        let mut end = near.0;
        while end > self.j_lo {
            let d = (lo - self.x(end, 0.0)).max(r_near);
            let mut start = ((lo - d * BAND_RATIO) / self.width).floor() as i64;
            start = start.min(end - 1).max(self.j_lo);
            left.push(self.band(start, end, d, len));
            end = start;
        }
        Plan { near, left, right }
    }

    fn band(&self, start: i64, end: i64, d: f64, len: f64) -> Band {
        let q = (self.motion.landing_bound(d, len) * (1.0 + 1e-9)).min(1.0);
        let (hit, counts) = thinned_counts(&self.theta, q);
        Band { start, end, bound: q, hit, counts }
    }

    fn sample_near<R: Rng + ?Sized>(&self, obs: &Observable, near: (i64, i64), bins: &mut [f64], rng: &mut R) {
        let s = self.motion.scale;
        for j in near.0..near.1 {
            for _ in 0..self.sampler.sample(rng) {
                let x = self.x(j, self.placement.offset(rng)) + s * self.motion.sampler.unit(rng);
                if let Some(b) = obs.bin_of(x) {
                    bins[b] += 1.0;
                }
            }
        }
    }

    fn sample_bands<R: Rng + ?Sized>(&self, obs: &Observable, bands: &[Band], bins: &mut [f64], rng: &mut R) {
        let br = &obs.breaks;
        let (lo, hi) = obs.span();
        for band in bands {
            if band.hit <= 0.0 {
                continue;
            }
            let log_miss = (-band.hit).ln_1p();
            let mut j = band.start;
            loop {
                if band.hit < 1.0 {
                    let u: f64 = 1.0 - rng.random::<f64>();
                    let skip = (u.ln() / log_miss).floor();
                    if skip >= (band.end - j) as f64 {
                        break;
                    }
                    j += skip as i64;
                }
                if j >= band.end {
                    break;
                }
                let k = 1 + pick(&band.counts, rng.random());
                for _ in 0..k {
                    let y = self.x(j, self.placement.offset(rng));
                    let v = rng.random::<f64>() * band.bound;
                    // Walk the bins inward from the side the particle sits on.
                    let n = br.len();
                    if y >= hi {
                        let base = self.motion.surv(y - hi);
                        for idx in (0..n - 1).rev() {
                            if v < base - self.motion.surv(y - br[idx]) {
                                bins[idx] += 1.0;
                                break;
                            }
                        }
                    } else {
                        let base = self.motion.surv(lo - y);
                        for idx in 0..n - 1 {
                            if v < base - self.motion.surv(br[idx + 1] - y) {
                                bins[idx] += 1.0;
                                break;
                            }
                        }
                    }
                }
                j += 1;
            }
        }
    }

    /// Binned counts after one evolution step, with independent streams for
    /// the near field and the two far sides.
    /// Binned counts of replicate `r` of the run seeded by `seed`.
    pub fn replicate(&self, obs: &Observable, plan: &Plan, seed: u64, r: u64) -> Vec<f64> {
        let mut rngs = [replicate_rng(seed, r), aux_rng(seed, r, 1), aux_rng(seed, r, 2)];
        self.sample_bins(obs, plan, &mut rngs)
    }

    pub fn sample_bins<R: Rng>(&self, obs: &Observable, plan: &Plan, rngs: &mut [R; 3]) -> Vec<f64> {
        let mut bins = vec![0.0; obs.bins()];
        let [near, left, right] = rngs;
        self.sample_near(obs, plan.near, &mut bins, near);
        self.sample_bands(obs, &plan.left, &mut bins, left);
        self.sample_bands(obs, &plan.right, &mut bins, right);
        bins
    }
}

/// Thinned count law: `K | θ ~ Binomial(θ, q)`. Returns `P(K ≥ 1)` and the
/// cdf of `K − 1` given `K ≥ 1`.
fn thinned_counts(theta: &ThetaLaw, q: f64) -> (f64, Vec<f64>) {
    if q <= 0.0 {
        return (0.0, vec![1.0]);
    }
    let binom = |n: u64, k: u64| -> f64 {
        if k > n {
            return 0.0;
        }
        if q >= 1.0 {
            return if k == n { 1.0 } else { 0.0 };
        }
        (ln_binomial(n, k) + k as f64 * q.ln() + (n - k) as f64 * (-q).ln_1p()).exp()
    };
    let miss_all = |n: u64| -> f64 { -((n as f64) * (-q).ln_1p()).exp_m1() };
    let (hit, pmf): (f64, Vec<f64>) = match theta {
        ThetaLaw::Deterministic { count } => {
            let n = *count as u64;
            (if q >= 1.0 { f64::from(u8::from(n > 0)) } else { miss_all(n) }, (1..=n).map(|k| binom(n, k)).collect())
        }
        ThetaLaw::Poisson { mean } => {
            let m = mean * q;
            let hit = -(-m).exp_m1();
            let mut pmf = Vec::new();
            let mut p = (-m).exp();
            let mut acc = 0.0;
            for k in 1..10_000u64 {
                p *= m / k as f64;
                pmf.push(p);
                acc += p;
                if acc >= hit * (1.0 - 1e-16) || p < 1e-300 {
                    break;
                }
            }
            (hit, pmf)
        }
        ThetaLaw::Custom { probs } => {
            let top = probs.len() as u64;
            let hit: f64 = probs
                .iter()
                .enumerate()
                .map(|(n, p)| if q >= 1.0 { p * f64::from(u8::from(n > 0)) } else { p * miss_all(n as u64) })
                .sum();
            let pmf = (1..top)
                .map(|k| probs.iter().enumerate().map(|(n, p)| p * binom(n as u64, k)).sum())
                .collect();
            (hit, pmf)
        }
    };
    if hit <= 0.0 || pmf.is_empty() {
        return (0.0, vec![1.0]);
    }
    let total: f64 = pmf.iter().sum();
    let mut cdf = cumulative(&pmf.iter().map(|p| p / total).collect::<Vec<_>>());
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    (hit, cdf)
}

/// Occupation times of a Poisson system on a time grid.
///
/// Particles start as a Poisson field of the given intensity and each moves
/// by the stable motion; the occupation of a set is the left Riemann sum
/// `Σ_{k<K} dt 1(x(k dt) ∈ ·)` with `K dt = horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupationModel {
    pub intensity: f64,
    pub alpha: StableParams,
    pub horizon: f64,
    pub dt: f64,
}

impl OccupationModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(param(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.intensity > 0.0) || !(self.horizon > 0.0) {
            return Err(param("intensity and horizon must be positive"));
        }
        self.steps().map(|_| ())
    }

    /// `K = horizon / dt`, which must be an integer.
    pub fn steps(&self) -> Result<usize> {
        let k = (self.horizon / self.dt).round();
        if k < 1.0 || (k * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(param(format!(
                "horizon {} is not a whole number of steps of {}",
                self.horizon, self.dt
            )));
        }
        Ok(k as usize)
    }

    /// Binned occupation of one replicate.
    ///
    /// Only particles that visit the support of `obs` matter. Sorted by the
    /// first step at which they are inside, they form a Poisson process; by
    /// reversibility of the walk under Lebesgue measure, a particle first
    /// inside at step `k` at `z` has the law of a walk from `z` that stays
    /// outside for `k` steps when run backwards. Candidates are drawn
    /// uniformly on the support and kept when their backward walk avoids it.
    pub fn sample_bins<R: Rng + ?Sized>(&self, obs: &Observable, rng: &mut R) -> Result<Vec<f64>> {
        let k_steps = self.steps()?;
        let sampler = StableSampler::new(self.alpha);
        let step = self.alpha.scale_at(self.dt);
        let (lo, hi) = obs.span();
        let len = hi - lo;
        let inside = |x: f64| x >= lo && x < hi;
        let mut bins = vec![0.0; obs.bins()];
        let forward = |mut x: f64, from: usize, rng: &mut R, bins: &mut [f64]| {
            for k in from..k_steps {
                if k > from {
                    x += step * sampler.unit(rng);
                }
                if let Some(b) = obs.bin_of(x) {
                    bins[b] += self.dt;
                }
            }
        };
        let n0 = Poisson::new(self.intensity * len).map_err(|e| param(e.to_string()))?.sample(rng) as u64;
        for _ in 0..n0 {
            let z = lo + len * rng.random::<f64>();
            forward(z, 0, rng, &mut bins);
        }
        if k_steps > 1 {
            let mean = self.intensity * len * (k_steps - 1) as f64;
            let n = Poisson::new(mean).map_err(|e| param(e.to_string()))?.sample(rng) as u64;
            for _ in 0..n {
                let k = rng.random_range(1..k_steps);
                let z = lo + len * rng.random::<f64>();
                let mut x = z;
                let mut clear = true;
                for _ in 0..k {
                    x += step * sampler.unit(rng);
                    if inside(x) {
                        clear = false;
                        break;
                    }
                }
                if clear {
                    forward(z, k, rng, &mut bins);
                }
            }
        }
        Ok(bins)
    }

    /// `E` of each binned occupation: `intensity · horizon · |bin|`.
    pub fn expected_bins(&self, obs: &Observable) -> Vec<f64> {
        obs.breaks
            .windows(2)
            .map(|w| self.intensity * self.horizon * (w[1] - w[0]))
            .collect()
    }
}

/// Critical binary branching at rate `V`: at each event a particle is
/// replaced by 0 or 2 particles at its position, each with probability ½.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchingSpec {
    pub enabled: bool,
    pub rate_v: f64,
}

impl BranchingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.rate_v > 0.0 && self.rate_v.is_finite()) {
            return Err(param(format!("branching rate must be positive, got {}", self.rate_v)));
        }
        Ok(())
    }
}

/// Default cap on the number of particles in one genealogy.
pub const POPULATION_CAP: usize = 1_000_000;

/// Runs the branching system started from one particle at `x` and calls
/// `visit(i, position)` for every particle alive at each query time
/// `times[i]` (sorted, nonnegative). Returns the number of particles created.
pub fn evolve_branching<R: Rng + ?Sized>(
    x: f64,
    alpha: StableParams,
    rate_v: f64,
    times: &[f64],
    rng: &mut R,
    cap: usize,
    mut visit: impl FnMut(usize, f64),
) -> Result<usize> {
    if !(rate_v > 0.0) {
        return Err(param(format!("branching rate must be positive, got {rate_v}")));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(param("query times must be sorted and nonnegative"));
    }
    let Some(&last) = times.last() else {
        return Ok(1);
    };
    let sampler = StableSampler::new(alpha);
    let clock = Exp::new(rate_v).map_err(|e| param(e.to_string()))?;
    let inv = 1.0 / alpha.alpha();
    let mut stack = vec![(x, 0.0f64)];
    let mut created = 1usize;
    while let Some((mut pos, born)) = stack.pop() {
        let death = born + clock.sample(rng);
        let mut now = born;
        let mut i = times.partition_point(|&t| t < born);
        while i < times.len() && times[i] < death {
            let dt = times[i] - now;
            if dt > 0.0 {
                pos += dt.powf(inv) * sampler.unit(rng);
            }
            now = times[i];
            visit(i, pos);
            i += 1;
        }
        if death > last {
            continue;
        }
        pos += (death - now).powf(inv) * sampler.unit(rng);
        if rng.random::<bool>() {
            created += 2;
            if created > cap {
                return Err(Error::Budget(format!("branching population exceeded {cap} particles")));
            }
            stack.push((pos, death));
            stack.push((pos, death));
        }
    }
    Ok(created)
}

/// Occupation fluctuations of a branching system with Poisson ancestors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchingOccupationModel {
    /// Ancestor intensity `H`.
    pub intensity: f64,
    pub rate_v: f64,
    pub alpha: StableParams,
    pub horizon: f64,
    pub dt: f64,
    /// Ancestors are placed on `[−radius, radius]`.
    pub radius: f64,
    /// Cap on the expected number of ancestors per replicate.
    pub max_ancestors: f64,
}

impl BranchingOccupationModel {
    pub fn validate(&self) -> Result<()> {
        let a = self.alpha.alpha();
        if !(a > 0.5 && a < 1.5) {
            return Err(param(format!(
                "branching occupation needs alpha in (1/2, 3/2), got {a}"
            )));
        }
        BranchingSpec { enabled: true, rate_v: self.rate_v }.validate()?;
        self.grid_model().validate()?;
        if !(self.radius > 0.0) {
            return Err(param("ancestor window radius must be positive"));
        }
        let expected = 2.0 * self.radius * self.intensity;
        if expected > self.max_ancestors {
            return Err(Error::Budget(format!(
                "{expected:.0} expected ancestors per replicate exceeds the budget of {}",
                self.max_ancestors
            )));
        }
        Ok(())
    }

    fn grid_model(&self) -> OccupationModel {
        OccupationModel {
            intensity: self.intensity,
            alpha: self.alpha,
            horizon: self.horizon,
            dt: self.dt,
        }
    }

    /// `√(T V H)`.
    pub fn normalization(&self) -> f64 {
        (self.horizon * self.rate_v * self.intensity).sqrt()
    }

    pub fn sample_bins<R: Rng + ?Sized>(&self, obs: &Observable, rng: &mut R) -> Result<Vec<f64>> {
        let k_steps = self.grid_model().steps()?;
        let times: Vec<f64> = (0..k_steps).map(|k| k as f64 * self.dt).collect();
        let n = Poisson::new(2.0 * self.radius * self.intensity)
            .map_err(|e| param(e.to_string()))?
            .sample(rng) as u64;
        let mut bins = vec![0.0; obs.bins()];
        for _ in 0..n {
            let x = self.radius * (2.0 * rng.random::<f64>() - 1.0);
            evolve_branching(x, self.alpha, self.rate_v, &times, rng, POPULATION_CAP, |_, y| {
                if let Some(b) = obs.bin_of(y) {
                    bins[b] += self.dt;
                }
            })?;
        }
        Ok(bins)
    }
}

/// Descriptive metadata attached to every batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub model: String,
    pub scale_t: f64,
    pub alpha: f64,
    pub theta: Option<ThetaLaw>,
    pub family: String,
    pub seed: u64,
    /// Divisor applied to the centered pairings.
    pub normalization: f64,
    pub truncation_budget: f64,
    pub window_radius: Option<f64>,
}

/// One replicate: pairings at each grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationSample {
    pub values: Vec<f64>,
    pub meta: SampleMeta,
}

/// Replicates of one observable on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationBatch {
    pub meta: SampleMeta,
    pub grid: Vec<f64>,
    /// `values[r][i]` is replicate `r` at `grid[i]`.
    pub values: Vec<Vec<f64>>,
}

impl FluctuationBatch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Columns `replicate,t,value`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "replicate,t,value")?;
        for (r, row) in self.values.iter().enumerate() {
            for (t, v) in self.grid.iter().zip(row) {
                writeln!(out, "{r},{t},{v:e}")?;
            }
        }
        Ok(())
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "meta": self.meta,
            "grid": self.grid,
            "replicates": self.values.len(),
        })
    }

    /// Replicate `r` as a single sample.
    pub fn sample(&self, r: usize) -> Option<FluctuationSample> {
        self.values.get(r).map(|v| FluctuationSample { values: v.clone(), meta: self.meta.clone() })
    }

    /// The increments `X(t_j) − X(t_i)` of every replicate.
    pub fn increments(&self, i: usize, j: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[j] - v[i]).collect()
    }
}

/// Replicate count and master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub replicates: usize,
    pub seed: u64,
}

/// Centered, normalized pairings for every replicate, one row per
/// observable function.
fn run_binned<F>(obs: &Observable, mean: &[f64], norm: f64, run: RunSpec, draw: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync + Send,
{
    let expected = obs.pair(mean);
    par::try_map_indexed(run.replicates, |r| {
        let bins = draw(r as u64)?;
        Ok(obs
            .pair(&bins)
            .iter()
            .zip(&expected)
            .map(|(v, e)| (v - e) / norm)
            .collect())
    })
}

/// Splits per-replicate rows (families × grid) into one batch per family.
fn split_families(rows: Vec<Vec<f64>>, families: &[TestFamily], grid: &[f64], meta: &SampleMeta) -> Vec<FluctuationBatch> {
    let g = grid.len();
    families
        .iter()
        .enumerate()
        .map(|(f, fam)| FluctuationBatch {
            meta: SampleMeta { family: fam.name().to_string(), ..meta.clone() },
            grid: grid.to_vec(),
            values: rows.iter().map(|r| r[f * g..(f + 1) * g].to_vec()).collect(),
        })
        .collect()
}

/// Output of a cell-system experiment: one batch per family plus the exact
/// finite-system covariance of each family's pairings.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub batches: Vec<FluctuationBatch>,
    pub exact: Vec<Vec<Vec<f64>>>,
    pub truncation_budget: f64,
    pub window_radius: f64,
}

/// Parameters of a cell-system experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellExperiment {
    pub model: String,
    pub theta: ThetaLaw,
    pub placement: PlacementRule,
    /// Cell width.
    pub width: f64,
    pub alpha: StableParams,
    /// Functions are `ψ_t(· / rescale)`.
    pub rescale: f64,
    pub normalization: f64,
    pub window: WindowPolicy,
    pub scale_t: f64,
}

impl CellExperiment {
    /// `(N₁ − E N₁)/√T` for cells of width `1/T`.
    pub fn density(theta: ThetaLaw, placement: PlacementRule, scale_t: f64, alpha: StableParams, window: WindowPolicy) -> Self {
        Self {
            model: "density".into(),
            theta,
            placement,
            width: 1.0 / scale_t,
            alpha,
            rescale: 1.0,
            normalization: scale_t.sqrt(),
            window,
            scale_t,
        }
    }

    /// `(⟨N₁, φ(·/T)⟩ − E)/√(T^{1−α})` for unit cells; requires `α < 1`.
    pub fn rescaled_lattice(count: u32, placement: PlacementRule, scale_t: f64, alpha: StableParams, window: WindowPolicy) -> Result<Self> {
        if alpha.alpha() >= 1.0 {
            return Err(param(format!(
                "the rescaled lattice field needs alpha < 1, got {}",
                alpha.alpha()
            )));
        }
        Ok(Self {
            model: "rescaled_lattice".into(),
            theta: ThetaLaw::Deterministic { count },
            placement,
            width: 1.0,
            alpha,
            rescale: scale_t,
            normalization: scale_t.powf(1.0 - alpha.alpha()).sqrt(),
            window,
            scale_t,
        })
    }

    /// The system for a given window radius.
    pub fn system(&self, radius: f64) -> Result<CellSystem> {
        CellSystem::with_radius(self.theta.clone(), self.placement.clone(), self.width, radius, self.alpha, 1.0)
    }

    /// Resolves the window policy for the given observable.
    pub fn resolve_window(&self, obs: &Observable) -> Result<CellSystem> {
        let (lo, hi) = obs.span();
        let reach = lo.abs().max(hi.abs());
        match self.window {
            WindowPolicy::Radius { radius } => {
                if radius < reach {
                    return Err(param(format!("window radius {radius} does not cover the support (±{reach})")));
                }
                self.system(radius)
            }
            WindowPolicy::Auto { rel_tol } => {
                let base = self.system(reach)?;
                let d = base.direct_radius(lo, hi);
                let provisional = self.system(reach + d)?;
                let cov = provisional.covariance(obs, self.normalization);
                let reference = (0..obs.len()).map(|i| cov[i][i]).filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
                if !reference.is_finite() {
                    return Ok(provisional);
                }
                let mut radius = reach + d;
                loop {
                    let sys = self.system(radius)?;
                    if sys.truncation_budget(obs, self.normalization) <= rel_tol * reference {
                        return Ok(sys);
                    }
                    radius *= 2.0;
                    if radius > MAX_RADIUS {
                        return Err(Error::Budget(format!(
                            "no window below radius {MAX_RADIUS:e} meets the truncation tolerance {rel_tol}"
                        )));
                    }
                }
            }
        }
    }

    /// Simulates every family on `grid` from one set of particles.
    pub fn run(&self, families: &[TestFamily], grid: &[f64], run: RunSpec) -> Result<CellRun> {
        check_grid(grid)?;
        let fns = family_rows(families, grid, self.rescale)?;
        let obs = Observable::new(&fns)?;
        let sys = self.resolve_window(&obs)?;
        let plan = sys.plan(&obs);
        let mean = sys.expected_bins(&obs);
        let budget = sys.truncation_budget(&obs, self.normalization);
        let rows = run_binned(&obs, &mean, self.normalization, run, |r| Ok(sys.replicate(&obs, &plan, run.seed, r)))?;
        let full = sys.covariance(&obs, self.normalization);
        let g = grid.len();
        let exact = (0..families.len())
            .map(|f| (0..g).map(|i| (0..g).map(|k| full[f * g + i][f * g + k]).collect()).collect())
            .collect();
        let meta = SampleMeta {
            model: self.model.clone(),
            scale_t: self.scale_t,
            alpha: self.alpha.alpha(),
            theta: Some(self.theta.clone()),
            family: String::new(),
            seed: run.seed,
            normalization: self.normalization,
            truncation_budget: budget,
            window_radius: Some(sys.radius()),
        };
        Ok(CellRun {
            batches: split_families(rows, families, grid, &meta),
            exact,
            truncation_budget: budget,
            window_radius: sys.radius(),
        })
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid[0] <= 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(param("time grid must be positive and strictly increasing"));
    }
    Ok(())
}

fn cell_system_for(cfg: &InitialConfig, alpha: StableParams) -> Result<CellSystem> {
    CellSystem::from_initial(cfg, alpha, 1.0)
}

fn seeded_streams<R: Rng + ?Sized>(rng: &mut R) -> [ChaCha8Rng; 3] {
    [
        ChaCha8Rng::seed_from_u64(rng.random()),
        ChaCha8Rng::seed_from_u64(rng.random()),
        ChaCha8Rng::seed_from_u64(rng.random()),
    ]
}

fn single_sample(
    sys: &CellSystem,
    fns: &[StepFunction],
    norm: f64,
    meta: SampleMeta,
    rng: &mut (impl Rng + ?Sized),
) -> Result<FluctuationSample> {
    let obs = Observable::new(fns)?;
    let plan = sys.plan(&obs);
    let mean = obs.pair(&sys.expected_bins(&obs));
    let mut rngs = seeded_streams(rng);
    let bins = sys.sample_bins(&obs, &plan, &mut rngs);
    let values = obs.pair(&bins).iter().zip(&mean).map(|(v, m)| (v - m) / norm).collect();
    Ok(FluctuationSample {
        values,
        meta: SampleMeta { truncation_budget: sys.truncation_budget(&obs, norm), ..meta },
    })
}

/// One replicate of `⟨X_T(1), ψ_t⟩` for the cells of `cfg`.
pub fn density_fluctuation<R: Rng + ?Sized>(
    cfg: &InitialConfig,
    alpha: StableParams,
    family: &TestFamily,
    grid: &[f64],
    rng: &mut R,
) -> Result<FluctuationSample> {
    check_grid(grid)?;
    let sys = cell_system_for(cfg, alpha)?;
    let fns = family_rows(std::slice::from_ref(family), grid, 1.0)?;
    let meta = SampleMeta {
        model: "density".into(),
        scale_t: cfg.scale_t,
        alpha: alpha.alpha(),
        theta: Some(cfg.theta.clone()),
        family: family.name().into(),
        seed: 0,
        normalization: cfg.scale_t.sqrt(),
        truncation_budget: 0.0,
        window_radius: None,
    };
    single_sample(&sys, &fns, cfg.scale_t.sqrt(), meta, rng)
}

/// One replicate of `⟨Z_T, ψ_t⟩`: unit cells with a fixed count, functions
/// stretched by `T`, normalized by `√(T^{1−α})`.
pub fn rescaled_z<R: Rng + ?Sized>(
    cfg: &InitialConfig,
    alpha: StableParams,
    family: &TestFamily,
    grid: &[f64],
    scale_t: f64,
    rng: &mut R,
) -> Result<FluctuationSample> {
    check_grid(grid)?;
    if alpha.alpha() >= 1.0 {
        return Err(param(format!("the rescaled lattice field needs alpha < 1, got {}", alpha.alpha())));
    }
    if !matches!(cfg.theta, ThetaLaw::Deterministic { .. }) {
        return Err(param("the rescaled lattice field needs a fixed count per cell"));
    }
    let unit = InitialConfig { scale_t: 1.0, ..cfg.clone() };
    let sys = cell_system_for(&unit, alpha)?;
    let fns = family_rows(std::slice::from_ref(family), grid, scale_t)?;
    let norm = scale_t.powf(1.0 - alpha.alpha()).sqrt();
    let meta = SampleMeta {
        model: "rescaled_lattice".into(),
        scale_t,
        alpha: alpha.alpha(),
        theta: Some(cfg.theta.clone()),
        family: family.name().into(),
        seed: 0,
        normalization: norm,
        truncation_budget: 0.0,
        window_radius: None,
    };
    single_sample(&sys, &fns, norm, meta, rng)
}

/// One replicate of `Y_T(1)` paired with `ψ_t`, normalized by `√T`.
pub fn occupation_y<R: Rng + ?Sized>(
    intensity: f64,
    alpha: StableParams,
    family: &TestFamily,
    grid: &[f64],
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<FluctuationSample> {
    check_grid(grid)?;
    let model = OccupationModel { intensity, alpha, horizon, dt };
    model.validate()?;
    let obs = Observable::new(&family_rows(std::slice::from_ref(family), grid, 1.0)?)?;
    let norm = horizon.sqrt();
    let mean = obs.pair(&model.expected_bins(&obs));
    let bins = model.sample_bins(&obs, rng)?;
    Ok(FluctuationSample {
        values: obs.pair(&bins).iter().zip(&mean).map(|(v, m)| (v - m) / norm).collect(),
        meta: SampleMeta {
            model: "occupation".into(),
            scale_t: horizon,
            alpha: alpha.alpha(),
            theta: None,
            family: family.name().into(),
            seed: 0,
            normalization: norm,
            truncation_budget: 0.0,
            window_radius: None,
        },
    })
}

/// Batch version of [`occupation_y`] for several families at once.
pub fn occupation_batches(model: &OccupationModel, families: &[TestFamily], grid: &[f64], run: RunSpec) -> Result<Vec<FluctuationBatch>> {
    check_grid(grid)?;
    model.validate()?;
    let obs = Observable::new(&family_rows(families, grid, 1.0)?)?;
    let norm = model.horizon.sqrt();
    let mean = model.expected_bins(&obs);
    let rows = run_binned(&obs, &mean, norm, run, |r| model.sample_bins(&obs, &mut replicate_rng(run.seed, r)))?;
    let meta = SampleMeta {
        model: "occupation".into(),
        scale_t: model.horizon,
        alpha: model.alpha.alpha(),
        theta: None,
        family: String::new(),
        seed: run.seed,
        normalization: norm,
        truncation_budget: 0.0,
        window_radius: None,
    };
    Ok(split_families(rows, families, grid, &meta))
}

/// One replicate of the branching occupation field paired with `ψ_t` for an
/// odd family, normalized by `√(T V H)`.
pub fn branching_occupation_y<R: Rng + ?Sized>(
    model: &BranchingOccupationModel,
    family: &TestFamily,
    grid: &[f64],
    rng: &mut R,
) -> Result<FluctuationSample> {
    check_grid(grid)?;
    model.validate()?;
    if !family.is_odd() {
        return Err(param("branching occupation is defined for odd families only"));
    }
    let obs = Observable::new(&family_rows(std::slice::from_ref(family), grid, 1.0)?)?;
    let norm = model.normalization();
    let bins = model.sample_bins(&obs, rng)?;
    Ok(FluctuationSample {
        values: obs.pair(&bins).iter().map(|v| v / norm).collect(),
        meta: branching_meta(model, family.name(), 0),
    })
}

fn branching_meta(model: &BranchingOccupationModel, family: &str, seed: u64) -> SampleMeta {
    SampleMeta {
        model: "occupation_branching".into(),
        scale_t: model.horizon,
        alpha: model.alpha.alpha(),
        theta: None,
        family: family.into(),
        seed,
        normalization: model.normalization(),
        truncation_budget: 0.0,
        window_radius: Some(model.radius),
    }
}

/// Batch version of [`branching_occupation_y`].
pub fn branching_occupation_batch(
    model: &BranchingOccupationModel,
    family: &TestFamily,
    grid: &[f64],
    run: RunSpec,
) -> Result<FluctuationBatch> {
    check_grid(grid)?;
    model.validate()?;
    if !family.is_odd() {
        return Err(param("branching occupation is defined for odd families only"));
    }
    let obs = Observable::new(&family_rows(std::slice::from_ref(family), grid, 1.0)?)?;
    let zero = vec![0.0; obs.bins()];
    let values = run_binned(&obs, &zero, model.normalization(), run, |r| {
        model.sample_bins(&obs, &mut replicate_rng(run.seed, r))
    })?;
    Ok(FluctuationBatch {
        meta: branching_meta(model, family.name(), run.seed),
        grid: grid.to_vec(),
        values,
    })
}

/// Whether the centering of `family` vanishes by symmetry for a system
/// whose cells are symmetric about the origin.
pub fn centering_vanishes(family: &TestFamily, placement: &PlacementRule) -> bool {
    family.is_odd() && placement.is_symmetric()
}

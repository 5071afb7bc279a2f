//! Adaptive Gauss–Kronrod quadrature, Wynn epsilon extrapolation and the
//! cosine-difference integrals that every spectral covariance in this crate
//! reduces to.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use crate::error::{Error, Result};

// 21-point Kronrod extension of the 10-point Gauss rule (QUADPACK qk21).
#[allow(clippy::excessive_precision)]
const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_208_175_205_075,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

/// Value of an integral together with an error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
}

/// Single 21-point Kronrod panel; the error is |K21 − G10|.
pub fn gk21<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, b: f64) -> Integral {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut resk = f(c) * WGK[10];
    let mut resg = 0.0;
    for j in 0..10 {
        let dx = h * XGK[j];
        let pair = f(c - dx) + f(c + dx);
        resk += WGK[j] * pair;
        if j % 2 == 1 {
            resg += WG[j / 2] * pair;
        }
    }
    Integral {
        value: resk * h,
        error: ((resk - resg) * h).abs(),
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    est: Integral,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.est.error == other.est.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.est.error.total_cmp(&other.est.error)
    }
}

/// Globally adaptive bisection driven by the segment with the largest error.
#[derive(Debug, Clone, Copy)]
pub struct Adaptive {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_segments: usize,
}

impl Default for Adaptive {
    fn default() -> Self {
        Self {
            abs_tol: 1e-13,
            rel_tol: 1e-11,
            max_segments: 200_000,
        }
    }
}

impl Adaptive {
    pub fn new(abs_tol: f64, rel_tol: f64) -> Self {
        Self {
            abs_tol,
            rel_tol,
            ..Self::default()
        }
    }

    /// Integrates over `[points[0], points[last]]`, seeding the partition with
    /// every interior point.
    pub fn integrate<F: Fn(f64) -> f64 + ?Sized>(&self, f: &F, points: &[f64]) -> Result<Integral> {
        if points.len() < 2 {
            return Ok(Integral { value: 0.0, error: 0.0 });
        }
        let mut heap = BinaryHeap::with_capacity(points.len() * 2);
        let mut frozen: Vec<Segment> = Vec::new();
        let mut total_err = 0.0;
        let mut scale = 0.0;
        for w in points.windows(2) {
            if w[1] <= w[0] {
                continue;
            }
            let est = gk21(f, w[0], w[1]);
            total_err += est.error;
            scale += est.value.abs();
            heap.push(Segment { a: w[0], b: w[1], est });
        }
        let mut running: f64 = heap.iter().map(|s| s.est.value).sum();
        loop {
            let tol = self.abs_tol.max(self.rel_tol * running.abs().max(1e-3 * scale));
            if total_err <= tol {
                let value = sum_segments(heap.iter().chain(frozen.iter()));
                return Ok(Integral { value, error: total_err });
            }
            if heap.len() + frozen.len() >= self.max_segments {
                return Err(Error::Numeric {
                    message: format!("segment limit {} reached", self.max_segments),
                    residual: total_err,
                });
            }
            let Some(worst) = heap.pop() else {
                // Every remaining segment is at machine resolution.
                let value = sum_segments(frozen.iter());
                return Ok(Integral { value, error: total_err });
            };
            let mid = 0.5 * (worst.a + worst.b);
            if !(mid > worst.a && mid < worst.b) || (worst.b - worst.a) < 1e-14 * worst.a.abs().max(1e-300) {
                frozen.push(worst);
                continue;
            }
            let left = gk21(f, worst.a, mid);
            let right = gk21(f, mid, worst.b);
            total_err += left.error + right.error - worst.est.error;
            running += left.value + right.value - worst.est.value;
            if !total_err.is_finite() || !left.value.is_finite() || !right.value.is_finite() {
                return Err(Error::Numeric {
                    message: "non-finite integrand value".into(),
                    residual: f64::INFINITY,
                });
            }
            heap.push(Segment { a: worst.a, b: mid, est: left });
            heap.push(Segment { a: mid, b: worst.b, est: right });
        }
    }
}

fn sum_segments<'a>(segs: impl Iterator<Item = &'a Segment>) -> f64 {
    // Neumaier summation; panel counts reach 10^5 in the long-range kernels.
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for s in segs {
        let v = s.est.value;
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Wynn epsilon accelerator for a sequence of partial sums.
#[derive(Debug, Default, Clone)]
pub struct Wynn {
    diag: Vec<f64>,
}

impl Wynn {
    /// Feeds the next partial sum and returns the current limit estimate.
    pub fn push(&mut self, partial: f64) -> f64 {
        let n = self.diag.len();
        self.diag.push(partial);
        if n == 0 {
            return partial;
        }
        let mut aux2 = 0.0;
        for j in (1..=n).rev() {
            let aux1 = aux2;
            aux2 = self.diag[j - 1];
            let diff = self.diag[j] - aux2;
            self.diag[j - 1] = if diff.abs() < 1e-300 {
                f64::MAX
            } else {
                aux1 + 1.0 / diff
            };
        }
        let est = if n.is_multiple_of(2) { self.diag[0] } else { self.diag[1] };
        // A stalled table (repeated partial sums) carries the sentinel.
        if est.abs() < 1e300 {
            est
        } else {
            partial
        }
    }
}

/// Linear combination `Σ w_k (1 − cos(Δ_k x))` with distinct positive Δ_k.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CosineCombo {
    terms: Vec<(f64, f64)>,
}

impl CosineCombo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, weight: f64, delta: f64) {
        let d = delta.abs();
        if weight == 0.0 || d == 0.0 {
            return;
        }
        if let Some(t) = self
            .terms
            .iter_mut()
            .find(|t| (t.1 - d).abs() <= 1e-13 * d)
        {
            t.0 += weight;
        } else {
            self.terms.push((weight, d));
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.terms.iter().copied().filter(|t| t.0 != 0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.terms().next().is_none()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(w, d)| {
                let s = (0.5 * d * x).sin();
                2.0 * w * s * s
            })
            .sum()
    }

    /// Σ w_k.
    pub fn weight_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.0).sum()
    }

    /// Σ w_k Δ_k²; zero exactly when the combination vanishes to fourth order at 0.
    pub fn second_moment(&self) -> f64 {
        self.terms.iter().map(|t| t.0 * t.1 * t.1).sum()
    }

    fn delta_range(&self) -> Option<(f64, f64)> {
        let mut it = self.terms();
        let first = it.next()?;
        Some(it.fold((first.1, first.1), |(lo, hi), t| (lo.min(t.1), hi.max(t.1))))
    }
}

/// Shape of the amplitude `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// `h(x) = coef · x^exponent` on the whole half line. Both ends are then
    /// handled analytically, which is what makes integrable singularities at
    /// the origin cheap.
    Power { coef: f64, exponent: f64 },
    /// Bounded near the origin once multiplied by the combination, decaying at
    /// least like `x^-2`; both ends are integrated numerically.
    General,
}

/// Options for [`cosine_integral`].
#[derive(Debug, Clone, Copy)]
pub struct CosineOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Half periods of the slowest cosine covered before switching to tails.
    pub half_periods: f64,
    pub max_panels: usize,
}

impl Default for CosineOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-14,
            rel_tol: 1e-12,
            half_periods: 64.0,
            max_panels: 400_000,
        }
    }
}

/// ∫₀^∞ Σ_k w_k (1 − cos Δ_k x) h(x) dx.
///
/// The combined integrand is integrated on `[0, X]` with panels aligned to
/// the fastest half period. Beyond `X` each cosine is handled separately: the
/// non-oscillatory part analytically or by a logarithmic substitution, the
/// oscillatory part by half-period panels summed with Wynn's epsilon
/// algorithm.
pub fn cosine_integral<H: Fn(f64) -> f64 + ?Sized>(
    combo: &CosineCombo,
    h: &H,
    shape: Shape,
    opts: CosineOptions,
) -> Result<Integral> {
    let Some((dmin, dmax)) = combo.delta_range() else {
        return Ok(Integral { value: 0.0, error: 0.0 });
    };
    let x_end = opts.half_periods * PI / dmin;
    let step = PI / dmax;
    let n_panels = (x_end / step).ceil();
    if n_panels > opts.max_panels as f64 {
        return Err(Error::Numeric {
            message: format!(
                "cosine combination needs {n_panels:.0} panels (frequency ratio {:.3e})",
                dmax / dmin
            ),
            residual: f64::NAN,
        });
    }
    let n_panels = n_panels as usize;

    // Moments Σ w Δ^{2k} drive the behaviour at the origin.
    let moment = |k: i32| combo.terms().map(|(w, d)| w * d.powi(2 * k)).sum::<f64>();
    let (s2, s4, s6) = (moment(1), moment(2), moment(3));
    let s2_scale: f64 = combo.terms().map(|(w, d)| (w * d * d).abs()).sum();
    let s2_vanishes = s2.abs() <= 1e-12 * s2_scale;

    let (x0, origin) = match shape {
        Shape::Power { coef, exponent: p } => {
            let lead = if s2_vanishes { p + 5.0 } else { p + 3.0 };
            if lead <= 0.0 {
                return Err(Error::Integrability(format!(
                    "amplitude x^{p} is not integrable at the origin against this combination"
                )));
            }
            if p >= -1.0 {
                return Err(Error::Integrability(format!(
                    "amplitude x^{p} is not integrable at infinity"
                )));
            }
            let x0 = 1e-3 / dmax;
            let lead_term = if s2_vanishes {
                0.0
            } else {
                s2 / 2.0 * x0.powf(p + 3.0) / (p + 3.0)
            };
            let v = coef
                * (lead_term - s4 / 24.0 * x0.powf(p + 5.0) / (p + 5.0)
                    + s6 / 720.0 * x0.powf(p + 7.0) / (p + 7.0));
            (x0, v)
        }
        Shape::General => (0.0, 0.0),
    };

    let mut points: Vec<f64> = (0..=n_panels).map(|k| k as f64 * step).collect();
    *points.last_mut().unwrap() = x_end;
    points.dedup();
    let first = points[1];
    let mut seeded = vec![x0];
    if x0 == 0.0 {
        // A graded start resolves mild structure of h near the origin.
        let mut g = first * 1e-8;
        while g < first {
            seeded.push(g);
            g *= 10.0;
        }
    }
    seeded.extend(points[1..].iter().copied().filter(|&p| p > x0));

    // Below x·Δ_max = 1/2 the terms cancel to leading order, so the
    // combination is summed as a power series in the moments instead.
    let series: Vec<f64> = (1..=12)
        .map(|k| {
            let m = if k == 1 && s2_vanishes { 0.0 } else { moment(k) };
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * m / factorial(2 * k as u32)
        })
        .collect();
    let x_series = 0.5 / dmax;
    let integrand = |x: f64| {
        if x == 0.0 {
            0.0
        } else if x < x_series {
            let x2 = x * x;
            let v = series.iter().rev().fold(0.0, |acc, c| acc * x2 + c) * x2;
            v * h(x)
        } else {
            combo.eval(x) * h(x)
        }
    };
    let body = Adaptive {
        abs_tol: opts.abs_tol,
        rel_tol: opts.rel_tol,
        max_segments: opts.max_panels * 4,
    }
    .integrate(&integrand, &seeded)?;

    let nonosc = match shape {
        Shape::Power { coef, exponent } => Integral {
            value: coef * x_end.powf(exponent + 1.0) / (-(exponent + 1.0)),
            error: 0.0,
        },
        Shape::General => {
            let g = |y: f64| {
                let x = x_end * y.exp();
                h(x) * x
            };
            Adaptive::new(opts.abs_tol * 1e-2, opts.rel_tol)
                .integrate(&g, &[0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0])?
        }
    };

    let mut value = origin + body.value;
    let mut error = body.error + nonosc.error;
    for (w, d) in combo.terms() {
        let osc = oscillatory_tail(h, d, x_end, opts)?;
        value += w * (nonosc.value - osc.value);
        error += w.abs() * osc.error;
    }
    Ok(Integral { value, error })
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// ∫_X^∞ cos(Δx) h(x) dx by half-period panels and Wynn extrapolation.
fn oscillatory_tail<H: Fn(f64) -> f64 + ?Sized>(
    h: &H,
    delta: f64,
    x_start: f64,
    opts: CosineOptions,
) -> Result<Integral> {
    let f = |x: f64| (delta * x).cos() * h(x);
    let half = PI / delta;
    // First zero of cos(Δx) at or after x_start.
    let j0 = ((x_start / half) - 0.5).ceil().max(0.0);
    let mut z = (j0 + 0.5) * half;
    let mut partial = if z > x_start {
        Adaptive::new(opts.abs_tol * 1e-2, opts.rel_tol)
            .integrate(&f, &[x_start, z])?
            .value
    } else {
        z = x_start;
        0.0
    };
    let mut wynn = Wynn::default();
    let mut last = wynn.push(partial);
    let mut prev_diff = f64::INFINITY;
    for k in 0..400 {
        let panel = gk21(&f, z, z + half);
        partial += panel.value;
        z += half;
        if panel.value.abs() <= 1e-6 * opts.abs_tol {
            return Ok(Integral { value: partial, error: panel.value.abs() });
        }
        let est = wynn.push(partial);
        if !est.is_finite() || (est - partial).abs() > 1e3 * panel.value.abs() {
            return Err(Error::Numeric {
                message: "epsilon extrapolation diverged".into(),
                residual: (est - partial).abs(),
            });
        }
        let diff = (est - last).abs();
        let tol = 1e-3 * opts.abs_tol + 1e-15 * est.abs();
        if k > 6 && diff <= tol && prev_diff <= tol {
            return Ok(Integral { value: est, error: diff });
        }
        prev_diff = diff;
        last = est;
    }
    Ok(Integral { value: last, error: prev_diff })
}

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronrod_rule_is_exact_for_polynomials() {
        for k in 0..=31 {
            let got = gk21(&|x: f64| x.powi(k), 0.0, 1.0).value;
            let want = 1.0 / (k as f64 + 1.0);
            assert!((got - want).abs() < 1e-14, "degree {k}: {got} vs {want}");
        }
        // The embedded Gauss rule is exact to degree 19, so the error vanishes there.
        assert!(gk21(&|x: f64| x.powi(19), -1.0, 2.0).error < 1e-12);
    }

    #[test]
    fn adaptive_handles_endpoint_singularity() {
        let r = Adaptive::new(1e-12, 1e-12)
            .integrate(&|x: f64| x.powf(-0.7), &[0.0, 1.0])
            .unwrap();
        assert!((r.value - 1.0 / 0.3).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn wynn_accelerates_alternating_harmonic() {
        let mut w = Wynn::default();
        let mut s = 0.0;
        let mut est = 0.0;
        for k in 1..=20 {
            s += if k % 2 == 1 { 1.0 } else { -1.0 } / k as f64;
            est = w.push(s);
        }
        assert!((est - 2f64.ln()).abs() < 1e-12, "{est}");
    }

    #[test]
    fn cosine_integral_matches_closed_forms() {
        // ∫₀^∞ (1 − cos Δx)/x² dx = π|Δ|/2.
        let mut c = CosineCombo::new();
        c.push(1.0, 3.0);
        let r = cosine_integral(
            &c,
            &|x: f64| x.powi(-2),
            Shape::Power { coef: 1.0, exponent: -2.0 },
            CosineOptions::default(),
        )
        .unwrap();
        assert!((r.value - 1.5 * PI).abs() < 1e-10, "{}", r.value);

        // Heat weight: ∫₀^∞ (1 − cos x) e^{-x²}/x² dx against a brute-force sum.
        let mut c = CosineCombo::new();
        c.push(1.0, 1.0);
        let h = |x: f64| (-x * x).exp() / (x * x);
        let r = cosine_integral(&c, &h, Shape::General, CosineOptions::default()).unwrap();
        let (n, w) = gauss_legendre(200);
        let brute: f64 = n
            .iter()
            .zip(&w)
            .map(|(&u, &wt)| {
                let x = 4.0 * (u + 1.0);
                4.0 * wt * (1.0 - x.cos()) * h(x)
            })
            .sum();
        assert!((r.value - brute).abs() < 1e-12, "{} vs {}", r.value, brute);
    }

    #[test]
    fn power_amplitudes_match_gamma_closed_form() {
        // ∫₀^∞ (1 − cos u) u^{-1-β} du = −Γ(−β) cos(πβ/2).
        for &beta in &[0.1, 0.5, 1.0, 1.5, 1.9] {
            let mut c = CosineCombo::new();
            c.push(1.0, 1.0);
            let p = -1.0 - beta;
            let got = cosine_integral(
                &c,
                &|x: f64| x.powf(p),
                Shape::Power { coef: 1.0, exponent: p },
                CosineOptions::default(),
            )
            .unwrap()
            .value;
            let want = if beta == 1.0 {
                PI / 2.0
            } else {
                -statrs::function::gamma::gamma(-beta) * (PI * beta / 2.0).cos()
            };
            assert!((got - want).abs() < 1e-10 * want, "beta {beta}: {got} vs {want}");
        }
    }

    #[test]
    fn non_integrable_powers_are_rejected() {
        let mut c = CosineCombo::new();
        c.push(1.0, 1.0);
        let r = cosine_integral(
            &c,
            &|x: f64| x.powf(-0.5),
            Shape::Power { coef: 1.0, exponent: -0.5 },
            CosineOptions::default(),
        );
        assert!(matches!(r, Err(Error::Integrability(_))));
        let r = cosine_integral(
            &c,
            &|x: f64| x.powf(-3.2),
            Shape::Power { coef: 1.0, exponent: -3.2 },
            CosineOptions::default(),
        );
        assert!(matches!(r, Err(Error::Integrability(_))));
    }

    #[test]
    fn gauss_legendre_integrates_cosine() {
        let (n, w) = gauss_legendre(30);
        let s: f64 = n.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert!((s - 2.0 * 1f64.sin()).abs() < 1e-15);
    }
}

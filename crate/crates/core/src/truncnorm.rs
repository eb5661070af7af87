//! Standard-normal CDF arithmetic and truncated normal moments and sampling.
//!
//! All interval computations are carried out on standardized bounds and in
//! the log domain where a difference of two tail probabilities would
//! otherwise cancel. Intervals are mirrored so that the lower standardized
//! bound is non-negative or the interval straddles zero.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CrbmError, Result};

/// Masses below this are treated as zero.
pub const DEGENERATE_MASS: f64 = 1e-300;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// Beyond this standardized bound the upper-tail ratio uses its asymptotic series.
const ASYMPTOTIC_TAIL: f64 = 30.0;
const MAX_TRIES: usize = 10_000;

/// A (possibly unbounded) interval of the real line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || !(lower < upper) {
            return Err(CrbmError::invalid(format!(
                "interval requires lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub const fn full() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub const fn above(lower: f64) -> Self {
        Self {
            lower,
            upper: f64::INFINITY,
        }
    }

    pub const fn below(upper: f64) -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower == f64::NEG_INFINITY && self.upper == f64::INFINITY
    }

    /// Membership in the closure of the interval.
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    fn standardize(&self, mean: f64, std: f64) -> (f64, f64) {
        ((self.lower - mean) / std, (self.upper - mean) / std)
    }
}

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn ln_std_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF. The lower tail is evaluated through `erfc`, so both
/// tails keep full relative precision.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        0.0
    } else if x == f64::INFINITY {
        1.0
    } else if x < 0.0 {
        0.5 * libm::erfc(-x / SQRT_2)
    } else {
        1.0 - 0.5 * libm::erfc(x / SQRT_2)
    }
}

/// Upper tail `1 - Φ(x)` without cancellation.
pub fn std_normal_sf(x: f64) -> f64 {
    std_normal_cdf(-x)
}

/// `φ(x) / (1 - Φ(x))`, the hazard of the standard normal.
fn hazard(x: f64) -> f64 {
    if x < ASYMPTOTIC_TAIL {
        std_normal_pdf(x) / std_normal_sf(x)
    } else {
        x / tail_series(x)
    }
}

/// `x (1 - Φ(x)) / φ(x)` by its asymptotic expansion; accurate for x >= 30.
fn tail_series(x: f64) -> f64 {
    let inv2 = 1.0 / (x * x);
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..=7 {
        term *= -((2 * n - 1) as f64) * inv2;
        sum += term;
    }
    sum
}

/// `ln(1 - Φ(x))`.
fn ln_sf(x: f64) -> f64 {
    if x < ASYMPTOTIC_TAIL {
        std_normal_sf(x).ln()
    } else {
        ln_std_normal_pdf(x) - hazard(x).ln()
    }
}

fn gauss_legendre_16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// `∫_0^w exp(-a t - t²/2) dt` for short intervals where the integrand is smooth.
fn short_integral(a: f64, w: f64) -> f64 {
    let (nodes, weights) = gauss_legendre_16();
    let half = 0.5 * w;
    nodes
        .iter()
        .zip(weights)
        .map(|(&x, &wt)| {
            let t = half * (x + 1.0);
            wt * (-a * t - 0.5 * t * t).exp()
        })
        .sum::<f64>()
        * half
}

/// Standardized interval mirrored so that `a >= 0` or `a < 0 < b`.
#[derive(Debug, Clone, Copy)]
struct Standard {
    a: f64,
    b: f64,
    flipped: bool,
}

impl Standard {
    fn new(alpha: f64, beta: f64) -> Self {
        if alpha < 0.0 && beta <= 0.0 {
            Standard {
                a: -beta,
                b: -alpha,
                flipped: true,
            }
        } else {
            Standard {
                a: alpha,
                b: beta,
                flipped: false,
            }
        }
    }

    fn width(&self) -> f64 {
        self.b - self.a
    }

    /// `(b² - a²) / 2 = ln φ(a) - ln φ(b)`.
    fn log_density_drop(&self) -> f64 {
        0.5 * (self.b - self.a) * (self.b + self.a)
    }

    /// True when both bounds are finite and the density varies little across
    /// the interval, so the mass is integrated directly.
    fn is_short(&self) -> bool {
        self.b.is_finite() && self.a.is_finite() && self.width() <= 1.0 && self.log_density_drop().abs() <= 1.0
    }

    fn ln_mass(&self) -> f64 {
        let (a, b) = (self.a, self.b);
        if a == f64::NEG_INFINITY {
            if b == f64::INFINITY {
                0.0
            } else {
                // a = -inf, b > 0 after mirroring
                (1.0 - std_normal_sf(b)).ln()
            }
        } else if b == f64::INFINITY {
            ln_sf(a)
        } else if self.is_short() {
            ln_std_normal_pdf(a) + short_integral(a, self.width()).ln()
        } else if a >= 0.0 {
            ln_sf(a) + (-(ln_sf(b) - ln_sf(a)).exp_m1()).ln()
        } else {
            (1.0 - std_normal_sf(b) - std_normal_cdf(a)).ln()
        }
    }

    /// Mean of the standard normal restricted to the (mirrored) interval.
    fn mean(&self) -> f64 {
        let (a, b) = (self.a, self.b);
        if a == f64::NEG_INFINITY && b == f64::INFINITY {
            return 0.0;
        }
        let m = if a == f64::NEG_INFINITY {
            -hazard(-b)
        } else if b == f64::INFINITY {
            hazard(a)
        } else if self.width() == 0.0 {
            a
        } else if self.is_short() {
            -(-self.log_density_drop()).exp_m1() / short_integral(a, self.width())
        } else if a >= 0.0 {
            hazard(a) * -(-self.log_density_drop()).exp_m1() / -(ln_sf(b) - ln_sf(a)).exp_m1()
        } else {
            (std_normal_pdf(a) - std_normal_pdf(b)) / self.ln_mass().exp()
        };
        m.clamp(a, b)
    }
}

fn degenerate(mass: f64, mean: f64, std: f64, iv: &Interval) -> CrbmError {
    CrbmError::DegenerateMass {
        mass,
        mean,
        std,
        lower: iv.lower,
        upper: iv.upper,
    }
}

fn check_std(std: f64) -> Result<()> {
    if std > 0.0 && std.is_finite() {
        Ok(())
    } else {
        Err(CrbmError::invalid(format!(
            "standard deviation must be positive, got {std}"
        )))
    }
}

/// Natural log of `P(lower < X <= upper)` for `X ~ N(mean, std²)`. Never
/// underflows for finite inputs.
pub fn ln_interval_mass(mean: f64, std: f64, iv: &Interval) -> f64 {
    let (alpha, beta) = iv.standardize(mean, std);
    Standard::new(alpha, beta).ln_mass()
}

/// Probability mass of `iv` under `N(mean, std²)` with no degeneracy check.
pub(crate) fn interval_mass_unchecked(mean: f64, std: f64, iv: &Interval) -> f64 {
    ln_interval_mass(mean, std, iv).exp()
}

/// Probability mass of `iv` under `N(mean, std²)`.
pub fn interval_mass(mean: f64, std: f64, iv: &Interval) -> Result<f64> {
    check_std(std)?;
    let mass = interval_mass_unchecked(mean, std, iv);
    if mass < DEGENERATE_MASS || mass.is_nan() {
        return Err(degenerate(mass, mean, std, iv));
    }
    Ok(mass)
}

/// First moment of `N(mean, std²)` truncated to `iv`.
pub fn truncated_mean(mean: f64, std: f64, iv: &Interval) -> Result<f64> {
    interval_mass(mean, std, iv)?;
    let (alpha, beta) = iv.standardize(mean, std);
    let s = Standard::new(alpha, beta);
    let z = if s.flipped { -s.mean() } else { s.mean() };
    Ok((mean + std * z).clamp(iv.lower, iv.upper))
}

/// Density of the truncated normal at `x`: the normal density divided by the
/// interval mass.
pub fn truncated_density_at(mean: f64, std: f64, iv: &Interval, x: f64) -> Result<f64> {
    if !iv.contains(x) {
        return Err(CrbmError::OutsideInterval {
            x,
            lower: iv.lower,
            upper: iv.upper,
        });
    }
    let mass = interval_mass(mean, std, iv)?;
    let ln_mass = mass.ln();
    let z = (x - mean) / std;
    Ok((ln_std_normal_pdf(z) - ln_mass).exp() / std)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Proposal {
    Normal,
    Uniform,
    Exponential,
}

/// Draws from a standardized, mirrored interval by the best of three exact
/// rejection schemes: plain normal proposals, uniform proposals over a
/// bounded interval, and translated-exponential proposals for tails.
fn sample_standard<R: Rng + ?Sized>(s: &Standard, rng: &mut R) -> f64 {
    let (a, b) = (s.a, s.b);
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return rng.sample(StandardNormal);
    }
    if a == f64::NEG_INFINITY {
        // only reachable for b > 0, where normal proposals accept at least half the time
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z <= b {
                return z;
            }
        }
    }
    if !(b > a) {
        return a;
    }

    let ln_mass = s.ln_mass();
    let mut best = (Proposal::Normal, ln_mass);
    let rho = if a > 0.0 { a * a } else { 0.0 };
    if b.is_finite() {
        let ln_acc = ln_mass + LN_SQRT_2PI - s.width().ln() + 0.5 * rho;
        if ln_acc > best.1 {
            best = (Proposal::Uniform, ln_acc);
        }
    }
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    if a > 0.0 {
        let ln_acc = lambda.ln() + lambda * a - 0.5 * lambda * lambda + LN_SQRT_2PI + ln_mass;
        if ln_acc > best.1 {
            best = (Proposal::Exponential, ln_acc);
        }
    }

    for _ in 0..MAX_TRIES {
        match best.0 {
            Proposal::Normal => {
                let z: f64 = rng.sample(StandardNormal);
                if a <= z && z <= b {
                    return z;
                }
            }
            Proposal::Uniform => {
                let z = a + s.width() * rng.random::<f64>();
                let u: f64 = rng.random();
                if u <= (0.5 * (rho - z * z)).exp() {
                    return z.clamp(a, b);
                }
            }
            Proposal::Exponential => {
                let e: f64 = rand_distr::Exp1.sample(rng);
                let z = a + e / lambda;
                if z > b {
                    continue;
                }
                let u: f64 = rng.random();
                let d = z - lambda;
                if u <= (-0.5 * d * d).exp() {
                    return z;
                }
            }
        }
    }
    log::warn!("truncated sampler exhausted {MAX_TRIES} proposals on [{a}, {b}]");
    if b.is_finite() {
        0.5 * (a + b)
    } else {
        a
    }
}

/// Exact draw from `N(mean, std²)` truncated to `iv`.
pub fn sample_truncated<R: Rng + ?Sized>(mean: f64, std: f64, iv: &Interval, rng: &mut R) -> f64 {
    let (alpha, beta) = iv.standardize(mean, std);
    if !(beta > alpha) {
        return midpoint(iv);
    }
    let s = Standard::new(alpha, beta);
    let z = sample_standard(&s, rng);
    let z = if s.flipped { -z } else { z };
    (mean + std * z).clamp(iv.lower, iv.upper)
}

fn midpoint(iv: &Interval) -> f64 {
    match (iv.lower.is_finite(), iv.upper.is_finite()) {
        (true, true) => 0.5 * (iv.lower + iv.upper),
        (true, false) => iv.lower,
        (false, true) => iv.upper,
        (false, false) => 0.0,
    }
}

//! Independent reference computations: closed-form interval masses,
//! exhaustive enumeration over binary factors, adaptive quadrature and
//! finite differences.

#![allow(dead_code)]

use std::f64::consts::SQRT_2;

use crbm_core::learning::{accumulate_clamped, accumulate_free, EssAccumulator, ParameterGradient, ViewStatistics};
use crbm_core::matrix::MatrixCrbmParameters;
use crbm_core::model::{Observed, OrdinalScale, VectorCrbmParameters};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn phi(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * libm::erfc(-x / SQRT_2)
    }
}

/// `P(lo < X <= hi)` for `X ~ N(mu, sigma²)`, subtracting on the side that
/// keeps precision.
pub fn mass(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let (a, b) = ((lo - mu) / sigma, (hi - mu) / sigma);
    if a > 0.0 {
        phi(-a) - phi(-b)
    } else {
        phi(b) - phi(a)
    }
}

pub fn thresholds(scale: &OrdinalScale) -> Vec<f64> {
    let mut t = vec![scale.base];
    for g in &scale.log_gaps {
        let last = *t.last().unwrap();
        t.push(last + g.exp());
    }
    t
}

/// `(lower, upper)` bounds of a 1-based level.
pub fn bounds(t: &[f64], level: usize) -> (f64, f64) {
    let lo = if level == 1 { f64::NEG_INFINITY } else { t[level - 2] };
    let hi = if level == t.len() + 1 {
        f64::INFINITY
    } else {
        t[level - 1]
    };
    (lo, hi)
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every binary vector of length `k`, as 0/1 floats.
pub fn configs(k: usize) -> Vec<Vec<f64>> {
    (0..1usize << k)
        .map(|c| (0..k).map(|j| ((c >> j) & 1) as f64).collect())
        .collect()
}

fn normalize(logw: &[f64]) -> Vec<f64> {
    let z = logsumexp(logw);
    logw.iter().map(|l| (l - z).exp()).collect()
}

/// Enumeration over the factors of a vector CRBM restricted to the observed
/// variables of one instance.
pub struct VectorOracle<'a> {
    pub p: &'a VectorCrbmParameters,
    pub hs: Vec<Vec<f64>>,
}

impl<'a> VectorOracle<'a> {
    pub fn new(p: &'a VectorCrbmParameters) -> Self {
        Self {
            p,
            hs: configs(p.n_factors),
        }
    }

    fn field(&self, h: &[f64], i: usize) -> f64 {
        let k = self.p.n_factors;
        self.p.visible_bias[i] + (0..k).map(|j| self.p.weights[i * k + j] * h[j]).sum::<f64>()
    }

    fn mean(&self, h: &[f64], i: usize) -> f64 {
        self.p.utility_std[i].powi(2) * self.field(h, i)
    }

    /// `log Σ_u exp(-E)` per factor state up to the Gaussian constant, over
    /// the variables in `items`.
    fn log_free(&self, h: &[f64], items: &[usize]) -> f64 {
        let gamma: f64 = self.p.factor_bias.iter().zip(h).map(|(g, h)| g * h).sum();
        gamma
            + items
                .iter()
                .map(|&i| 0.5 * self.p.utility_std[i].powi(2) * self.field(h, i).powi(2))
                .sum::<f64>()
    }

    pub fn level_prob(&self, h: &[f64], i: usize, level: usize) -> f64 {
        let (lo, hi) = bounds(&thresholds(&self.p.scales[i]), level);
        mass(self.mean(h, i), self.p.utility_std[i], lo, hi)
    }

    fn log_clamped(&self, h: &[f64], obs: &[(usize, usize)]) -> f64 {
        let items: Vec<usize> = obs.iter().map(|o| o.0).collect();
        self.log_free(h, &items) + obs.iter().map(|&(i, l)| self.level_prob(h, i, l).ln()).sum::<f64>()
    }

    pub fn log_likelihood(&self, obs: &[(usize, usize)]) -> f64 {
        let items: Vec<usize> = obs.iter().map(|o| o.0).collect();
        let c: Vec<f64> = self.hs.iter().map(|h| self.log_clamped(h, obs)).collect();
        let f: Vec<f64> = self.hs.iter().map(|h| self.log_free(h, &items)).collect();
        logsumexp(&c) - logsumexp(&f)
    }

    /// `P(h | v)` for every enumerated `h`.
    pub fn posterior(&self, obs: &[(usize, usize)]) -> Vec<f64> {
        normalize(&self.hs.iter().map(|h| self.log_clamped(h, obs)).collect::<Vec<_>>())
    }

    /// `P(h)` of the model over the variables in `items`.
    pub fn prior(&self, items: &[usize]) -> Vec<f64> {
        normalize(&self.hs.iter().map(|h| self.log_free(h, items)).collect::<Vec<_>>())
    }

    pub fn factor_posterior(&self, obs: &[(usize, usize)]) -> Vec<f64> {
        let post = self.posterior(obs);
        (0..self.p.n_factors)
            .map(|k| self.hs.iter().zip(&post).map(|(h, w)| w * h[k]).sum())
            .collect()
    }

    pub fn predictive(&self, obs: &[(usize, usize)], target: usize) -> Vec<f64> {
        let post = self.posterior(obs);
        (1..=self.p.scales[target].levels())
            .map(|l| {
                self.hs
                    .iter()
                    .zip(&post)
                    .map(|(h, w)| w * self.level_prob(h, target, l))
                    .sum()
            })
            .collect()
    }
}

/// Enumeration over every instance and item factor of a small matrix CRBM.
pub struct MatrixOracle<'a> {
    pub p: &'a MatrixCrbmParameters,
    /// Observed `(d, i, level)` cells.
    pub cells: Vec<(usize, usize, usize)>,
}

impl<'a> MatrixOracle<'a> {
    pub fn n_bits(&self) -> usize {
        self.p.n_instances * self.p.n_factors() + self.p.n_items() * self.p.n_item_factors
    }

    /// Splits configuration `c` into `(h, g)` tables, `D × K` and `N × S`.
    pub fn split(&self, c: usize) -> (Vec<f64>, Vec<f64>) {
        let nh = self.p.n_instances * self.p.n_factors();
        let bits: Vec<f64> = (0..self.n_bits()).map(|j| ((c >> j) & 1) as f64).collect();
        (bits[..nh].to_vec(), bits[nh..].to_vec())
    }

    pub fn cell_thresholds(&self, d: usize, i: usize) -> Vec<f64> {
        let scale = &self.p.items.scales[i];
        let m = self.p.levels() - 1;
        let kappa = &self.p.offsets[d * m..(d + 1) * m];
        let mut t = vec![scale.base + kappa[0]];
        for (l, g) in scale.log_gaps.iter().enumerate() {
            let last = *t.last().unwrap();
            t.push(last + (g + kappa[l + 1]).exp());
        }
        t
    }

    fn field(&self, h: &[f64], g: &[f64], d: usize, i: usize) -> f64 {
        let (k, s) = (self.p.n_factors(), self.p.n_item_factors);
        let mut f = self.p.items.visible_bias[i] + self.p.instance_bias[d];
        for j in 0..k {
            f += self.p.items.weights[i * k + j] * h[d * k + j];
        }
        for j in 0..s {
            f += self.p.instance_weights[d * s + j] * g[i * s + j];
        }
        f
    }

    fn log_free(&self, h: &[f64], g: &[f64]) -> f64 {
        let (k, s) = (self.p.n_factors(), self.p.n_item_factors);
        let mut e = 0.0;
        for (j, hv) in h.iter().enumerate() {
            e += self.p.items.factor_bias[j % k] * hv;
        }
        for (j, gv) in g.iter().enumerate() {
            e += self.p.item_factor_bias[j % s] * gv;
        }
        for &(d, i, _) in &self.cells {
            e += 0.5 * self.p.items.utility_std[i].powi(2) * self.field(h, g, d, i).powi(2);
        }
        e
    }

    fn log_clamped(&self, h: &[f64], g: &[f64]) -> f64 {
        let mut e = self.log_free(h, g);
        for &(d, i, level) in &self.cells {
            let sigma = self.p.items.utility_std[i];
            let (lo, hi) = bounds(&self.cell_thresholds(d, i), level);
            e += mass(sigma * sigma * self.field(h, g, d, i), sigma, lo, hi).ln();
        }
        e
    }

    pub fn log_likelihood(&self) -> f64 {
        let n = 1usize << self.n_bits();
        let mut c = Vec::with_capacity(n);
        let mut f = Vec::with_capacity(n);
        for cfg in 0..n {
            let (h, g) = self.split(cfg);
            c.push(self.log_clamped(&h, &g));
            f.push(self.log_free(&h, &g));
        }
        logsumexp(&c) - logsumexp(&f)
    }

    /// `(P(h, g | V), P(h, g))` for every configuration.
    pub fn weights(&self) -> (Vec<f64>, Vec<f64>) {
        let n = 1usize << self.n_bits();
        let mut c = Vec::with_capacity(n);
        let mut f = Vec::with_capacity(n);
        for cfg in 0..n {
            let (h, g) = self.split(cfg);
            c.push(self.log_clamped(&h, &g));
            f.push(self.log_free(&h, &g));
        }
        (normalize(&c), normalize(&f))
    }
}

pub fn mean_log_likelihood(p: &VectorCrbmParameters, data: &[Vec<(usize, usize)>]) -> f64 {
    let oracle = VectorOracle::new(p);
    let cells: usize = data.iter().map(Vec::len).sum();
    data.iter().map(|obs| oracle.log_likelihood(obs)).sum::<f64>() / cells as f64
}

/// Exact gradient of the mean per-cell log-likelihood assembled from the
/// library's statistics, weighted by exact posteriors and priors.
pub fn exact_vector_gradient(p: &VectorCrbmParameters, data: &[Vec<(usize, usize)>]) -> ParameterGradient {
    let oracle = VectorOracle::new(p);
    let table = p.threshold_table();
    let mut clamped = EssAccumulator::new(p);
    let mut free = EssAccumulator::new(p);
    for obs in data {
        let items: Vec<usize> = obs.iter().map(|o| o.0).collect();
        let view = p.subset_view(&table, &items);
        let local: Vec<Observed> = obs
            .iter()
            .enumerate()
            .map(|(j, &(_, level))| Observed { unit: j, level })
            .collect();
        let post = oracle.posterior(obs);
        let prior = oracle.prior(&items);
        let mut cs = ViewStatistics::new(&view);
        let mut fs = ViewStatistics::new(&view);
        for ((h, wc), wf) in oracle.hs.iter().zip(&post).zip(&prior) {
            accumulate_clamped(&view, &local, h, h, *wc, &mut cs).unwrap();
            accumulate_free(&view, h, h, *wf, &mut fs);
        }
        cs.cells = obs.len();
        fs.cells = obs.len();
        clamped.add_view(&cs, &items);
        free.add_view(&fs, &items);
    }
    ParameterGradient::from_ess(p, &clamped, &free)
}

/// Central difference of `f` at `x[j]`.
pub fn central_difference(x: &mut [f64], j: usize, step: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[j];
    x[j] = orig + step;
    let up = f(x);
    x[j] = orig - step;
    let down = f(x);
    x[j] = orig;
    (up - down) / (2.0 * step)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Adaptive Simpson quadrature with a relative tolerance set from a coarse
/// 64-panel pass.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    let n = 64;
    let h = (b - a) / n as f64;
    let coarse: f64 = (0..n).map(|i| f(a + (i as f64 + 0.5) * h).abs() * h).sum();
    let tol = rel * coarse / n as f64;
    (0..n)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let m = 0.5 * (lo + hi);
            let (fa, fm, fb) = (f(lo), f(m), f(hi));
            rec(f, lo, hi, fa, fm, fb, h / 6.0 * (fa + 4.0 * fm + fb), tol, 40)
        })
        .sum()
}

/// Mean and variance of `N(mu, sigma²)` truncated to `(lo, hi]` by
/// quadrature; infinite ends are cut at 40 standard deviations.
pub fn truncated_moments(mu: f64, sigma: f64, lo: f64, hi: f64) -> (f64, f64) {
    let a = lo.max(mu - 40.0 * sigma);
    let b = hi.min(mu + 40.0 * sigma);
    // Shift the density so its largest value on [a, b] is 1.
    let peak = mu.clamp(a, b);
    let dens = |x: f64| (-0.5 * ((x - mu) / sigma).powi(2) + 0.5 * ((peak - mu) / sigma).powi(2)).exp();
    let z = simpson(&dens, a, b, 1e-12);
    let m1 = simpson(&|x| (x - peak) * dens(x), a, b, 1e-12) / z;
    let m2 = simpson(&|x| (x - peak).powi(2) * dens(x), a, b, 1e-12) / z;
    (peak + m1, m2 - m1 * m1)
}

/// Random tiny vector model with `L` levels per variable.
pub fn random_vector_model(n: usize, k: usize, levels: usize, seed: u64) -> VectorCrbmParameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |s: f64| rng.random_range(-s..s);
    VectorCrbmParameters {
        n_visible: n,
        n_factors: k,
        visible_bias: (0..n).map(|_| u(0.8)).collect(),
        factor_bias: (0..k).map(|_| u(0.8)).collect(),
        weights: (0..n * k).map(|_| u(1.0)).collect(),
        utility_std: vec![1.0; n],
        scales: (0..n)
            .map(|_| OrdinalScale::new(-((levels - 2) as f64) / 2.0, (0..levels - 2).map(|_| u(0.5)).collect()))
            .collect(),
    }
}

/// Random tiny matrix model on top of a random item side.
pub fn random_matrix_model(d: usize, n: usize, k: usize, s: usize, levels: usize, seed: u64) -> MatrixCrbmParameters {
    let items = random_vector_model(n, k, levels, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut u = |r: f64| rng.random_range(-r..r);
    MatrixCrbmParameters {
        items,
        n_instances: d,
        n_item_factors: s,
        instance_bias: (0..d).map(|_| u(0.5)).collect(),
        item_factor_bias: (0..s).map(|_| u(0.8)).collect(),
        instance_weights: (0..d * s).map(|_| u(1.0)).collect(),
        offsets: (0..d * (levels - 1)).map(|_| u(0.3)).collect(),
    }
}

/// Standard error of the mean of a correlated trace by batch means.
pub fn batch_means_se(trace: &[f64], batches: usize) -> f64 {
    let size = trace.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| trace[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

//! Vector CRBM parameters, ordinal thresholds and the closed-form
//! conditionals between utilities, factors and ordinal levels.

use std::borrow::Cow;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CrbmError, Result};
use crate::truncnorm::{interval_mass_unchecked, Interval};

/// Ordinal thresholds for one variable: a fixed lowest threshold followed by
/// gaps `exp(log_gap)`, so the thresholds are strictly increasing for every
/// value of the free parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalScale {
    pub base: f64,
    pub log_gaps: Vec<f64>,
}

impl OrdinalScale {
    pub fn new(base: f64, log_gaps: Vec<f64>) -> Self {
        Self { base, log_gaps }
    }

    /// Unit-spaced thresholds centred on zero.
    pub fn even(levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(CrbmError::invalid(format!(
                "an ordinal scale needs at least 2 levels, got {levels}"
            )));
        }
        Ok(Self {
            base: -((levels - 2) as f64) / 2.0,
            log_gaps: vec![0.0; levels - 2],
        })
    }

    pub fn levels(&self) -> usize {
        self.log_gaps.len() + 2
    }

    pub fn thresholds(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.levels() - 1);
        let mut t = self.base;
        out.push(t);
        for g in &self.log_gaps {
            t += g.exp();
            out.push(t);
        }
        out
    }

    pub fn utility_interval(&self, level: usize) -> Result<Interval> {
        interval_for_level(&self.thresholds(), level)
    }

    /// Pulls a gradient over thresholds back onto the log gaps. The base is
    /// fixed and receives nothing.
    pub fn log_gap_gradient(&self, threshold_grad: &[f64]) -> Vec<f64> {
        debug_assert_eq!(threshold_grad.len(), self.levels() - 1);
        let mut tail = 0.0;
        let mut out = vec![0.0; self.log_gaps.len()];
        for j in (0..self.log_gaps.len()).rev() {
            tail += threshold_grad[j + 1];
            out[j] = self.log_gaps[j].exp() * tail;
        }
        out
    }
}

/// The utility interval selected by `level` (1-based) given `L - 1` thresholds.
pub fn interval_for_level(thresholds: &[f64], level: usize) -> Result<Interval> {
    let levels = thresholds.len() + 1;
    if level == 0 || level > levels {
        return Err(CrbmError::OutOfRangeLevel { level, levels });
    }
    Ok(if level == 1 {
        Interval::below(thresholds[0])
    } else if level == levels {
        Interval::above(thresholds[levels - 2])
    } else {
        Interval {
            lower: thresholds[level - 2],
            upper: thresholds[level - 1],
        }
    })
}

/// Probability vector over the ordered levels of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDistribution {
    pub probs: Vec<f64>,
}

impl LevelDistribution {
    pub fn levels(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, level: usize) -> f64 {
        self.probs[level - 1]
    }

    /// Expected level, the point prediction scored by RMSE.
    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(l, p)| (l + 1) as f64 * p).sum()
    }

    /// Most probable level, lowest level on ties; the point prediction scored by MAE.
    pub fn map_level(&self) -> usize {
        let mut best = 0;
        for (l, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = l;
            }
        }
        best + 1
    }

    /// Average of several distributions over the same levels.
    pub fn mixture<'a>(parts: impl IntoIterator<Item = &'a LevelDistribution>, levels: usize) -> Self {
        let mut probs = vec![0.0; levels];
        let mut n = 0usize;
        for d in parts {
            for (acc, p) in probs.iter_mut().zip(&d.probs) {
                *acc += p;
            }
            n += 1;
        }
        probs.iter_mut().for_each(|p| *p /= n.max(1) as f64);
        Self { probs }
    }
}

/// `(mean level, MAP level)` for a predictive distribution.
pub fn point_predictions(dist: &LevelDistribution) -> (f64, usize) {
    (dist.mean(), dist.map_level())
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One visible utility as seen by the factor layer: its effective bias, its
/// row of factor weights, its scale and its thresholds.
#[derive(Debug, Clone)]
pub struct Unit<'a> {
    pub bias: f64,
    pub weights: &'a [f64],
    pub std: f64,
    pub thresholds: Cow<'a, [f64]>,
}

impl Unit<'_> {
    pub fn levels(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// `σ²(bias + Σ_k w_k h_k)`; `h` may be binary or real-valued in [0, 1].
    pub fn mean(&self, h: &[f64]) -> f64 {
        let field: f64 = self.weights.iter().zip(h).map(|(w, h)| w * h).sum();
        self.std * self.std * (self.bias + field)
    }

    pub fn interval(&self, level: usize) -> Result<Interval> {
        interval_for_level(&self.thresholds, level)
    }

    pub fn level_probabilities_at(&self, mean: f64) -> LevelDistribution {
        let probs = (1..=self.levels())
            .map(|l| {
                let iv = interval_for_level(&self.thresholds, l).expect("level in range");
                interval_mass_unchecked(mean, self.std, &iv)
            })
            .collect();
        LevelDistribution { probs }
    }

    pub fn level_probabilities(&self, h: &[f64]) -> LevelDistribution {
        self.level_probabilities_at(self.mean(h))
    }
}

/// An observed ordinal level for one unit of a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observed {
    pub unit: usize,
    pub level: usize,
}

/// A Gaussian-binary RBM over a list of ordinal units: the common shape of a
/// vector model and of the conditional models a matrix model exposes for one
/// instance or one item.
#[derive(Debug, Clone)]
pub struct RbmView<'a> {
    pub factor_bias: &'a [f64],
    pub units: Vec<Unit<'a>>,
}

impl RbmView<'_> {
    pub fn n_factors(&self) -> usize {
        self.factor_bias.len()
    }

    /// Factor activation probabilities `P(h_k = 1 | u)` given utilities for a
    /// subset of units; absent units do not contribute.
    pub fn activations<I>(&self, utilities: I) -> Vec<f64>
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        let mut field = self.factor_bias.to_vec();
        for (unit, u) in utilities {
            for (f, w) in field.iter_mut().zip(self.units[unit].weights) {
                *f += w * u;
            }
        }
        field.into_iter().map(logistic).collect()
    }

    pub fn check_observations(&self, obs: &[Observed]) -> Result<()> {
        for o in obs {
            let unit = self.units.get(o.unit).ok_or_else(|| {
                CrbmError::invalid(format!("observation refers to unit {} of {}", o.unit, self.units.len()))
            })?;
            if o.level == 0 || o.level > unit.levels() {
                return Err(CrbmError::OutOfRangeLevel {
                    level: o.level,
                    levels: unit.levels(),
                });
            }
        }
        Ok(())
    }
}

/// Parameters of a vector CRBM over `n_visible` ordinal variables and
/// `n_factors` binary factors. Weights are stored row-major, one row of
/// length `n_factors` per visible variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorCrbmParameters {
    pub n_visible: usize,
    pub n_factors: usize,
    pub visible_bias: Vec<f64>,
    pub factor_bias: Vec<f64>,
    pub weights: Vec<f64>,
    pub utility_std: Vec<f64>,
    pub scales: Vec<OrdinalScale>,
}

impl VectorCrbmParameters {
    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.n_visible, self.n_factors);
        if self.visible_bias.len() != n
            || self.factor_bias.len() != k
            || self.weights.len() != n * k
            || self.utility_std.len() != n
            || self.scales.len() != n
        {
            return Err(CrbmError::Format(format!("inconsistent dimensions for N={n}, K={k}")));
        }
        if let Some(s) = self.utility_std.iter().find(|s| !(**s > 0.0)) {
            return Err(CrbmError::Format(format!("utility std must be positive, got {s}")));
        }
        Ok(())
    }

    pub fn weight_row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n_factors..(i + 1) * self.n_factors]
    }

    pub fn thresholds(&self, i: usize) -> Vec<f64> {
        self.scales[i].thresholds()
    }

    pub fn threshold_table(&self) -> Vec<Vec<f64>> {
        self.scales.iter().map(OrdinalScale::thresholds).collect()
    }

    pub fn unit(&self, i: usize) -> Unit<'_> {
        Unit {
            bias: self.visible_bias[i],
            weights: self.weight_row(i),
            std: self.utility_std[i],
            thresholds: Cow::Owned(self.thresholds(i)),
        }
    }

    /// Full view over every variable, unit index = variable index.
    pub fn view(&self) -> RbmView<'_> {
        RbmView {
            factor_bias: &self.factor_bias,
            units: (0..self.n_visible).map(|i| self.unit(i)).collect(),
        }
    }

    /// View restricted to `items`, in order, with thresholds borrowed from a
    /// precomputed table.
    pub fn subset_view<'a>(&'a self, table: &'a [Vec<f64>], items: &[usize]) -> RbmView<'a> {
        RbmView {
            factor_bias: &self.factor_bias,
            units: items
                .iter()
                .map(|&i| Unit {
                    bias: self.visible_bias[i],
                    weights: self.weight_row(i),
                    std: self.utility_std[i],
                    thresholds: Cow::Borrowed(&table[i]),
                })
                .collect(),
        }
    }

    pub fn utility_mean(&self, h: &[f64], i: usize) -> f64 {
        let field: f64 = self.weight_row(i).iter().zip(h).map(|(w, h)| w * h).sum();
        let s = self.utility_std[i];
        s * s * (self.visible_bias[i] + field)
    }

    pub fn utility_interval(&self, i: usize, level: usize) -> Result<Interval> {
        self.scales[i].utility_interval(level)
    }

    pub fn level_probabilities(&self, h: &[f64], i: usize) -> LevelDistribution {
        self.unit(i).level_probabilities_at(self.utility_mean(h, i))
    }

    /// `P(h_k = 1 | u)` with `utilities` given as `(variable, value)` pairs.
    pub fn factor_activation(&self, utilities: &[(usize, f64)], k: usize) -> f64 {
        let field: f64 = utilities
            .iter()
            .map(|&(i, u)| self.weights[i * self.n_factors + k] * u)
            .sum();
        logistic(self.factor_bias[k] + field)
    }

    pub fn is_finite(&self) -> bool {
        self.visible_bias
            .iter()
            .chain(&self.factor_bias)
            .chain(&self.weights)
            .chain(self.scales.iter().flat_map(|s| &s.log_gaps))
            .all(|x| x.is_finite())
    }
}

/// Random initial parameters: Gaussian weights with standard deviation
/// `init_std`, zero biases, unit utility scales and evenly spaced thresholds.
pub fn init_parameters<R: Rng + ?Sized>(
    n_visible: usize,
    n_factors: usize,
    scales: Vec<OrdinalScale>,
    init_std: f64,
    rng: &mut R,
) -> Result<VectorCrbmParameters> {
    if n_visible == 0 {
        return Err(CrbmError::invalid("model needs at least one visible variable"));
    }
    if scales.len() != n_visible {
        return Err(CrbmError::invalid(format!(
            "{} scales supplied for {n_visible} variables",
            scales.len()
        )));
    }
    let weights = gaussian_matrix(n_visible * n_factors, init_std, rng);
    Ok(VectorCrbmParameters {
        n_visible,
        n_factors,
        visible_bias: vec![0.0; n_visible],
        factor_bias: vec![0.0; n_factors],
        weights,
        utility_std: vec![1.0; n_visible],
        scales,
    })
}

pub(crate) fn gaussian_matrix<R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

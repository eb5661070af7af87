//! Synthetic ordinal data: samples from a trained model and a generator with
//! planted row and column structure.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Entry, ObservationSet};
use crate::error::{CrbmError, Result};
use crate::inference::bernoulli_into;
use crate::matrix::MatrixCrbmParameters;
use crate::model::{interval_for_level, logistic, VectorCrbmParameters};
use crate::par::*;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    /// Gibbs sweeps discarded before reading off a sample.
    pub burn_in: usize,
    /// Probability that a cell is observed.
    pub density: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            burn_in: 100,
            density: 1.0,
            seed: 0,
        }
    }
}

impl SampleConfig {
    fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(CrbmError::invalid("density must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// The level whose threshold interval contains `u`.
pub fn level_of(thresholds: &[f64], u: f64) -> usize {
    thresholds.iter().take_while(|&&t| u > t).count() + 1
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn gaussian<R: Rng + ?Sized>(mean: f64, std: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + std * z
}

/// Draws `n_instances` vectors from a vector CRBM by running an
/// independent free Gibbs chain per instance, then masks cells at random.
pub fn sample_vector(
    params: &VectorCrbmParameters,
    n_instances: usize,
    config: &SampleConfig,
) -> Result<ObservationSet> {
    params.validate()?;
    config.validate()?;
    let table = params.threshold_table();
    let view = params.view();
    let rows: Vec<Vec<Entry>> = (0..n_instances)
        .into_par_iter()
        .map(|d| {
            let mut rng = rng::stream(config.seed, &[d as u64]);
            let mut h = vec![0.0; params.n_factors];
            bernoulli_into(&vec![0.5; params.n_factors], &mut h, &mut rng);
            let mut u = vec![0.0; params.n_visible];
            for sweep in 0..=config.burn_in {
                for (i, x) in u.iter_mut().enumerate() {
                    *x = gaussian(params.utility_mean(&h, i), params.utility_std[i], &mut rng);
                }
                if sweep < config.burn_in {
                    let probs = view.activations(u.iter().copied().enumerate());
                    bernoulli_into(&probs, &mut h, &mut rng);
                }
            }
            u.iter()
                .enumerate()
                .filter(|_| config.density >= 1.0 || rng.random::<f64>() < config.density)
                .map(|(i, &x)| Entry {
                    instance: d,
                    item: i,
                    level: level_of(&table[i], x),
                    timestamp: None,
                })
                .collect()
        })
        .collect();
    Ok(ObservationSet {
        instance_ids: ids("u", n_instances),
        item_ids: ids("i", params.n_visible),
        item_levels: params.scales.iter().map(|s| s.levels()).collect(),
        entries: rows.into_iter().flatten().collect(),
    })
}

/// Draws one matrix from a matrix CRBM by blocked Gibbs sampling over the
/// cells kept by a random mask, the instance factors and the item factors.
pub fn sample_matrix(params: &MatrixCrbmParameters, config: &SampleConfig) -> Result<ObservationSet> {
    params.validate()?;
    config.validate()?;
    let (d_n, n_n, k, s) = (
        params.n_instances,
        params.n_items(),
        params.n_factors(),
        params.n_item_factors,
    );
    let mut rng = rng::stream(config.seed, &[0]);
    let cells: Vec<(usize, usize)> = (0..d_n)
        .flat_map(|d| (0..n_n).map(move |i| (d, i)))
        .filter(|_| config.density >= 1.0 || rng.random::<f64>() < config.density)
        .collect();
    let mut h = vec![0.0; d_n * k];
    let mut g = vec![0.0; n_n * s];
    bernoulli_into(&vec![0.5; h.len()], &mut h, &mut rng);
    bernoulli_into(&vec![0.5; g.len()], &mut g, &mut rng);
    let mut u = vec![0.0; cells.len()];
    for sweep in 0..=config.burn_in {
        for (x, &(d, i)) in u.iter_mut().zip(&cells) {
            let mu = params.cell_utility_mean(&h[d * k..(d + 1) * k], &g[i * s..(i + 1) * s], d, i);
            *x = gaussian(mu, params.items.utility_std[i], &mut rng);
        }
        if sweep == config.burn_in {
            break;
        }
        let mut hf: Vec<f64> = (0..d_n)
            .flat_map(|_| params.items.factor_bias.iter().copied())
            .collect();
        let mut gf: Vec<f64> = (0..n_n).flat_map(|_| params.item_factor_bias.iter().copied()).collect();
        for (&x, &(d, i)) in u.iter().zip(&cells) {
            for (f, w) in hf[d * k..(d + 1) * k].iter_mut().zip(params.items.weight_row(i)) {
                *f += w * x;
            }
            for (f, w) in gf[i * s..(i + 1) * s].iter_mut().zip(params.instance_weight_row(d)) {
                *f += w * x;
            }
        }
        let hp: Vec<f64> = hf.into_iter().map(logistic).collect();
        let gp: Vec<f64> = gf.into_iter().map(logistic).collect();
        bernoulli_into(&hp, &mut h, &mut rng);
        bernoulli_into(&gp, &mut g, &mut rng);
    }
    let entries = u
        .iter()
        .zip(&cells)
        .map(|(&x, &(d, i))| Entry {
            instance: d,
            item: i,
            level: level_of(&params.cell_thresholds(d, i), x),
            timestamp: None,
        })
        .collect();
    Ok(ObservationSet {
        instance_ids: ids("u", d_n),
        item_ids: ids("i", n_n),
        item_levels: vec![params.levels(); n_n],
        entries,
    })
}

/// Shape of a planted row-and-column data set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedConfig {
    pub n_instances: usize,
    pub n_items: usize,
    /// Binary instance factors.
    pub n_factors: usize,
    /// Binary item factors.
    pub n_item_factors: usize,
    pub levels: usize,
    pub density: f64,
    /// Scale of the factor loadings.
    pub signal: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_instances: 200,
            n_items: 100,
            n_factors: 5,
            n_item_factors: 5,
            levels: 5,
            density: 0.3,
            signal: 1.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Draws a matrix whose cells carry both an instance effect (binary
/// instance factors loading on item weights) and an item effect (binary item
/// factors loading on instance weights), with instance biases, then cuts the
/// utilities at quantile thresholds of the pooled utilities.
pub fn planted_matrix(config: &PlantedConfig) -> Result<ObservationSet> {
    if config.levels < 2 || config.n_instances == 0 || config.n_items == 0 {
        return Err(CrbmError::invalid(
            "planted matrix needs levels >= 2 and a nonempty shape",
        ));
    }
    if !(config.density > 0.0 && config.density <= 1.0) {
        return Err(CrbmError::invalid("density must lie in (0, 1]"));
    }
    let mut rng = rng::stream(config.seed, &[0]);
    let (d_n, n_n, k, s) = (
        config.n_instances,
        config.n_items,
        config.n_factors,
        config.n_item_factors,
    );
    let mut draw = |n: usize, std: f64| -> Vec<f64> { (0..n).map(|_| gaussian(0.0, std, &mut rng)).collect() };
    let w = draw(n_n * k, config.signal);
    let omega = draw(d_n * s, config.signal);
    let alpha = draw(n_n, 0.5 * config.signal);
    let beta = draw(d_n, 0.5 * config.signal);
    let mut h = vec![0.0; d_n * k];
    let mut g = vec![0.0; n_n * s];
    bernoulli_into(&vec![0.5; h.len()], &mut h, &mut rng);
    bernoulli_into(&vec![0.5; g.len()], &mut g, &mut rng);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut cells = Vec::new();
    for d in 0..d_n {
        for i in 0..n_n {
            if config.density < 1.0 && rng.random::<f64>() >= config.density {
                continue;
            }
            let mean = alpha[i]
                + beta[d]
                + dot(&w[i * k..(i + 1) * k], &h[d * k..(d + 1) * k])
                + dot(&omega[d * s..(d + 1) * s], &g[i * s..(i + 1) * s]);
            cells.push((d, i, gaussian(mean, config.noise, &mut rng)));
        }
    }
    if cells.is_empty() {
        return Err(CrbmError::EmptyDataset);
    }
    let mut sorted: Vec<f64> = cells.iter().map(|c| c.2).collect();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..config.levels)
        .map(|l| sorted[(l * sorted.len() / config.levels).min(sorted.len() - 1)])
        .collect();
    let entries = cells
        .into_iter()
        .map(|(d, i, u)| Entry {
            instance: d,
            item: i,
            level: level_of(&cuts, u),
            timestamp: None,
        })
        .collect();
    Ok(ObservationSet {
        instance_ids: ids("u", d_n),
        item_ids: ids("i", n_n),
        item_levels: vec![config.levels; n_n],
        entries,
    })
}

/// Base ordinal-probit probabilities of level `level` for unit `i` of a
/// zero-weight model, used to check sample frequencies.
pub fn base_probability(params: &VectorCrbmParameters, i: usize, level: usize) -> Result<f64> {
    let iv = interval_for_level(&params.thresholds(i), level)?;
    let mu = params.utility_std[i].powi(2) * params.visible_bias[i];
    crate::truncnorm::interval_mass(mu, params.utility_std[i], &iv)
}

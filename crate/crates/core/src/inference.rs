//! Posterior inference over binary factors given ordinal observations, and
//! predictive distributions for unobserved units.
//!
//! Everything here runs on an [`RbmView`] plus a list of observations, so the
//! same code serves the vector model and the per-instance / per-item
//! conditional models of the matrix model.

use rand::Rng;

use crate::error::{CrbmError, Result};
use crate::model::{LevelDistribution, Observed, RbmView};
use crate::truncnorm::{sample_truncated, truncated_mean, Interval};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcConfig {
    pub n_samples: usize,
    pub burn_in: usize,
    /// Average activation probabilities instead of binary draws.
    pub rao_blackwell: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            burn_in: 50,
            rao_blackwell: true,
        }
    }
}

/// Result of the mean-field recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    /// `Q_k(h_k = 1)`.
    pub factor_probs: Vec<f64>,
    /// Truncated utility means, aligned with the observations.
    pub utility_means: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// One `(u, h)` sample of the clamped chain. Utilities are aligned with the
/// observation list.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub utilities: Vec<f64>,
    pub factors: Vec<f64>,
}

impl GibbsState {
    /// All factors off; utilities are filled in by the first sweep.
    pub fn new(n_observed: usize, n_factors: usize) -> Self {
        Self {
            utilities: vec![0.0; n_observed],
            factors: vec![0.0; n_factors],
        }
    }

    pub fn with_factors(n_observed: usize, factors: Vec<f64>) -> Self {
        Self {
            utilities: vec![0.0; n_observed],
            factors,
        }
    }
}

pub(crate) fn observed_interval(view: &RbmView<'_>, o: &Observed, mean: f64) -> Result<Interval> {
    let unit = &view.units[o.unit];
    let iv = unit.interval(o.level)?;
    if !(iv.upper > iv.lower) {
        return Err(CrbmError::DegenerateMass {
            mass: 0.0,
            mean,
            std: unit.std,
            lower: iv.lower,
            upper: iv.upper,
        });
    }
    Ok(iv)
}

pub(crate) fn bernoulli_into<R: Rng + ?Sized>(probs: &[f64], out: &mut [f64], rng: &mut R) {
    for (h, &p) in out.iter_mut().zip(probs) {
        *h = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    }
}

/// One layer-wise Gibbs sweep of the clamped chain: every observed utility is
/// redrawn from its truncated conditional, then every factor from its
/// logistic conditional. Returns the activation probabilities the factors
/// were drawn from.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    view: &RbmView<'_>,
    obs: &[Observed],
    state: &mut GibbsState,
    rng: &mut R,
) -> Result<Vec<f64>> {
    debug_assert_eq!(state.utilities.len(), obs.len());
    debug_assert_eq!(state.factors.len(), view.n_factors());
    for (u, o) in state.utilities.iter_mut().zip(obs) {
        let unit = &view.units[o.unit];
        let mean = unit.mean(&state.factors);
        let iv = observed_interval(view, o, mean)?;
        *u = sample_truncated(mean, unit.std, &iv, rng);
    }
    let probs = view.activations(obs.iter().zip(&state.utilities).map(|(o, &u)| (o.unit, u)));
    bernoulli_into(&probs, &mut state.factors, rng);
    Ok(probs)
}

fn random_start<R: Rng + ?Sized>(n_obs: usize, k: usize, rng: &mut R) -> GibbsState {
    let mut state = GibbsState::new(n_obs, k);
    bernoulli_into(&vec![0.5; k], &mut state.factors, rng);
    state
}

fn check_samples(config: &McmcConfig) -> Result<()> {
    if config.n_samples == 0 {
        return Err(CrbmError::invalid("MCMC needs at least one sample"));
    }
    Ok(())
}

/// Monte-Carlo estimate of `P(h_k = 1 | v)` from a clamped Gibbs chain.
pub fn factor_posterior_mcmc<R: Rng + ?Sized>(
    view: &RbmView<'_>,
    obs: &[Observed],
    config: &McmcConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_samples(config)?;
    view.check_observations(obs)?;
    let k = view.n_factors();
    let mut state = random_start(obs.len(), k, rng);
    for _ in 0..config.burn_in {
        gibbs_sweep(view, obs, &mut state, rng)?;
    }
    let mut acc = vec![0.0; k];
    for _ in 0..config.n_samples {
        let probs = gibbs_sweep(view, obs, &mut state, rng)?;
        let sample = if config.rao_blackwell { &probs } else { &state.factors };
        acc.iter_mut().zip(sample).for_each(|(a, s)| *a += s);
    }
    acc.iter_mut().for_each(|a| *a /= config.n_samples as f64);
    Ok(acc)
}

/// Fixed-point iteration of the factorized posterior: factor probabilities
/// from truncated utility means, utility means from factor probabilities.
/// Starts from `Q_k = logistic(γ_k)`.
pub fn factor_posterior_meanfield(
    view: &RbmView<'_>,
    obs: &[Observed],
    config: &MeanFieldConfig,
) -> Result<MeanFieldState> {
    if config.max_iters == 0 || !(config.tol > 0.0) {
        return Err(CrbmError::invalid("mean-field needs max_iters >= 1 and tol > 0"));
    }
    view.check_observations(obs)?;
    let mut q = view.activations(std::iter::empty());
    let mut means = vec![0.0; obs.len()];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iters {
        iterations += 1;
        for (m, o) in means.iter_mut().zip(obs) {
            let unit = &view.units[o.unit];
            let mu = unit.mean(&q);
            let iv = observed_interval(view, o, mu)?;
            *m = truncated_mean_or_bound(mu, unit.std, &iv)?;
        }
        let next = view.activations(obs.iter().zip(&means).map(|(o, &u)| (o.unit, u)));
        let delta = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        if delta < config.tol {
            converged = true;
            break;
        }
    }
    Ok(MeanFieldState {
        factor_probs: q,
        utility_means: means,
        iterations,
        converged,
    })
}

/// Truncated mean, or the interval end nearest `mean` when the interval
/// carries no representable mass (the limit of the truncated mean).
fn truncated_mean_or_bound(mean: f64, std: f64, iv: &Interval) -> Result<f64> {
    match truncated_mean(mean, std, iv) {
        Err(CrbmError::DegenerateMass { .. }) => Ok(if mean > iv.upper { iv.upper } else { iv.lower }),
        r => r,
    }
}

fn check_targets(view: &RbmView<'_>, obs: &[Observed], targets: &[usize]) -> Result<()> {
    for &t in targets {
        if t >= view.units.len() {
            return Err(CrbmError::invalid(format!("target unit {t} out of range")));
        }
        if obs.iter().any(|o| o.unit == t) {
            return Err(CrbmError::invalid(format!("target unit {t} is observed")));
        }
    }
    Ok(())
}

/// Predictive distributions for several unobserved units by averaging the
/// level probabilities over posterior factor samples.
pub fn predict_mcmc_many<R: Rng + ?Sized>(
    view: &RbmView<'_>,
    obs: &[Observed],
    targets: &[usize],
    config: &McmcConfig,
    rng: &mut R,
) -> Result<Vec<LevelDistribution>> {
    check_samples(config)?;
    view.check_observations(obs)?;
    check_targets(view, obs, targets)?;
    let mut state = random_start(obs.len(), view.n_factors(), rng);
    for _ in 0..config.burn_in {
        gibbs_sweep(view, obs, &mut state, rng)?;
    }
    let mut acc: Vec<Vec<f64>> = targets.iter().map(|&t| vec![0.0; view.units[t].levels()]).collect();
    for _ in 0..config.n_samples {
        gibbs_sweep(view, obs, &mut state, rng)?;
        for (a, &t) in acc.iter_mut().zip(targets) {
            let d = view.units[t].level_probabilities(&state.factors);
            a.iter_mut().zip(&d.probs).for_each(|(x, p)| *x += p);
        }
    }
    Ok(acc
        .into_iter()
        .map(|mut probs| {
            probs.iter_mut().for_each(|p| *p /= config.n_samples as f64);
            LevelDistribution { probs }
        })
        .collect())
}

pub fn predict_mcmc<R: Rng + ?Sized>(
    view: &RbmView<'_>,
    obs: &[Observed],
    target: usize,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<LevelDistribution> {
    Ok(predict_mcmc_many(view, obs, &[target], config, rng)?.remove(0))
}

/// Predictive distributions evaluated at the mean-field factor posterior.
pub fn predict_variational_many(
    view: &RbmView<'_>,
    obs: &[Observed],
    targets: &[usize],
    config: &MeanFieldConfig,
) -> Result<Vec<LevelDistribution>> {
    check_targets(view, obs, targets)?;
    let mf = factor_posterior_meanfield(view, obs, config)?;
    Ok(targets
        .iter()
        .map(|&t| view.units[t].level_probabilities(&mf.factor_probs))
        .collect())
}

pub fn predict_variational(
    view: &RbmView<'_>,
    obs: &[Observed],
    target: usize,
    config: &MeanFieldConfig,
) -> Result<LevelDistribution> {
    Ok(predict_variational_many(view, obs, &[target], config)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{logistic, OrdinalScale, VectorCrbmParameters};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_weight_model() -> VectorCrbmParameters {
        VectorCrbmParameters {
            n_visible: 3,
            n_factors: 2,
            visible_bias: vec![0.3, -0.4, 0.1],
            factor_bias: vec![0.8, -1.2],
            weights: vec![0.0; 6],
            utility_std: vec![1.0; 3],
            scales: vec![OrdinalScale::new(-0.5, vec![0.0]); 3],
        }
    }

    fn coupled_model() -> VectorCrbmParameters {
        VectorCrbmParameters {
            n_visible: 3,
            n_factors: 2,
            visible_bias: vec![0.3, -0.4, 0.1],
            factor_bias: vec![0.2, -0.3],
            weights: vec![0.9, -0.5, 0.4, 0.7, -0.8, 0.2],
            utility_std: vec![1.0; 3],
            scales: vec![OrdinalScale::new(-0.5, vec![0.1]); 3],
        }
    }

    fn obs() -> Vec<Observed> {
        vec![Observed { unit: 0, level: 3 }, Observed { unit: 1, level: 1 }]
    }

    #[test]
    fn zero_weight_meanfield_converges_immediately() {
        let p = zero_weight_model();
        let view = p.view();
        let mf = factor_posterior_meanfield(&view, &obs(), &MeanFieldConfig::default()).unwrap();
        assert_eq!(mf.iterations, 1);
        assert!(mf.converged);
        assert_eq!(mf.factor_probs, vec![logistic(0.8), logistic(-1.2)]);
        let iv = p.utility_interval(0, 3).unwrap();
        assert_eq!(mf.utility_means[0], truncated_mean(0.3, 1.0, &iv).unwrap());
    }

    #[test]
    fn zero_weight_predictions_equal_base_distribution() {
        let p = zero_weight_model();
        let view = p.view();
        let base = p.unit(2).level_probabilities_at(0.1);
        let var = predict_variational(&view, &obs(), 2, &MeanFieldConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mc = predict_mcmc(&view, &obs(), 2, &McmcConfig::default(), &mut rng).unwrap();
        for ((a, b), c) in var.probs.iter().zip(&mc.probs).zip(&base.probs) {
            assert_abs_diff_eq!(*a, *c, epsilon = 1e-15);
            assert_abs_diff_eq!(*b, *c, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_weight_gibbs_decouples() {
        let p = zero_weight_model();
        let view = p.view();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let post = factor_posterior_mcmc(&view, &obs(), &McmcConfig::default(), &mut rng).unwrap();
        assert_abs_diff_eq!(post[0], logistic(0.8), epsilon = 1e-12);
        assert_abs_diff_eq!(post[1], logistic(-1.2), epsilon = 1e-12);
    }

    #[test]
    fn gibbs_is_reproducible_and_respects_intervals() {
        let p = coupled_model();
        let view = p.view();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = GibbsState::new(2, 2);
            let mut trace = Vec::new();
            for _ in 0..200 {
                gibbs_sweep(&view, &obs(), &mut state, &mut rng).unwrap();
                for (u, o) in state.utilities.iter().zip(obs()) {
                    assert!(p.utility_interval(o.unit, o.level).unwrap().contains(*u));
                }
                trace.push(state.clone());
            }
            trace
        };
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn meanfield_is_deterministic_and_bounded() {
        let p = coupled_model();
        let view = p.view();
        let cfg = MeanFieldConfig {
            max_iters: 7,
            tol: 1e-300,
        };
        let a = factor_posterior_meanfield(&view, &obs(), &cfg).unwrap();
        let b = factor_posterior_meanfield(&view, &obs(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iterations <= 7);
        assert!(a.factor_probs.iter().all(|q| (0.0..=1.0).contains(q)));
        for (m, o) in a.utility_means.iter().zip(obs()) {
            assert!(p.utility_interval(o.unit, o.level).unwrap().contains(*m));
        }
    }

    #[test]
    fn predictive_sums_to_one() {
        let p = coupled_model();
        let view = p.view();
        let var = predict_variational(&view, &obs(), 2, &MeanFieldConfig::default()).unwrap();
        assert!((var.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mc = predict_mcmc(&view, &obs(), 2, &McmcConfig::default(), &mut rng).unwrap();
        assert!((mc.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vertex_posterior_reproduces_level_probabilities() {
        let p = coupled_model();
        let mut q = p.clone();
        q.factor_bias = vec![1e4, -1e4];
        let view = q.view();
        let pred = predict_variational(&view, &obs(), 2, &MeanFieldConfig::default()).unwrap();
        assert_eq!(pred, q.level_probabilities(&[1.0, 0.0], 2));
    }

    #[test]
    fn argument_errors() {
        let p = coupled_model();
        let view = p.view();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let zero = McmcConfig {
            n_samples: 0,
            ..Default::default()
        };
        assert!(factor_posterior_mcmc(&view, &obs(), &zero, &mut rng).is_err());
        assert!(predict_variational(&view, &obs(), 0, &MeanFieldConfig::default()).is_err());
        let bad = vec![Observed { unit: 0, level: 4 }];
        assert!(matches!(
            factor_posterior_meanfield(&view, &bad, &MeanFieldConfig::default()),
            Err(CrbmError::OutOfRangeLevel { .. })
        ));
    }
}

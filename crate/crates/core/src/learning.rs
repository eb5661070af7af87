//! Stochastic maximum-likelihood training of the vector CRBM with clamped and
//! free persistent chains.
//!
//! The chain engine works on [`RbmView`]s built per instance by a caller
//! supplied closure, so the column and row passes of the matrix model run
//! through the same code.

use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::ObservationSet;
use crate::error::{CrbmError, Result};
use crate::eval::{log_probability, pseudo_log_likelihood};
use crate::inference::{bernoulli_into, gibbs_sweep, predict_variational_many, GibbsState, MeanFieldConfig};
use crate::model::{init_parameters, Observed, OrdinalScale, RbmView, VectorCrbmParameters};
use crate::par::*;
use crate::rng::{self, Stream};
use crate::truncnorm::{truncated_density_at, truncated_mean};

pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_CHAINS: u64 = 2;
pub(crate) const TAG_SHUFFLE: u64 = 4;
pub(crate) const TAG_ROW_CHAINS: u64 = 5;
pub(crate) const TAG_ROW_SHUFFLE: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChainMode {
    /// Free chains restart from the clamped sample at every update.
    Contrastive,
    /// Free chains persist across updates.
    #[default]
    Persistent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_factors: usize,
    /// Item-side factors of the matrix model; ignored by vector training.
    pub n_item_factors: usize,
    pub learning_rate: f64,
    /// Linear decay: the rate at epoch `e` is `lr * (1 - lr_decay * e / epochs)`.
    pub lr_decay: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub patience: usize,
    pub cd_sweeps: usize,
    /// Shared free chains, used only when every instance observes every item.
    pub free_chains: usize,
    pub chain_mode: ChainMode,
    pub init_std: f64,
    pub utility_std: f64,
    /// Posterior smoothing factor of the matrix model.
    pub eta: f64,
    pub row_pass_first: bool,
    pub seed: u64,
    pub mean_field: MeanFieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_factors: 10,
            n_item_factors: 10,
            learning_rate: 0.01,
            lr_decay: 0.0,
            epochs: 50,
            minibatch: 100,
            patience: 3,
            cd_sweeps: 1,
            free_chains: 100,
            chain_mode: ChainMode::Persistent,
            init_std: 0.01,
            utility_std: 1.0,
            eta: 0.7,
            row_pass_first: false,
            seed: 0,
            mean_field: MeanFieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CrbmError::invalid(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_decay) {
            return bad("lr decay must lie in [0, 1]");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.cd_sweeps == 0 {
            return bad("epochs, minibatch and cd sweeps must be at least 1");
        }
        if self.free_chains == 0 {
            return bad("at least one free chain is required");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must lie in (0, 1)");
        }
        if !(self.init_std >= 0.0) || !(self.utility_std > 0.0) {
            return bad("init std must be non-negative and utility std positive");
        }
        Ok(())
    }

    pub(crate) fn rate(&self, epoch: usize) -> f64 {
        self.learning_rate * (1.0 - self.lr_decay * epoch as f64 / self.epochs as f64).max(0.0)
    }
}

/// Sufficient statistics of one view, indexed by view unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewStatistics {
    pub n_factors: usize,
    pub visible: Vec<f64>,
    /// Row-major `units × K`.
    pub weights: Vec<f64>,
    pub factor: Vec<f64>,
    /// Gradient of the log clamped partition function with respect to each
    /// threshold value of each unit.
    pub thresholds: Vec<Vec<f64>>,
    pub cells: usize,
    pub skipped: usize,
    /// `P(h | u)` from the last sweep.
    pub activations: Vec<f64>,
}

impl ViewStatistics {
    pub fn new(view: &RbmView<'_>) -> Self {
        let k = view.n_factors();
        Self {
            n_factors: k,
            visible: vec![0.0; view.units.len()],
            weights: vec![0.0; view.units.len() * k],
            factor: vec![0.0; k],
            thresholds: view.units.iter().map(|u| vec![0.0; u.thresholds.len()]).collect(),
            cells: 0,
            skipped: 0,
            activations: Vec::new(),
        }
    }
}

/// Adds `weight` times the clamped statistics at factor state `h`:
/// `E[u | h, v]`, `E[u | h, v] h` and `h_stat` for the factors, plus the
/// boundary densities for the thresholds. Cells whose interval mass
/// underflows contribute nothing; their number is returned.
pub fn accumulate_clamped(
    view: &RbmView<'_>,
    obs: &[Observed],
    h: &[f64],
    h_stat: &[f64],
    weight: f64,
    stats: &mut ViewStatistics,
) -> Result<usize> {
    let k = view.n_factors();
    let mut skipped = 0;
    for o in obs {
        let unit = &view.units[o.unit];
        let mu = unit.mean(h);
        let iv = unit.interval(o.level)?;
        let moments = truncated_mean(mu, unit.std, &iv).and_then(|m| {
            let upper = if iv.upper.is_finite() {
                truncated_density_at(mu, unit.std, &iv, iv.upper)?
            } else {
                0.0
            };
            let lower = if iv.lower.is_finite() {
                truncated_density_at(mu, unit.std, &iv, iv.lower)?
            } else {
                0.0
            };
            Ok((m, upper, lower))
        });
        let (ubar, upper, lower) = match moments {
            Ok(v) => v,
            Err(CrbmError::DegenerateMass { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let j = o.unit;
        stats.visible[j] += weight * ubar;
        for (s, &hk) in stats.weights[j * k..(j + 1) * k].iter_mut().zip(h) {
            *s += weight * ubar * hk;
        }
        if iv.upper.is_finite() {
            stats.thresholds[j][o.level - 1] += weight * upper;
        }
        if iv.lower.is_finite() {
            stats.thresholds[j][o.level - 2] -= weight * lower;
        }
    }
    for (s, p) in stats.factor.iter_mut().zip(h_stat) {
        *s += weight * p;
    }
    Ok(skipped)
}

/// Adds `weight` times the free statistics at factor state `h` over every
/// unit of the view: `μ(h)`, `μ(h) h` and `h_stat`.
pub fn accumulate_free(view: &RbmView<'_>, h: &[f64], h_stat: &[f64], weight: f64, stats: &mut ViewStatistics) {
    let k = view.n_factors();
    for (j, unit) in view.units.iter().enumerate() {
        let mu = unit.mean(h);
        stats.visible[j] += weight * mu;
        for (s, &hk) in stats.weights[j * k..(j + 1) * k].iter_mut().zip(h) {
            *s += weight * mu * hk;
        }
    }
    for (s, p) in stats.factor.iter_mut().zip(h_stat) {
        *s += weight * p;
    }
}

/// Expected sufficient statistics of one phase summed over a batch, indexed
/// by variable.
#[derive(Debug, Clone, PartialEq)]
pub struct EssAccumulator {
    pub n_factors: usize,
    pub d_visible_bias: Vec<f64>,
    pub d_factor_bias: Vec<f64>,
    pub d_weights: Vec<f64>,
    pub d_thresholds: Vec<Vec<f64>>,
    /// Instances (clamped phase) or chains (free phase) accumulated.
    pub count: usize,
    pub cells: usize,
    pub skipped: usize,
}

impl EssAccumulator {
    pub fn new(params: &VectorCrbmParameters) -> Self {
        Self {
            n_factors: params.n_factors,
            d_visible_bias: vec![0.0; params.n_visible],
            d_factor_bias: vec![0.0; params.n_factors],
            d_weights: vec![0.0; params.weights.len()],
            d_thresholds: params.scales.iter().map(|s| vec![0.0; s.levels() - 1]).collect(),
            count: 0,
            cells: 0,
            skipped: 0,
        }
    }

    /// Scatters the statistics of a view whose unit `j` is variable `items[j]`.
    pub fn add_view(&mut self, stats: &ViewStatistics, items: &[usize]) {
        let k = self.n_factors;
        for (j, &i) in items.iter().enumerate() {
            self.d_visible_bias[i] += stats.visible[j];
            for (a, s) in self.d_weights[i * k..(i + 1) * k]
                .iter_mut()
                .zip(&stats.weights[j * k..(j + 1) * k])
            {
                *a += s;
            }
            for (a, s) in self.d_thresholds[i].iter_mut().zip(&stats.thresholds[j]) {
                *a += s;
            }
        }
        for (a, s) in self.d_factor_bias.iter_mut().zip(&stats.factor) {
            *a += s;
        }
        self.count += 1;
        self.cells += stats.cells;
        self.skipped += stats.skipped;
    }

    pub fn merge(&mut self, other: &EssAccumulator) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.d_visible_bias, &other.d_visible_bias);
        add(&mut self.d_factor_bias, &other.d_factor_bias);
        add(&mut self.d_weights, &other.d_weights);
        for (a, b) in self.d_thresholds.iter_mut().zip(&other.d_thresholds) {
            add(a, b);
        }
        self.count += other.count;
        self.cells += other.cells;
        self.skipped += other.skipped;
    }
}

/// Ascent direction over the free parameters of a vector model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradient {
    pub visible_bias: Vec<f64>,
    pub factor_bias: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_gaps: Vec<Vec<f64>>,
}

impl ParameterGradient {
    /// Clamped minus free statistics, each normalized per observed cell.
    /// Free statistics are rescaled from `free.count` chains to
    /// `clamped.count` instances first.
    pub fn from_ess(params: &VectorCrbmParameters, clamped: &EssAccumulator, free: &EssAccumulator) -> Self {
        let cells = clamped.cells.max(1) as f64;
        let c_norm = 1.0 / cells;
        let f_norm = if free.count == 0 {
            0.0
        } else {
            clamped.count as f64 / (cells * free.count as f64)
        };
        let diff = |c: &[f64], f: &[f64]| c.iter().zip(f).map(|(c, f)| c * c_norm - f * f_norm).collect();
        Self {
            visible_bias: diff(&clamped.d_visible_bias, &free.d_visible_bias),
            factor_bias: diff(&clamped.d_factor_bias, &free.d_factor_bias),
            weights: diff(&clamped.d_weights, &free.d_weights),
            log_gaps: params
                .scales
                .iter()
                .zip(&clamped.d_thresholds)
                .map(|(scale, g)| {
                    let g: Vec<f64> = g.iter().map(|x| x * c_norm).collect();
                    scale.log_gap_gradient(&g)
                })
                .collect(),
        }
    }
}

/// `θ ← θ + ν ∇` on biases, weights and log gaps.
pub fn apply_gradient(params: &mut VectorCrbmParameters, grad: &ParameterGradient, lr: f64) {
    let step = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(p, g)| *p += lr * g);
    step(&mut params.visible_bias, &grad.visible_bias);
    step(&mut params.factor_bias, &grad.factor_bias);
    step(&mut params.weights, &grad.weights);
    for (scale, g) in params.scales.iter_mut().zip(&grad.log_gaps) {
        step(&mut scale.log_gaps, g);
    }
}

/// One ascent step from clamped and free statistics.
pub fn gradient_step(params: &mut VectorCrbmParameters, clamped: &EssAccumulator, free: &EssAccumulator, lr: f64) {
    let grad = ParameterGradient::from_ess(params, clamped, free);
    apply_gradient(params, &grad, lr);
}

/// A binary factor state and the random stream that advances it.
#[derive(Debug, Clone)]
pub struct Chain {
    pub factors: Vec<f64>,
    rng: Stream,
}

impl Chain {
    fn new(n_factors: usize, mut rng: Stream) -> Self {
        let mut factors = vec![0.0; n_factors];
        bernoulli_into(&vec![0.5; n_factors], &mut factors, &mut rng);
        Self { factors, rng }
    }
}

/// Clamped chains, one per instance, and free chains, either one per
/// instance or a shared pool over the full model.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub mode: ChainMode,
    pub clamped: Vec<Chain>,
    pub free: Vec<Chain>,
    pub shared: bool,
}

impl ChainState {
    /// `shared_free` is the size of the shared pool, or `None` for one free
    /// chain per instance. Contrastive mode never shares.
    pub fn new(
        n_instances: usize,
        n_factors: usize,
        mode: ChainMode,
        shared_free: Option<usize>,
        seed: u64,
        tag: u64,
    ) -> Self {
        let shared = mode == ChainMode::Persistent && shared_free.is_some();
        let clamped = (0..n_instances as u64)
            .map(|d| Chain::new(n_factors, rng::stream(seed, &[tag, 0, d])))
            .collect();
        let n_free = if shared { shared_free.unwrap_or(0) } else { n_instances };
        let free = (0..n_free as u64)
            .map(|c| Chain::new(n_factors, rng::stream(seed, &[tag, 1, c])))
            .collect();
        Self {
            mode,
            clamped,
            free,
            shared,
        }
    }
}

/// Observations grouped by instance: the variables each instance observed,
/// in order, and the matching observation list over view units.
#[derive(Debug, Clone, Default)]
pub(crate) struct Rows {
    pub items: Vec<Vec<usize>>,
    pub obs: Vec<Vec<Observed>>,
}

impl Rows {
    pub fn from_pairs(pairs: Vec<Vec<(usize, usize)>>) -> Self {
        let items = pairs.iter().map(|r| r.iter().map(|&(i, _)| i).collect()).collect();
        let obs = pairs
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(j, &(_, level))| Observed { unit: j, level })
                    .collect()
            })
            .collect();
        Self { items, obs }
    }

    pub fn by_instance(set: &ObservationSet) -> Self {
        Self::from_pairs(set.by_instance())
    }

    pub fn by_item(set: &ObservationSet) -> Self {
        Self::from_pairs(set.by_item())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }
}

/// Shuffled minibatches of the instances that have observations, each sorted
/// so results are collected in instance order.
pub(crate) fn minibatches(rows: &Rows, size: usize, seed: u64, tags: &[u64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rows.len()).filter(|&d| !rows.obs[d].is_empty()).collect();
    order.shuffle(&mut rng::stream(seed, tags));
    order
        .chunks(size)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

fn batch_mask(n: usize, batch: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; n];
    batch.iter().for_each(|&d| mask[d] = true);
    mask
}

fn clamped_update(view: &RbmView<'_>, obs: &[Observed], chain: &mut Chain, sweeps: usize) -> Result<ViewStatistics> {
    let mut state = GibbsState::with_factors(obs.len(), std::mem::take(&mut chain.factors));
    let mut probs = Vec::new();
    for _ in 0..sweeps {
        probs = gibbs_sweep(view, obs, &mut state, &mut chain.rng)?;
    }
    let mut stats = ViewStatistics::new(view);
    let skipped = accumulate_clamped(view, obs, &state.factors, &probs, 1.0, &mut stats)?;
    stats.cells = obs.len() - skipped;
    stats.skipped = skipped;
    stats.activations = probs;
    chain.factors = state.factors;
    Ok(stats)
}

fn free_update(view: &RbmView<'_>, chain: &mut Chain, sweeps: usize) -> ViewStatistics {
    let mut u = vec![0.0; view.units.len()];
    let mut probs = Vec::new();
    for _ in 0..sweeps {
        for (x, unit) in u.iter_mut().zip(&view.units) {
            let z: f64 = chain.rng.sample(StandardNormal);
            *x = unit.mean(&chain.factors) + unit.std * z;
        }
        probs = view.activations(u.iter().copied().enumerate());
        bernoulli_into(&probs, &mut chain.factors, &mut chain.rng);
    }
    let mut stats = ViewStatistics::new(view);
    accumulate_free(view, &chain.factors, &probs, 1.0, &mut stats);
    stats.cells = view.units.len();
    stats.activations = probs;
    stats
}

/// Advances the clamped chain of every batch instance and returns its
/// statistics, in instance order.
pub(crate) fn clamped_pass<'a, F>(
    rows: &Rows,
    batch: &[usize],
    chains: &mut ChainState,
    view_of: &F,
    sweeps: usize,
) -> Result<Vec<(usize, ViewStatistics)>>
where
    F: Fn(usize, &[usize]) -> RbmView<'a> + Sync,
{
    let mask = batch_mask(rows.len(), batch);
    chains
        .clamped
        .par_iter_mut()
        .enumerate()
        .filter(|(d, _)| mask[*d])
        .map(|(d, chain)| {
            let view = view_of(d, &rows.items[d]);
            clamped_update(&view, &rows.obs[d], chain, sweeps).map(|s| (d, s))
        })
        .collect()
}

/// Advances the free chains. Per-instance chains follow the batch (and are
/// reseeded from the clamped state in contrastive mode); a shared pool
/// advances every chain over `shared_view`.
pub(crate) fn free_pass<'a, F>(
    rows: &Rows,
    batch: &[usize],
    chains: &mut ChainState,
    view_of: &F,
    shared_view: Option<&RbmView<'_>>,
    sweeps: usize,
) -> Vec<(usize, ViewStatistics)>
where
    F: Fn(usize, &[usize]) -> RbmView<'a> + Sync,
{
    if chains.shared {
        let view = shared_view.expect("shared free chains need a full view");
        return chains
            .free
            .par_iter_mut()
            .enumerate()
            .map(|(c, chain)| (c, free_update(view, chain, sweeps)))
            .collect();
    }
    let mask = batch_mask(rows.len(), batch);
    let contrastive = chains.mode == ChainMode::Contrastive;
    let clamped = &chains.clamped;
    chains
        .free
        .par_iter_mut()
        .enumerate()
        .filter(|(d, _)| mask[*d])
        .map(|(d, chain)| {
            if contrastive {
                chain.factors.clone_from(&clamped[d].factors);
            }
            let view = view_of(d, &rows.items[d]);
            (d, free_update(&view, chain, sweeps))
        })
        .collect()
}

/// Per-epoch monitoring record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_pseudo_ll: f64,
    pub valid_pseudo_ll: Option<f64>,
    pub valid_rmse: Option<f64>,
    pub valid_mae: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub skipped_cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Scores {
    pub train_pseudo_ll: f64,
    pub valid_pseudo_ll: Option<f64>,
    pub valid_rmse: Option<f64>,
    pub valid_mae: Option<f64>,
}

impl Scores {
    /// The quantity early stopping maximizes.
    pub fn monitor(&self) -> f64 {
        self.valid_pseudo_ll.unwrap_or(self.train_pseudo_ll)
    }

    pub fn record(&self, epoch: usize, wall_seconds: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_pseudo_ll: self.train_pseudo_ll,
            valid_pseudo_ll: self.valid_pseudo_ll,
            valid_rmse: self.valid_rmse,
            valid_mae: self.valid_mae,
            wall_seconds,
        }
    }
}

/// Train pseudo-likelihood per cell over `train`, and held-out metrics of
/// `valid` given each instance's training cells.
pub(crate) fn score<'a, F>(train: &Rows, valid: Option<&Rows>, view_of: &F, mf: &MeanFieldConfig) -> Result<Scores>
where
    F: Fn(usize, &[usize]) -> RbmView<'a> + Sync,
{
    let per_instance: Vec<(f64, usize)> = (0..train.len())
        .into_par_iter()
        .filter(|&d| !train.obs[d].is_empty())
        .map(|d| {
            let view = view_of(d, &train.items[d]);
            let n = train.obs[d].len();
            pseudo_log_likelihood(&view, &train.obs[d], mf).map(|pl| (pl * n as f64, n))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per_instance.iter().fold((0.0, 0), |(s, n), (a, b)| (s + a, n + b));
    let mut scores = Scores {
        train_pseudo_ll: sum / n.max(1) as f64,
        valid_pseudo_ll: None,
        valid_rmse: None,
        valid_mae: None,
    };
    let Some(valid) = valid else {
        return Ok(scores);
    };
    let per_instance: Vec<[f64; 4]> = (0..valid.len())
        .into_par_iter()
        .filter(|&d| !valid.obs[d].is_empty())
        .map(|d| {
            let (t_items, t_obs) = train_part(train, d);
            let mut items = t_items.to_vec();
            items.extend_from_slice(&valid.items[d]);
            let view = view_of(d, &items);
            let targets: Vec<usize> = (t_items.len()..items.len()).collect();
            let dists = predict_variational_many(&view, t_obs, &targets, mf)?;
            let mut acc = [0.0; 4];
            for (dist, o) in dists.iter().zip(&valid.obs[d]) {
                let truth = o.level as f64;
                acc[0] += log_probability(dist, o.level);
                acc[1] += (dist.mean() - truth).powi(2);
                acc[2] += (dist.map_level() as f64 - truth).abs();
                acc[3] += 1.0;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let total = per_instance.iter().fold([0.0; 4], |mut t, a| {
        t.iter_mut().zip(a).for_each(|(t, a)| *t += a);
        t
    });
    if total[3] > 0.0 {
        scores.valid_pseudo_ll = Some(total[0] / total[3]);
        scores.valid_rmse = Some((total[1] / total[3]).sqrt());
        scores.valid_mae = Some(total[2] / total[3]);
    }
    Ok(scores)
}

fn train_part(train: &Rows, d: usize) -> (&[usize], &[Observed]) {
    match (train.items.get(d), train.obs.get(d)) {
        (Some(i), Some(o)) => (i, o),
        _ => (&[], &[]),
    }
}

/// Patience-based stopping on a score to maximize.
#[derive(Debug, Clone)]
pub(crate) struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn update(&mut self, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale > self.patience)
        }
    }
}

pub(crate) fn ensure_finite(ok: bool, epoch: usize) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CrbmError::NonFinite(format!(
            "parameters diverged in epoch {}",
            epoch + 1
        )))
    }
}

pub(crate) fn check_training_data(train: &ObservationSet) -> Result<()> {
    if train.is_empty() {
        return Err(CrbmError::EmptyDataset);
    }
    Ok(())
}

/// Fresh parameters for `train`'s items and level counts.
pub fn initial_parameters(train: &ObservationSet, config: &TrainConfig) -> Result<VectorCrbmParameters> {
    let scales = train
        .item_levels
        .iter()
        .map(|&l| OrdinalScale::even(l))
        .collect::<Result<Vec<_>>>()?;
    let mut params = init_parameters(
        train.n_items(),
        config.n_factors,
        scales,
        config.init_std,
        &mut rng::stream(config.seed, &[TAG_INIT]),
    )?;
    params.utility_std = vec![config.utility_std; train.n_items()];
    Ok(params)
}

/// Scatters per-instance clamped and per-chain free statistics into
/// variable-indexed accumulators.
pub(crate) fn vector_ess(
    params: &VectorCrbmParameters,
    rows: &Rows,
    clamped: &[(usize, ViewStatistics)],
    free: &[(usize, ViewStatistics)],
    shared: bool,
) -> (EssAccumulator, EssAccumulator) {
    let mut c_acc = EssAccumulator::new(params);
    for (d, s) in clamped {
        c_acc.add_view(s, &rows.items[*d]);
    }
    let all: Vec<usize> = (0..params.n_visible).collect();
    let mut f_acc = EssAccumulator::new(params);
    for (d, s) in free {
        f_acc.add_view(s, if shared { &all } else { &rows.items[*d] });
    }
    (c_acc, f_acc)
}

/// `previous ← η previous + (1 - η) estimate`, elementwise.
pub fn smooth_posteriors(previous: &mut [f64], estimate: &[f64], eta: f64) {
    for (p, e) in previous.iter_mut().zip(estimate) {
        *p = (eta * *p + (1.0 - eta) * e).clamp(0.0, 1.0);
    }
}

/// Smooths row `d` of a row-major posterior table toward each instance's
/// clamped activations.
pub(crate) fn smooth_table(table: &mut [f64], width: usize, stats: &[(usize, ViewStatistics)], eta: f64) {
    for (d, s) in stats {
        smooth_posteriors(&mut table[d * width..(d + 1) * width], &s.activations, eta);
    }
}

/// One pass of minibatch updates over the training rows. Returns the number
/// of skipped cells. When `posteriors` is given, each instance's row of the
/// table is smoothed toward its clamped activations.
pub(crate) fn vector_epoch(
    params: &mut VectorCrbmParameters,
    rows: &Rows,
    chains: &mut ChainState,
    config: &TrainConfig,
    epoch: usize,
    mut posteriors: Option<&mut [f64]>,
) -> Result<usize> {
    let lr = config.rate(epoch);
    let mut skipped = 0;
    for batch in minibatches(rows, config.minibatch, config.seed, &[TAG_SHUFFLE, epoch as u64]) {
        let (clamped, free) = {
            let table = params.threshold_table();
            let view_of = |_: usize, items: &[usize]| params.subset_view(&table, items);
            let full = params.view();
            let c = clamped_pass(rows, &batch, chains, &view_of, config.cd_sweeps)?;
            let f = free_pass(rows, &batch, chains, &view_of, Some(&full), config.cd_sweeps);
            if let Some(table) = posteriors.as_deref_mut() {
                smooth_table(table, params.n_factors, &c, config.eta);
            }
            vector_ess(params, rows, &c, &f, chains.shared)
        };
        skipped += clamped.skipped;
        gradient_step(params, &clamped, &free, lr);
        ensure_finite(params.is_finite(), epoch)?;
    }
    Ok(skipped)
}

/// Trains a vector CRBM on `train`, monitoring `valid` for early stopping,
/// and returns the parameters of the best epoch.
pub fn train_vector(
    train: &ObservationSet,
    valid: Option<&ObservationSet>,
    config: &TrainConfig,
) -> Result<(VectorCrbmParameters, TrainingLog)> {
    config.validate()?;
    check_training_data(train)?;
    let params = initial_parameters(train, config)?;
    train_vector_from(params, train, valid, config)
}

/// [`train_vector`] from given starting parameters.
pub fn train_vector_from(
    params: VectorCrbmParameters,
    train: &ObservationSet,
    valid: Option<&ObservationSet>,
    config: &TrainConfig,
) -> Result<(VectorCrbmParameters, TrainingLog)> {
    let ((params, _), log) = fit_vector(params, train, valid, config, None)?;
    Ok((params, log))
}

/// Runs epochs of `step` on `state`, scoring after each, and returns the
/// state of the best-scoring epoch.
pub(crate) fn epoch_loop<S: Clone>(
    config: &TrainConfig,
    mut state: S,
    mut step: impl FnMut(&mut S, usize) -> Result<usize>,
    mut evaluate: impl FnMut(&S) -> Result<Scores>,
) -> Result<(S, TrainingLog)> {
    let mut log = TrainingLog::default();
    let mut stopping = EarlyStopping::new(config.patience);
    let mut best = state.clone();
    let start = Instant::now();
    for epoch in 0..config.epochs {
        let skipped = step(&mut state, epoch)?;
        if skipped > 0 {
            warn!(
                "epoch {}: skipped {skipped} cells with degenerate interval mass",
                epoch + 1
            );
        }
        log.skipped_cells += skipped;
        let scores = evaluate(&state)?;
        let record = scores.record(epoch + 1, start.elapsed().as_secs_f64());
        info!(
            "epoch {}: train pl {:.5} valid pl {:?}",
            record.epoch, record.train_pseudo_ll, record.valid_pseudo_ll
        );
        log.epochs.push(record);
        let (improved, stop) = stopping.update(scores.monitor());
        if improved {
            best.clone_from(&state);
            log.best_epoch = epoch + 1;
        }
        if stop {
            debug!("stopping after epoch {}", epoch + 1);
            log.stopped_early = true;
            break;
        }
    }
    Ok((best, log))
}

/// Parameters and, when tracked, the smoothed instance posteriors.
pub(crate) type VectorFit = (VectorCrbmParameters, Option<Vec<f64>>);

/// Vector training that also maintains a smoothed instance posterior table
/// (`D × K`) when `posteriors` is given; the table of the best epoch is
/// returned alongside.
pub(crate) fn fit_vector(
    params: VectorCrbmParameters,
    train: &ObservationSet,
    valid: Option<&ObservationSet>,
    config: &TrainConfig,
    posteriors: Option<Vec<f64>>,
) -> Result<(VectorFit, TrainingLog)> {
    config.validate()?;
    check_training_data(train)?;
    params.validate()?;
    let rows = Rows::by_instance(train);
    let valid_rows = valid.map(Rows::by_instance);
    let shared = train.is_fully_observed().then_some(config.free_chains);
    let mut chains = ChainState::new(
        rows.len(),
        params.n_factors,
        config.chain_mode,
        shared,
        config.seed,
        TAG_CHAINS,
    );
    epoch_loop(
        config,
        (params, posteriors),
        |(params, table), epoch| vector_epoch(params, &rows, &mut chains, config, epoch, table.as_deref_mut()),
        |(params, _)| {
            let table = params.threshold_table();
            let view_of = |_: usize, items: &[usize]| params.subset_view(&table, items);
            score(&rows, valid_rows.as_ref(), &view_of, &config.mean_field)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entry;
    use crate::model::OrdinalScale;
    use approx::assert_abs_diff_eq;

    fn zero_weight() -> VectorCrbmParameters {
        VectorCrbmParameters {
            n_visible: 3,
            n_factors: 2,
            visible_bias: vec![0.4, -0.2, 0.1],
            factor_bias: vec![0.3, -0.5],
            weights: vec![0.0; 6],
            utility_std: vec![1.0; 3],
            scales: vec![OrdinalScale::even(3).unwrap(); 3],
        }
    }

    fn coupled() -> VectorCrbmParameters {
        VectorCrbmParameters {
            weights: vec![0.6, -0.4, 0.3, 0.9, -0.7, 0.2],
            ..zero_weight()
        }
    }

    fn dataset(rows: &[&[(usize, usize)]], n_items: usize, levels: usize) -> ObservationSet {
        ObservationSet {
            instance_ids: (0..rows.len()).map(|d| format!("u{d}")).collect(),
            item_ids: (0..n_items).map(|i| format!("i{i}")).collect(),
            item_levels: vec![levels; n_items],
            entries: rows
                .iter()
                .enumerate()
                .flat_map(|(d, r)| {
                    r.iter().map(move |&(item, level)| Entry {
                        instance: d,
                        item,
                        level,
                        timestamp: None,
                    })
                })
                .collect(),
        }
    }

    #[test]
    fn zero_weight_clamped_statistic_is_truncated_mean() {
        let p = zero_weight();
        let view = p.view();
        let obs = [Observed { unit: 1, level: 3 }];
        let mut stats = ViewStatistics::new(&view);
        let h = [1.0, 0.0];
        accumulate_clamped(&view, &obs, &h, &h, 1.0, &mut stats).unwrap();
        let iv = p.utility_interval(1, 3).unwrap();
        assert_eq!(stats.visible[1], truncated_mean(-0.2, 1.0, &iv).unwrap());
        assert_eq!(stats.weights[2..4], [stats.visible[1], 0.0]);
        assert_eq!(stats.visible[0], 0.0);
    }

    #[test]
    fn zero_weight_free_statistic_is_bias() {
        let p = zero_weight();
        let view = p.view();
        let mut stats = ViewStatistics::new(&view);
        accumulate_free(&view, &[1.0, 1.0], &[0.5, 0.5], 1.0, &mut stats);
        assert_eq!(stats.visible, p.visible_bias);
    }

    #[test]
    fn boundary_terms_follow_the_level() {
        let p = coupled();
        let view = p.view();
        let h = [1.0, 0.0];
        let mut top = ViewStatistics::new(&view);
        accumulate_clamped(&view, &[Observed { unit: 0, level: 3 }], &h, &h, 1.0, &mut top).unwrap();
        assert_eq!(top.thresholds[0][0], 0.0);
        assert!(top.thresholds[0][1] < 0.0);
        let mut bottom = ViewStatistics::new(&view);
        accumulate_clamped(&view, &[Observed { unit: 0, level: 1 }], &h, &h, 1.0, &mut bottom).unwrap();
        assert!(bottom.thresholds[0][0] > 0.0);
        assert_eq!(bottom.thresholds[0][1], 0.0);
        let mut middle = ViewStatistics::new(&view);
        accumulate_clamped(&view, &[Observed { unit: 0, level: 2 }], &h, &h, 1.0, &mut middle).unwrap();
        assert!(middle.thresholds[0][0] < 0.0 && middle.thresholds[0][1] > 0.0);
    }

    #[test]
    fn identical_instances_normalize_to_single_instance() {
        let p = coupled();
        let view = p.view();
        let obs = [Observed { unit: 0, level: 2 }, Observed { unit: 2, level: 1 }];
        let h = [1.0, 1.0];
        let mut stats = ViewStatistics::new(&view);
        accumulate_clamped(&view, &obs, &h, &h, 1.0, &mut stats).unwrap();
        stats.cells = 2;
        let items = [0, 1, 2];
        let mut one = EssAccumulator::new(&p);
        one.add_view(&stats, &items);
        let mut many = EssAccumulator::new(&p);
        for _ in 0..5 {
            many.add_view(&stats, &items);
        }
        let free = EssAccumulator::new(&p);
        let g1 = ParameterGradient::from_ess(&p, &one, &free);
        let g5 = ParameterGradient::from_ess(&p, &many, &free);
        for (a, b) in g1.weights.iter().zip(&g5.weights) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        for (a, b) in g1.log_gaps.iter().flatten().zip(g5.log_gaps.iter().flatten()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn equal_phases_and_zero_rate_leave_parameters_unchanged() {
        let p = coupled();
        let view = p.view();
        let mut stats = ViewStatistics::new(&view);
        accumulate_free(&view, &[1.0, 0.0], &[0.2, 0.7], 1.0, &mut stats);
        stats.cells = 3;
        let mut acc = EssAccumulator::new(&p);
        acc.add_view(&stats, &[0, 1, 2]);
        let mut q = p.clone();
        gradient_step(&mut q, &acc, &acc, 0.5);
        assert_eq!(q, p);
        let mut clamped = EssAccumulator::new(&p);
        let mut cs = ViewStatistics::new(&view);
        accumulate_clamped(
            &view,
            &[Observed { unit: 0, level: 2 }],
            &[1.0, 0.0],
            &[1.0, 0.0],
            1.0,
            &mut cs,
        )
        .unwrap();
        cs.cells = 1;
        clamped.add_view(&cs, &[0, 1, 2]);
        gradient_step(&mut q, &clamped, &acc, 0.0);
        assert_eq!(q, p);
    }

    #[test]
    fn free_rescaling_matches_chain_counts() {
        let p = coupled();
        let view = p.view();
        let mut stats = ViewStatistics::new(&view);
        accumulate_free(&view, &[1.0, 0.0], &[0.2, 0.7], 1.0, &mut stats);
        stats.cells = 3;
        let mut clamped = EssAccumulator::new(&p);
        for _ in 0..4 {
            clamped.add_view(&stats, &[0, 1, 2]);
        }
        let mut free = EssAccumulator::new(&p);
        for _ in 0..10 {
            free.add_view(&stats, &[0, 1, 2]);
        }
        let g = ParameterGradient::from_ess(&p, &clamped, &free);
        assert!(g.visible_bias.iter().chain(&g.weights).all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn early_stopping_contract() {
        let mut s = EarlyStopping::new(0);
        assert_eq!(s.update(1.0), (true, false));
        assert_eq!(s.update(2.0), (true, false));
        assert_eq!(s.update(1.5), (false, true));
        let mut s = EarlyStopping::new(2);
        s.update(1.0);
        assert_eq!(s.update(0.5), (false, false));
        assert_eq!(s.update(0.5), (false, false));
        assert_eq!(s.update(0.5), (false, true));
    }

    fn small_data() -> (ObservationSet, ObservationSet) {
        let train = dataset(
            &[
                &[(0, 1), (1, 1), (2, 2)],
                &[(0, 3), (1, 3)],
                &[(1, 2), (2, 3)],
                &[(0, 1), (2, 1)],
                &[(0, 3), (1, 2), (2, 3)],
            ],
            3,
            3,
        );
        let valid = dataset(&[&[], &[(2, 3)], &[(0, 2)], &[(1, 1)], &[]], 3, 3);
        (train, valid)
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            n_factors: 2,
            epochs: 6,
            minibatch: 2,
            learning_rate: 0.1,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn without_time(log: &TrainingLog) -> TrainingLog {
        let mut log = log.clone();
        log.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
        log
    }

    #[test]
    fn training_is_deterministic() {
        let (train, valid) = small_data();
        let (a, la) = train_vector(&train, Some(&valid), &fast_config()).unwrap();
        let (b, lb) = train_vector(&train, Some(&valid), &fast_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(without_time(&la), without_time(&lb));
        assert!(la.epochs.iter().all(|e| e.valid_rmse.is_some()));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn training_does_not_depend_on_thread_count() {
        let (train, valid) = small_data();
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (a, la) = serial
            .install(|| train_vector(&train, Some(&valid), &fast_config()))
            .unwrap();
        let (b, lb) = train_vector(&train, Some(&valid), &fast_config()).unwrap();
        assert_eq!(a, b);
        assert_eq!(without_time(&la), without_time(&lb));
    }

    #[test]
    fn zero_patience_stops_at_first_non_improvement() {
        let (train, valid) = small_data();
        let config = TrainConfig {
            patience: 0,
            epochs: 40,
            ..fast_config()
        };
        let (_, log) = train_vector(&train, Some(&valid), &config).unwrap();
        let scores: Vec<f64> = log.epochs.iter().map(|e| e.valid_pseudo_ll.unwrap()).collect();
        let n = scores.len();
        if log.stopped_early {
            assert!(scores.windows(2).take(n - 2).all(|w| w[1] > w[0]));
            assert!(scores[n - 1] <= scores[n - 2]);
            assert_eq!(log.best_epoch, n - 1);
        } else {
            assert_eq!(n, 40);
        }
    }

    #[test]
    fn contrastive_and_fully_observed_modes_run() {
        let full = dataset(&[&[(0, 1), (1, 2)], &[(0, 3), (1, 3)], &[(0, 2), (1, 1)]], 2, 3);
        for mode in [ChainMode::Contrastive, ChainMode::Persistent] {
            let config = TrainConfig {
                chain_mode: mode,
                free_chains: 4,
                ..fast_config()
            };
            let (p, log) = train_vector(&full, None, &config).unwrap();
            assert!(p.is_finite());
            assert!(log
                .epochs
                .iter()
                .all(|e| e.valid_pseudo_ll.is_none() && e.train_pseudo_ll < 0.0));
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        let (train, _) = small_data();
        for config in [
            TrainConfig {
                learning_rate: 0.0,
                ..fast_config()
            },
            TrainConfig {
                eta: 1.0,
                ..fast_config()
            },
            TrainConfig {
                minibatch: 0,
                ..fast_config()
            },
        ] {
            assert!(matches!(
                train_vector(&train, None, &config),
                Err(CrbmError::InvalidArgument(_))
            ));
        }
        let empty = train.with_entries(Vec::new());
        assert!(matches!(
            train_vector(&empty, None, &fast_config()),
            Err(CrbmError::EmptyDataset)
        ));
    }
}

//! The matrix-variate CRBM: per-instance factors `h_d` and per-item factors
//! `g_i` jointly generating each observed cell, trained by alternating
//! column and row passes over conditional vector models.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::data::ObservationSet;
use crate::error::{CrbmError, Result};
use crate::learning::{
    clamped_pass, ensure_finite, epoch_loop, fit_vector, free_pass, initial_parameters, minibatches, score,
    smooth_table, ChainState, Rows, TrainConfig, TrainingLog, ViewStatistics, TAG_CHAINS, TAG_INIT, TAG_ROW_CHAINS,
    TAG_ROW_SHUFFLE, TAG_SHUFFLE,
};
use crate::model::{gaussian_matrix, RbmView, Unit, VectorCrbmParameters};
use crate::rng;

/// Parameters of a matrix CRBM over `n_instances` rows and
/// `items.n_visible` columns. The item side (α, γ, w, σ, τ) is stored as a
/// vector model; the instance side adds β, ξ, ω (`D × S`, row-major) and
/// threshold offsets κ (`D × (L - 1)`, row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCrbmParameters {
    pub items: VectorCrbmParameters,
    pub n_instances: usize,
    pub n_item_factors: usize,
    pub instance_bias: Vec<f64>,
    pub item_factor_bias: Vec<f64>,
    pub instance_weights: Vec<f64>,
    pub offsets: Vec<f64>,
}

/// Smoothed factor posteriors: `ĥ` (`D × K`) and `ĝ` (`N × S`), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTables {
    pub n_factors: usize,
    pub n_item_factors: usize,
    pub instance: Vec<f64>,
    pub item: Vec<f64>,
}

impl PosteriorTables {
    pub fn new(n_instances: usize, n_items: usize, n_factors: usize, n_item_factors: usize) -> Self {
        Self {
            n_factors,
            n_item_factors,
            instance: vec![0.5; n_instances * n_factors],
            item: vec![0.5; n_items * n_item_factors],
        }
    }

    pub fn instance_row(&self, d: usize) -> &[f64] {
        &self.instance[d * self.n_factors..(d + 1) * self.n_factors]
    }

    pub fn item_row(&self, i: usize) -> &[f64] {
        &self.item[i * self.n_item_factors..(i + 1) * self.n_item_factors]
    }

    /// `DK + NS`.
    pub fn n_factor_units(&self) -> usize {
        self.instance.len() + self.item.len()
    }
}

impl MatrixCrbmParameters {
    pub fn n_items(&self) -> usize {
        self.items.n_visible
    }

    pub fn n_factors(&self) -> usize {
        self.items.n_factors
    }

    /// Common number of levels of every item.
    pub fn levels(&self) -> usize {
        self.items.scales.first().map_or(2, |s| s.levels())
    }

    pub fn validate(&self) -> Result<()> {
        self.items.validate()?;
        let (d, s, l) = (self.n_instances, self.n_item_factors, self.levels());
        if self.instance_bias.len() != d
            || self.item_factor_bias.len() != s
            || self.instance_weights.len() != d * s
            || self.offsets.len() != d * (l - 1)
        {
            return Err(CrbmError::Format(format!(
                "inconsistent matrix dimensions for D={d}, S={s}"
            )));
        }
        if self.items.scales.iter().any(|sc| sc.levels() != l) {
            return Err(CrbmError::Format("matrix model needs a common number of levels".into()));
        }
        Ok(())
    }

    pub fn instance_weight_row(&self, d: usize) -> &[f64] {
        let s = self.n_item_factors;
        &self.instance_weights[d * s..(d + 1) * s]
    }

    pub fn offset_row(&self, d: usize) -> &[f64] {
        let m = self.levels() - 1;
        &self.offsets[d * m..(d + 1) * m]
    }

    /// `θ_1 = τ_1 + κ_1`, `θ_l = θ_{l-1} + exp(τ_l + κ_l)`.
    pub fn cell_thresholds(&self, d: usize, i: usize) -> Vec<f64> {
        let scale = &self.items.scales[i];
        let kappa = self.offset_row(d);
        let mut out = Vec::with_capacity(scale.levels() - 1);
        let mut t = scale.base + kappa[0];
        out.push(t);
        for (g, k) in scale.log_gaps.iter().zip(&kappa[1..]) {
            t += (g + k).exp();
            out.push(t);
        }
        out
    }

    /// `σ²(α_i + β_d + Σ_k w_ik h_k + Σ_s ω_ds g_s)`.
    pub fn cell_utility_mean(&self, h: &[f64], g: &[f64], d: usize, i: usize) -> f64 {
        let wh: f64 = self.items.weight_row(i).iter().zip(h).map(|(w, h)| w * h).sum();
        let og: f64 = self.instance_weight_row(d).iter().zip(g).map(|(w, g)| w * g).sum();
        let s = self.items.utility_std[i];
        s * s * (self.items.visible_bias[i] + self.instance_bias[d] + wh + og)
    }

    /// Instance `d` as a vector model over `items`, with the item factors
    /// replaced by `item_post` (`N × S`) and absorbed into the biases.
    pub fn column_view<'a>(&'a self, item_post: &[f64], d: usize, items: &[usize]) -> RbmView<'a> {
        let s = self.n_item_factors;
        let omega = self.instance_weight_row(d);
        RbmView {
            factor_bias: &self.items.factor_bias,
            units: items
                .iter()
                .map(|&i| {
                    let og: f64 = omega
                        .iter()
                        .zip(&item_post[i * s..(i + 1) * s])
                        .map(|(w, g)| w * g)
                        .sum();
                    Unit {
                        bias: self.items.visible_bias[i] + self.instance_bias[d] + og,
                        weights: self.items.weight_row(i),
                        std: self.items.utility_std[i],
                        thresholds: Cow::Owned(self.cell_thresholds(d, i)),
                    }
                })
                .collect(),
        }
    }

    /// Item `i` as a vector model over the `instances` that rated it, with
    /// factors `g_i`, weights ω and the instance factors replaced by
    /// `instance_post` (`D × K`).
    pub fn row_view<'a>(&'a self, instance_post: &[f64], i: usize, instances: &[usize]) -> RbmView<'a> {
        let k = self.n_factors();
        let w = self.items.weight_row(i);
        RbmView {
            factor_bias: &self.item_factor_bias,
            units: instances
                .iter()
                .map(|&d| {
                    let wh: f64 = w
                        .iter()
                        .zip(&instance_post[d * k..(d + 1) * k])
                        .map(|(w, h)| w * h)
                        .sum();
                    Unit {
                        bias: self.items.visible_bias[i] + self.instance_bias[d] + wh,
                        weights: self.instance_weight_row(d),
                        std: self.items.utility_std[i],
                        thresholds: Cow::Owned(self.cell_thresholds(d, i)),
                    }
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.items.is_finite()
            && [
                &self.instance_bias,
                &self.item_factor_bias,
                &self.instance_weights,
                &self.offsets,
            ]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Ascent direction over every matrix-model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGradient {
    pub item_bias: Vec<f64>,
    pub instance_bias: Vec<f64>,
    pub factor_bias: Vec<f64>,
    pub item_factor_bias: Vec<f64>,
    pub item_weights: Vec<f64>,
    pub instance_weights: Vec<f64>,
    pub log_gaps: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl MatrixGradient {
    pub fn zeros(params: &MatrixCrbmParameters) -> Self {
        Self {
            item_bias: vec![0.0; params.n_items()],
            instance_bias: vec![0.0; params.n_instances],
            factor_bias: vec![0.0; params.n_factors()],
            item_factor_bias: vec![0.0; params.n_item_factors],
            item_weights: vec![0.0; params.items.weights.len()],
            instance_weights: vec![0.0; params.instance_weights.len()],
            log_gaps: params
                .items
                .scales
                .iter()
                .map(|s| vec![0.0; s.log_gaps.len()])
                .collect(),
            offsets: vec![0.0; params.offsets.len()],
        }
    }

    /// Adds `scale` times the statistics of instance `d`'s column view over
    /// `items`: α, β, γ, w and, through the cell thresholds, τ and κ.
    pub fn add_column(
        &mut self,
        params: &MatrixCrbmParameters,
        d: usize,
        items: &[usize],
        stats: &ViewStatistics,
        scale: f64,
    ) {
        let k = params.n_factors();
        let m = params.levels() - 1;
        for (j, &i) in items.iter().enumerate() {
            let v = scale * stats.visible[j];
            self.item_bias[i] += v;
            self.instance_bias[d] += v;
            for (a, s) in self.item_weights[i * k..(i + 1) * k]
                .iter_mut()
                .zip(&stats.weights[j * k..(j + 1) * k])
            {
                *a += scale * s;
            }
            let g = &stats.thresholds[j];
            if g.iter().all(|x| *x == 0.0) {
                continue;
            }
            let log_gaps = &params.items.scales[i].log_gaps;
            let kappa = params.offset_row(d);
            let offsets = &mut self.offsets[d * m..(d + 1) * m];
            offsets[0] += scale * g.iter().sum::<f64>();
            let mut tail = 0.0;
            for l in (1..m).rev() {
                tail += g[l];
                let e = (log_gaps[l - 1] + kappa[l]).exp() * tail * scale;
                self.log_gaps[i][l - 1] += e;
                offsets[l] += e;
            }
        }
        for (a, s) in self.factor_bias.iter_mut().zip(&stats.factor) {
            *a += scale * s;
        }
    }

    /// Adds `scale` times the statistics of item `i`'s row view over
    /// `instances`: ξ and ω.
    pub fn add_row(&mut self, params: &MatrixCrbmParameters, instances: &[usize], stats: &ViewStatistics, scale: f64) {
        let s = params.n_item_factors;
        for (j, &d) in instances.iter().enumerate() {
            for (a, x) in self.instance_weights[d * s..(d + 1) * s]
                .iter_mut()
                .zip(&stats.weights[j * s..(j + 1) * s])
            {
                *a += scale * x;
            }
        }
        for (a, x) in self.item_factor_bias.iter_mut().zip(&stats.factor) {
            *a += scale * x;
        }
    }

    pub fn apply(&self, params: &mut MatrixCrbmParameters, lr: f64) {
        let step = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(p, g)| *p += lr * g);
        step(&mut params.items.visible_bias, &self.item_bias);
        step(&mut params.instance_bias, &self.instance_bias);
        step(&mut params.items.factor_bias, &self.factor_bias);
        step(&mut params.item_factor_bias, &self.item_factor_bias);
        step(&mut params.items.weights, &self.item_weights);
        step(&mut params.instance_weights, &self.instance_weights);
        for (scale, g) in params.items.scales.iter_mut().zip(&self.log_gaps) {
            step(&mut scale.log_gaps, g);
        }
        step(&mut params.offsets, &self.offsets);
    }
}

/// Fresh matrix parameters: the item side as in vector training, ω drawn
/// from its own stream, β and κ zero.
pub fn initial_matrix_parameters(train: &ObservationSet, config: &TrainConfig) -> Result<MatrixCrbmParameters> {
    let levels = common_levels(train)?;
    let items = initial_parameters(train, config)?;
    let (d, s) = (train.n_instances(), config.n_item_factors);
    Ok(MatrixCrbmParameters {
        items,
        n_instances: d,
        n_item_factors: s,
        instance_bias: vec![0.0; d],
        item_factor_bias: vec![0.0; s],
        instance_weights: gaussian_matrix(d * s, config.init_std, &mut rng::stream(config.seed, &[TAG_INIT, 1])),
        offsets: vec![0.0; d * (levels - 1)],
    })
}

fn common_levels(set: &ObservationSet) -> Result<usize> {
    let levels = set.max_levels();
    if set.item_levels.iter().any(|&l| l != levels) {
        return Err(CrbmError::invalid(
            "matrix model needs every item on the same number of levels",
        ));
    }
    Ok(levels)
}

#[derive(Debug, Clone)]
struct MatrixState {
    params: MatrixCrbmParameters,
    tables: PosteriorTables,
}

struct Passes<'a> {
    columns: Rows,
    rows: Rows,
    column_chains: ChainState,
    row_chains: ChainState,
    config: &'a TrainConfig,
}

impl Passes<'_> {
    /// Column pass: updates α, β, γ, w, τ, κ and smooths ĥ.
    fn column(&mut self, state: &mut MatrixState, epoch: usize) -> Result<usize> {
        let config = self.config;
        let lr = config.rate(epoch);
        let mut skipped = 0;
        for batch in minibatches(
            &self.columns,
            config.minibatch,
            config.seed,
            &[TAG_SHUFFLE, epoch as u64],
        ) {
            let (grad, c) = {
                let MatrixState { params, tables } = &*state;
                let view_of = |d: usize, items: &[usize]| params.column_view(&tables.item, d, items);
                let c = clamped_pass(
                    &self.columns,
                    &batch,
                    &mut self.column_chains,
                    &view_of,
                    config.cd_sweeps,
                )?;
                let f = free_pass(
                    &self.columns,
                    &batch,
                    &mut self.column_chains,
                    &view_of,
                    None,
                    config.cd_sweeps,
                );
                let cells: usize = c.iter().map(|(_, s)| s.cells).sum();
                skipped += c.iter().map(|(_, s)| s.skipped).sum::<usize>();
                let norm = 1.0 / cells.max(1) as f64;
                let mut grad = MatrixGradient::zeros(params);
                for (d, s) in &c {
                    grad.add_column(params, *d, &self.columns.items[*d], s, norm);
                }
                for (d, s) in &f {
                    grad.add_column(params, *d, &self.columns.items[*d], s, -norm);
                }
                (grad, c)
            };
            smooth_table(&mut state.tables.instance, state.params.n_factors(), &c, config.eta);
            grad.apply(&mut state.params, lr);
            ensure_finite(state.params.is_finite(), epoch)?;
        }
        Ok(skipped)
    }

    /// Row pass: updates ξ, ω and smooths ĝ.
    fn row(&mut self, state: &mut MatrixState, epoch: usize) -> Result<usize> {
        let config = self.config;
        let lr = config.rate(epoch);
        let mut skipped = 0;
        for batch in minibatches(
            &self.rows,
            config.minibatch,
            config.seed,
            &[TAG_ROW_SHUFFLE, epoch as u64],
        ) {
            let (grad, c) = {
                let MatrixState { params, tables } = &*state;
                let view_of = |i: usize, insts: &[usize]| params.row_view(&tables.instance, i, insts);
                let c = clamped_pass(&self.rows, &batch, &mut self.row_chains, &view_of, config.cd_sweeps)?;
                let f = free_pass(
                    &self.rows,
                    &batch,
                    &mut self.row_chains,
                    &view_of,
                    None,
                    config.cd_sweeps,
                );
                let cells: usize = c.iter().map(|(_, s)| s.cells).sum();
                skipped += c.iter().map(|(_, s)| s.skipped).sum::<usize>();
                let norm = 1.0 / cells.max(1) as f64;
                let mut grad = MatrixGradient::zeros(params);
                for (i, s) in &c {
                    grad.add_row(params, &self.rows.items[*i], s, norm);
                }
                for (i, s) in &f {
                    grad.add_row(params, &self.rows.items[*i], s, -norm);
                }
                (grad, c)
            };
            smooth_table(&mut state.tables.item, state.params.n_item_factors, &c, config.eta);
            grad.apply(&mut state.params, lr);
            ensure_finite(state.params.is_finite(), epoch)?;
        }
        Ok(skipped)
    }
}

/// Trains a matrix CRBM and returns the parameters and posterior tables of
/// the best epoch. With no item factors the model is the vector CRBM with
/// β and κ held at zero, and training runs the vector procedure.
pub fn train_matrix(
    train: &ObservationSet,
    valid: Option<&ObservationSet>,
    config: &TrainConfig,
) -> Result<(MatrixCrbmParameters, PosteriorTables, TrainingLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(CrbmError::EmptyDataset);
    }
    let params = initial_matrix_parameters(train, config)?;
    train_matrix_from(params, train, valid, config)
}

/// [`train_matrix`] from given starting parameters.
pub fn train_matrix_from(
    params: MatrixCrbmParameters,
    train: &ObservationSet,
    valid: Option<&ObservationSet>,
    config: &TrainConfig,
) -> Result<(MatrixCrbmParameters, PosteriorTables, TrainingLog)> {
    config.validate()?;
    params.validate()?;
    if params.n_instances != train.n_instances() || params.n_items() != train.n_items() {
        return Err(CrbmError::invalid("model dimensions do not match the training data"));
    }
    let tables = PosteriorTables::new(
        params.n_instances,
        params.n_items(),
        params.n_factors(),
        params.n_item_factors,
    );
    if params.n_item_factors == 0 {
        let MatrixCrbmParameters { items, .. } = params.clone();
        let ((items, instance), log) = fit_vector(items, train, valid, config, Some(tables.instance))?;
        let tables = PosteriorTables {
            instance: instance.unwrap_or_default(),
            ..tables
        };
        return Ok((MatrixCrbmParameters { items, ..params }, tables, log));
    }
    let columns = Rows::by_instance(train);
    let rows = Rows::by_item(train);
    let valid_rows = valid.map(Rows::by_instance);
    let mut passes = Passes {
        column_chains: ChainState::new(
            columns.len(),
            params.n_factors(),
            config.chain_mode,
            None,
            config.seed,
            TAG_CHAINS,
        ),
        row_chains: ChainState::new(
            rows.len(),
            params.n_item_factors,
            config.chain_mode,
            None,
            config.seed,
            TAG_ROW_CHAINS,
        ),
        columns: columns.clone(),
        rows,
        config,
    };
    let (best, log) = epoch_loop(
        config,
        MatrixState { params, tables },
        |state, epoch| {
            let mut skipped = 0;
            for row_pass in [config.row_pass_first, !config.row_pass_first] {
                skipped += if row_pass {
                    passes.row(state, epoch)?
                } else {
                    passes.column(state, epoch)?
                };
            }
            Ok(skipped)
        },
        |state| {
            let view_of = |d: usize, items: &[usize]| state.params.column_view(&state.tables.item, d, items);
            score(&columns, valid_rows.as_ref(), &view_of, &config.mean_field)
        },
    )?;
    Ok((best.params, best.tables, log))
}

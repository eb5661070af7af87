//! Predictive distributions for `(instance, item)` queries given a saved
//! model and each instance's observed cells.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::data::ObservationSet;
use crate::error::{CrbmError, Result};
use crate::inference::{
    factor_posterior_mcmc, factor_posterior_meanfield, predict_mcmc_many, predict_variational_many, McmcConfig,
    MeanFieldConfig,
};
use crate::io::{ModelParameters, SavedModel};
use crate::model::{LevelDistribution, Observed, OrdinalScale, RbmView, Unit};
use crate::par::*;
use crate::rng;

/// Posterior probability assumed for every factor of an unknown instance.
pub const COLD_START_POSTERIOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Variational(MeanFieldConfig),
    Mcmc { config: McmcConfig, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Query {
    pub instance: String,
    pub item: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub distribution: LevelDistribution,
    /// The instance or the item was unknown and a fallback was used.
    pub cold_start: bool,
}

/// Predicts every query. Each instance is conditioned on its cells in
/// `context` except the items being queried. Unknown instances use
/// factor posteriors of 0.5; unknown items get the base distribution of an
/// evenly spaced scale.
pub fn predict(
    model: &SavedModel,
    context: &ObservationSet,
    queries: &[Query],
    method: &Method,
) -> Result<Vec<Prediction>> {
    model.validate()?;
    let items = model.items();
    let item_index: HashMap<&str, usize> = model
        .item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let instance_index: HashMap<&str, usize> = model
        .instance_ids
        .iter()
        .enumerate()
        .map(|(d, s)| (s.as_str(), d))
        .collect();

    let mut context_rows: HashMap<&str, Vec<(usize, usize)>> = HashMap::new();
    for e in &context.entries {
        if let Some(&i) = item_index.get(context.item_ids[e.item].as_str()) {
            let levels = items.scales[i].levels();
            if e.level > levels {
                return Err(CrbmError::OutOfRangeLevel { level: e.level, levels });
            }
            context_rows
                .entry(context.instance_ids[e.instance].as_str())
                .or_default()
                .push((i, e.level));
        }
    }

    let mut groups: Vec<(&str, Vec<usize>)> = Vec::new();
    let mut group_of: HashMap<&str, usize> = HashMap::new();
    for (q, query) in queries.iter().enumerate() {
        let g = *group_of.entry(query.instance.as_str()).or_insert_with(|| {
            groups.push((query.instance.as_str(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(q);
    }

    let base_levels = items.scales.iter().map(OrdinalScale::levels).max().unwrap_or(2);
    let base = base_distribution(base_levels)?;
    let table = items.threshold_table();
    let k = items.n_factors;
    let cold_h = vec![COLD_START_POSTERIOR; k];
    let uniform_g: Vec<f64>;
    let item_post: &[f64] = match (&model.model, &model.posteriors) {
        (ModelParameters::Matrix(_), Some(t)) => &t.item,
        (ModelParameters::Matrix(m), None) => {
            uniform_g = vec![COLD_START_POSTERIOR; m.n_items() * m.n_item_factors];
            &uniform_g
        }
        _ => &[],
    };

    let per_group: Vec<Vec<(usize, Prediction)>> = groups
        .par_iter()
        .enumerate()
        .map(|(gi, (instance, qs))| -> Result<Vec<(usize, Prediction)>> {
            let mut out = Vec::with_capacity(qs.len());
            let mut targets: Vec<usize> = Vec::new();
            for &q in qs {
                match item_index.get(queries[q].item.as_str()) {
                    Some(&i) => {
                        if !targets.contains(&i) {
                            targets.push(i);
                        }
                    }
                    None => out.push((
                        q,
                        Prediction {
                            distribution: base.clone(),
                            cold_start: true,
                        },
                    )),
                }
            }
            if targets.is_empty() {
                return Ok(out);
            }
            let known = match &model.model {
                ModelParameters::Vector(_) => context_rows.contains_key(instance),
                ModelParameters::Matrix(_) => instance_index.contains_key(instance),
            };
            let dists: Vec<LevelDistribution> = if !known {
                targets
                    .iter()
                    .map(|&i| items.unit(i).level_probabilities(&cold_h))
                    .collect()
            } else {
                let cells: Vec<(usize, usize)> = context_rows
                    .get(instance)
                    .map(|r| r.iter().copied().filter(|(i, _)| !targets.contains(i)).collect())
                    .unwrap_or_default();
                let mut view_items: Vec<usize> = cells.iter().map(|&(i, _)| i).collect();
                view_items.extend(&targets);
                let view = match &model.model {
                    ModelParameters::Vector(p) => p.subset_view(&table, &view_items),
                    ModelParameters::Matrix(m) => m.column_view(item_post, instance_index[instance], &view_items),
                };
                let obs: Vec<Observed> = cells
                    .iter()
                    .enumerate()
                    .map(|(j, &(_, level))| Observed { unit: j, level })
                    .collect();
                let target_units: Vec<usize> = (cells.len()..view_items.len()).collect();
                infer(&view, &obs, &target_units, method, gi as u64)?
            };
            for &q in qs {
                if let Some(t) = item_index
                    .get(queries[q].item.as_str())
                    .and_then(|i| targets.iter().position(|x| x == i))
                {
                    out.push((
                        q,
                        Prediction {
                            distribution: dists[t].clone(),
                            cold_start: !known,
                        },
                    ));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut slots: Vec<Option<Prediction>> = vec![None; queries.len()];
    for (q, p) in per_group.into_iter().flatten() {
        slots[q] = Some(p);
    }
    Ok(slots.into_iter().map(|p| p.expect("every query answered")).collect())
}

fn infer(
    view: &RbmView<'_>,
    obs: &[Observed],
    targets: &[usize],
    method: &Method,
    stream: u64,
) -> Result<Vec<LevelDistribution>> {
    match method {
        Method::Variational(cfg) => predict_variational_many(view, obs, targets, cfg),
        Method::Mcmc { config, seed } => {
            predict_mcmc_many(view, obs, targets, config, &mut rng::stream(*seed, &[stream]))
        }
    }
}

/// Which factor table to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Instances,
    /// Item factors; matrix models only.
    Items,
}

/// Factor posteriors of every instance in `data` (or, for matrix models,
/// of every item the model knows) given all of its cells, as `(id, row)`
/// pairs in the order of `data`'s instances or the model's items. Item
/// posteriors condition on the instance posteriors computed first.
pub fn posteriors(
    model: &SavedModel,
    data: &ObservationSet,
    side: Side,
    method: &Method,
) -> Result<Vec<(String, Vec<f64>)>> {
    model.validate()?;
    let items = model.items();
    let item_index: HashMap<&str, usize> = model
        .item_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let instance_index: HashMap<&str, usize> = model
        .instance_ids
        .iter()
        .enumerate()
        .map(|(d, s)| (s.as_str(), d))
        .collect();
    let mut rows: Vec<Vec<(usize, usize)>> = vec![Vec::new(); data.n_instances()];
    for e in &data.entries {
        if let Some(&i) = item_index.get(data.item_ids[e.item].as_str()) {
            let levels = items.scales[i].levels();
            if e.level > levels {
                return Err(CrbmError::OutOfRangeLevel { level: e.level, levels });
            }
            rows[e.instance].push((i, e.level));
        }
    }
    let table = items.threshold_table();
    let uniform_g: Vec<f64>;
    let item_post: &[f64] = match (&model.model, &model.posteriors) {
        (ModelParameters::Matrix(_), Some(t)) => &t.item,
        (ModelParameters::Matrix(m), None) => {
            uniform_g = vec![COLD_START_POSTERIOR; m.n_items() * m.n_item_factors];
            &uniform_g
        }
        _ => &[],
    };
    let instance_rows: Vec<Vec<f64>> = rows
        .par_iter()
        .enumerate()
        .map(|(d, cells)| {
            let view_items: Vec<usize> = cells.iter().map(|c| c.0).collect();
            let view = match &model.model {
                ModelParameters::Vector(p) => p.subset_view(&table, &view_items),
                ModelParameters::Matrix(m) => match instance_index.get(data.instance_ids[d].as_str()) {
                    Some(&md) => m.column_view(item_post, md, &view_items),
                    None => return Ok(vec![COLD_START_POSTERIOR; items.n_factors]),
                },
            };
            let obs: Vec<Observed> = cells
                .iter()
                .enumerate()
                .map(|(j, &(_, level))| Observed { unit: j, level })
                .collect();
            posterior_of(&view, &obs, method, d as u64)
        })
        .collect::<Result<_>>()?;
    if side == Side::Instances {
        return Ok(data.instance_ids.iter().cloned().zip(instance_rows).collect());
    }
    let ModelParameters::Matrix(m) = &model.model else {
        return Err(CrbmError::invalid("item posteriors need a matrix model"));
    };
    // Instance posteriors laid out by model instance; unseen ones stay at 0.5.
    let k = m.n_factors();
    let mut instance_post = vec![COLD_START_POSTERIOR; m.n_instances * k];
    let mut columns: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m.n_items()];
    for (d, cells) in rows.iter().enumerate() {
        let Some(&md) = instance_index.get(data.instance_ids[d].as_str()) else {
            continue;
        };
        instance_post[md * k..(md + 1) * k].copy_from_slice(&instance_rows[d]);
        for &(i, level) in cells {
            columns[i].push((md, level));
        }
    }
    let item_rows: Vec<Vec<f64>> = columns
        .par_iter()
        .enumerate()
        .map(|(i, cells)| {
            let instances: Vec<usize> = cells.iter().map(|c| c.0).collect();
            let view = m.row_view(&instance_post, i, &instances);
            let obs: Vec<Observed> = cells
                .iter()
                .enumerate()
                .map(|(j, &(_, level))| Observed { unit: j, level })
                .collect();
            posterior_of(&view, &obs, method, i as u64)
        })
        .collect::<Result<_>>()?;
    Ok(model.item_ids.iter().cloned().zip(item_rows).collect())
}

fn posterior_of(view: &RbmView<'_>, obs: &[Observed], method: &Method, stream: u64) -> Result<Vec<f64>> {
    match method {
        Method::Variational(cfg) => Ok(factor_posterior_meanfield(view, obs, cfg)?.factor_probs),
        Method::Mcmc { config, seed } => factor_posterior_mcmc(view, obs, config, &mut rng::stream(*seed, &[stream])),
    }
}

/// Level probabilities of a standard normal utility on an evenly spaced scale.
pub fn base_distribution(levels: usize) -> Result<LevelDistribution> {
    let scale = OrdinalScale::even(levels)?;
    let unit = Unit {
        bias: 0.0,
        weights: &[],
        std: 1.0,
        thresholds: Cow::Owned(scale.thresholds()),
    };
    Ok(unit.level_probabilities_at(0.0))
}

//! Point-prediction metrics and pseudo-likelihood monitoring.

use std::io::Write;

use crate::error::{CrbmError, Result};
use crate::inference::{factor_posterior_meanfield, MeanFieldConfig};
use crate::model::{LevelDistribution, Observed, RbmView};

/// Floor applied to probabilities before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

pub fn log_probability(dist: &LevelDistribution, level: usize) -> f64 {
    dist.prob(level).max(PROBABILITY_FLOOR).ln()
}

/// Root mean squared error of real-valued (expected level) predictions.
pub fn rmse(predictions: &[f64], truth: &[usize]) -> Result<f64> {
    check_aligned(predictions.len(), truth.len())?;
    let sse: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(p, &t)| (p - t as f64).powi(2))
        .sum();
    Ok((sse / truth.len() as f64).sqrt())
}

/// Mean absolute error of level-valued (MAP) predictions.
pub fn mae(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    check_aligned(predictions.len(), truth.len())?;
    let sae: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum();
    Ok(sae / truth.len() as f64)
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CrbmError::invalid(format!("{a} predictions for {b} targets")));
    }
    if b == 0 {
        return Err(CrbmError::EmptyEvaluation);
    }
    Ok(())
}

/// Mean log predictive probability of each observed cell, conditioning on
/// all observed cells including the one being scored.
pub fn pseudo_log_likelihood(view: &RbmView<'_>, obs: &[Observed], config: &MeanFieldConfig) -> Result<f64> {
    if obs.is_empty() {
        return Err(CrbmError::EmptyEvaluation);
    }
    let mf = factor_posterior_meanfield(view, obs, config)?;
    let total: f64 = obs
        .iter()
        .map(|o| log_probability(&view.units[o.unit].level_probabilities(&mf.factor_probs), o.level))
        .sum();
    Ok(total / obs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub name: &'static str,
    pub value: f64,
    pub n_cells: usize,
}

/// RMSE of expected levels and MAE of MAP levels against the truth.
pub fn score_distributions(dists: &[LevelDistribution], truth: &[usize]) -> Result<Vec<Metric>> {
    let means: Vec<f64> = dists.iter().map(LevelDistribution::mean).collect();
    let maps: Vec<usize> = dists.iter().map(LevelDistribution::map_level).collect();
    Ok(vec![
        Metric {
            name: "rmse",
            value: rmse(&means, truth)?,
            n_cells: truth.len(),
        },
        Metric {
            name: "mae",
            value: mae(&maps, truth)?,
            n_cells: truth.len(),
        },
    ])
}

/// Tab-separated `metric value n_cells` report.
pub fn write_report<W: Write>(metrics: &[Metric], mut out: W) -> Result<()> {
    writeln!(out, "metric\tvalue\tn_cells")?;
    for m in metrics {
        writeln!(out, "{}\t{:.6}\t{}", m.name, m.value, m.n_cells)?;
    }
    Ok(())
}

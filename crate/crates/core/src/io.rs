//! Model files, training logs and posterior exports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ObservationSet;
use crate::error::{CrbmError, Result};
use crate::learning::TrainingLog;
use crate::matrix::{MatrixCrbmParameters, PosteriorTables};
use crate::model::VectorCrbmParameters;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParameters {
    Vector(VectorCrbmParameters),
    Matrix(MatrixCrbmParameters),
}

/// Level rescaling applied to the training data, recorded with the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rescaling {
    pub from_levels: usize,
    pub to_levels: usize,
    pub rule: RescaleRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleRule {
    /// `ceil(level * to / from)`.
    Ceiling,
}

/// Everything needed to predict from a trained model: parameters, the
/// external ids their indices stand for and, for matrix models, the
/// smoothed posterior tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub format_version: u32,
    pub model: ModelParameters,
    pub instance_ids: Vec<String>,
    pub item_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescaling: Option<Rescaling>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posteriors: Option<PosteriorTables>,
}

impl SavedModel {
    pub fn vector(params: VectorCrbmParameters, data: &ObservationSet) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: ModelParameters::Vector(params),
            instance_ids: data.instance_ids.clone(),
            item_ids: data.item_ids.clone(),
            rescaling: None,
            posteriors: None,
        }
    }

    pub fn matrix(params: MatrixCrbmParameters, tables: PosteriorTables, data: &ObservationSet) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model: ModelParameters::Matrix(params),
            instance_ids: data.instance_ids.clone(),
            item_ids: data.item_ids.clone(),
            rescaling: None,
            posteriors: Some(tables),
        }
    }

    /// The item-side vector parameters shared by both kinds.
    pub fn items(&self) -> &VectorCrbmParameters {
        match &self.model {
            ModelParameters::Vector(p) => p,
            ModelParameters::Matrix(m) => &m.items,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(CrbmError::Format(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let items = self.items();
        if self.item_ids.len() != items.n_visible {
            return Err(CrbmError::Format(format!(
                "{} item ids for {} items",
                self.item_ids.len(),
                items.n_visible
            )));
        }
        match &self.model {
            ModelParameters::Vector(p) => p.validate()?,
            ModelParameters::Matrix(m) => {
                m.validate()?;
                if self.instance_ids.len() != m.n_instances {
                    return Err(CrbmError::Format(format!(
                        "{} instance ids for {} instances",
                        self.instance_ids.len(),
                        m.n_instances
                    )));
                }
                if let Some(t) = &self.posteriors {
                    if t.instance.len() != m.n_instances * m.n_factors()
                        || t.item.len() != m.n_items() * m.n_item_factors
                    {
                        return Err(CrbmError::Format("posterior tables do not match the model".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn save_model(model: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, model)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let model: SavedModel = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    model.validate()?;
    Ok(model)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

/// One tab-separated row per epoch.
pub fn write_training_log<W: Write>(log: &TrainingLog, mut out: W) -> Result<()> {
    writeln!(
        out,
        "epoch\ttrain_pseudo_ll\tvalid_pseudo_ll\tvalid_rmse\tvalid_mae\twall_seconds"
    )?;
    for e in &log.epochs {
        writeln!(
            out,
            "{}\t{:.6}\t{}\t{}\t{}\t{:.3}",
            e.epoch,
            e.train_pseudo_ll,
            opt(e.valid_pseudo_ll),
            opt(e.valid_rmse),
            opt(e.valid_mae),
            e.wall_seconds
        )?;
    }
    Ok(())
}

/// `id` followed by one probability column per factor.
pub fn write_posteriors<W: Write>(ids: &[String], table: &[f64], width: usize, mut out: W) -> Result<()> {
    write!(out, "id")?;
    for k in 1..=width {
        write!(out, "\th{k}")?;
    }
    writeln!(out)?;
    for (id, row) in ids.iter().zip(table.chunks(width.max(1))) {
        write!(out, "{id}")?;
        for p in row.iter().take(width) {
            write!(out, "\t{p:.6}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

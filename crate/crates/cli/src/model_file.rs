//! Fitted GP models on disk: components, weights, the normalised training
//! data they condition on, and the normalisation that maps back to original
//! units.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use kitt_core::gp::{predict, GpModel, PredictiveDistribution};
use kitt_core::inference::mixture;
use kitt_core::io::{Dataset, NormalizationRecord};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component {
    pub kernel: String,
    pub weight: f64,
    pub model: GpModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub target_column: String,
    pub input_columns: Vec<String>,
    pub normalization: NormalizationRecord,
    pub components: Vec<Component>,
    /// Normalised training inputs, one row per point.
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<f64>,
}

impl FittedModel {
    pub fn new(target: &str, inputs: &[String], norm: &NormalizationRecord, components: Vec<Component>, train: &Dataset) -> Self {
        FittedModel {
            target_column: target.to_string(),
            input_columns: inputs.to_vec(),
            normalization: norm.clone(),
            components,
            train_x: train.x.row_iter().map(|r| r.iter().copied().collect()).collect(),
            train_y: train.y.iter().copied().collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
        let m: FittedModel = serde_json::from_str(&text).with_context(|| format!("parsing model {}", path.display()))?;
        if m.components.is_empty() {
            bail!("model {} has no components", path.display());
        }
        Ok(m)
    }

    fn train(&self) -> Result<Dataset> {
        let d = self.input_columns.len();
        let x = DMatrix::from_fn(self.train_x.len(), d, |i, j| self.train_x[i][j]);
        Ok(Dataset::new(x, DVector::from_vec(self.train_y.clone()))?)
    }

    /// Predictive distribution in original units for raw (unnormalised) inputs.
    pub fn predict_raw(&self, x_raw: &DMatrix<f64>) -> Result<PredictiveDistribution> {
        let train = self.train()?;
        let x = self.normalization.transform_x(x_raw)?;
        let comps = self
            .components
            .iter()
            .map(|c| predict(&train.x, &train.y, &x, &c.model))
            .collect::<kitt_core::Result<Vec<_>>>()?;
        let weights: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
        Ok(self.normalization.inverse_predictive(&mixture(&comps, &weights)?))
    }
}

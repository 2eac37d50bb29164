//! CSV ingestion, train/test splitting and normalisation.

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::INPUT_BOX;
use crate::error::{Error, Result};
use crate::gp::PredictiveDistribution;

/// Inputs (one row per observation) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.x.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
        }
    }

    pub fn y_slice(&self) -> &[f64] {
        self.y.as_slice()
    }
}

/// Per-dimension affine maps of the inputs onto `[-2.5, 2.5]` and
/// standardisation of the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl NormalizationRecord {
    /// Statistics of `data`. Constant input columns map to 0; a constant
    /// target keeps unit scale.
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("cannot normalise an empty dataset".into()));
        }
        let d = data.dims();
        let mut x_min = vec![f64::INFINITY; d];
        let mut x_max = vec![f64::NEG_INFINITY; d];
        for row in data.x.row_iter() {
            for (j, v) in row.iter().enumerate() {
                x_min[j] = x_min[j].min(*v);
                x_max[j] = x_max[j].max(*v);
            }
        }
        for j in 0..d {
            if x_max[j] == x_min[j] {
                warn!("input column {j} is constant; mapping it to 0");
            }
        }
        let n = data.len() as f64;
        let y_mean = data.y.sum() / n;
        let var = data.y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n;
        let mut y_std = var.sqrt();
        if !(y_std > 0.0) {
            warn!("target is constant; leaving its scale unchanged");
            y_std = 1.0;
        }
        Ok(NormalizationRecord { x_min, x_max, y_mean, y_std })
    }

    fn x_affine(&self, j: usize) -> (f64, f64) {
        let (lo, hi) = (self.x_min[j], self.x_max[j]);
        if hi > lo {
            let scale = 2.0 * INPUT_BOX / (hi - lo);
            (scale, -INPUT_BOX - lo * scale)
        } else {
            (0.0, 0.0)
        }
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.x_min.len() {
            return Err(Error::DimensionMismatch(format!(
                "record has {} input columns, data has {}",
                self.x_min.len(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let mut out = x.clone();
        for j in 0..x.ncols() {
            let (a, b) = self.x_affine(j);
            out.column_mut(j).iter_mut().for_each(|v| *v = a * *v + b);
        }
        Ok(out)
    }

    /// Inverse of [`Self::transform_x`]; constant columns come back as their
    /// single observed value.
    pub fn inverse_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let mut out = x.clone();
        for j in 0..x.ncols() {
            let (a, b) = self.x_affine(j);
            let lo = self.x_min[j];
            out.column_mut(j)
                .iter_mut()
                .for_each(|v| *v = if a == 0.0 { lo } else { (*v - b) / a });
        }
        Ok(out)
    }

    pub fn transform_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_std)
    }

    pub fn inverse_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_std + self.y_mean)
    }

    pub fn transform(&self, data: &Dataset) -> Result<Dataset> {
        Dataset::new(self.transform_x(&data.x)?, self.transform_y(&data.y))
    }

    /// Predictive distribution in original target units.
    pub fn inverse_predictive(&self, pred: &PredictiveDistribution) -> PredictiveDistribution {
        PredictiveDistribution {
            mean: pred.mean.iter().map(|m| m * self.y_std + self.y_mean).collect(),
            variance: pred.variance.iter().map(|v| v * self.y_std * self.y_std).collect(),
        }
    }
}

/// Header and numeric rows of a CSV file.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Table::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .enumerate()
                .map(|(j, cell)| {
                    cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Format {
                        what: "csv",
                        detail: format!("row {} column `{}`: `{cell}` is not a finite number", i + 1, columns[j]),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    /// Splits into inputs (every other column, in order) and the target.
    pub fn dataset(&self, target: &str) -> Result<(Dataset, Vec<String>)> {
        let t = self
            .columns
            .iter()
            .position(|c| c == target)
            .ok_or_else(|| Error::Config(format!("target column `{target}` not found in {:?}", self.columns)))?;
        let inputs: Vec<usize> = (0..self.columns.len()).filter(|&j| j != t).collect();
        if inputs.is_empty() {
            return Err(Error::Config("no input columns besides the target".into()));
        }
        let x = DMatrix::from_fn(self.rows.len(), inputs.len(), |i, j| self.rows[i][inputs[j]]);
        let y = DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r[t]));
        let names = inputs.iter().map(|&j| self.columns[j].clone()).collect();
        Ok((Dataset::new(x, y)?, names))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub target_column: String,
    pub test_fraction: f64,
    /// Keep at most this many rows (drawn with the split seed) before
    /// splitting.
    pub subsample: Option<usize>,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            target_column: "y".into(),
            test_fraction: 0.1,
            subsample: Some(2000),
            seed: 0,
        }
    }
}

/// Normalised train and test sets, plus what is needed to map back.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub train: Dataset,
    pub test: Dataset,
    /// The same rows before normalisation.
    pub raw_train: Dataset,
    pub raw_test: Dataset,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub input_columns: Vec<String>,
    pub normalization: NormalizationRecord,
}

/// Seeded subsample and train/test split of `n` row indices.
pub fn split_indices(n: usize, test_fraction: f64, subsample: Option<usize>, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = match subsample {
        Some(cap) if cap < n => index::sample(&mut rng, n, cap).into_vec(),
        _ => (0..n).collect(),
    };
    rows.shuffle(&mut rng);
    let n_test = ((rows.len() as f64) * test_fraction).round() as usize;
    let test = rows.split_off(rows.len() - n_test.min(rows.len()));
    (rows, test)
}

pub fn ingest_table(table: &Table, config: &IngestConfig) -> Result<Ingested> {
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::Config(format!("test_fraction {} outside [0, 1)", config.test_fraction)));
    }
    let (data, input_columns) = table.dataset(&config.target_column)?;
    let (train_rows, test_rows) = split_indices(data.len(), config.test_fraction, config.subsample, config.seed);
    if train_rows.is_empty() {
        return Err(Error::Config("no training rows".into()));
    }
    let raw_train = data.rows(&train_rows);
    let raw_test = data.rows(&test_rows);
    let normalization = NormalizationRecord::fit(&raw_train)?;
    Ok(Ingested {
        train: normalization.transform(&raw_train)?,
        test: normalization.transform(&raw_test)?,
        raw_train,
        raw_test,
        train_rows,
        test_rows,
        input_columns,
        normalization,
    })
}

pub fn ingest(path: &Path, config: &IngestConfig) -> Result<Ingested> {
    ingest_table(&Table::read(path)?, config)
}

/// Writes a dataset as CSV with columns `x0..x{D-1},y`.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dims()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.y[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

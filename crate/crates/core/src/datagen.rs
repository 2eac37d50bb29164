//! Synthetic labelled datasets drawn from GP priors over vocabulary kernels.
//!
//! Shard file layout (all integers and floats little-endian):
//!
//! ```text
//! {"version":1,...}\n                       UTF-8 JSON manifest, one line
//! f32 × n_examples·n_points·n_dims           X, example-major then row-major
//! f32 × n_examples·n_points                  y
//! i32 × n_examples·(max_len+1)               label ids, padded with STOP
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{sample_gp, GpModel};
use crate::kernels::priors::sample_hyperparameters;
use crate::kernels::{KernelExpression, PriorSet};
use crate::vocab::{expression_to_caption, Caption, Vocabulary};

pub const SHARD_VERSION: u32 = 1;
/// Half-width of the input sampling box.
pub const INPUT_BOX: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub n_points: usize,
    pub n_dims: usize,
    /// Terms per expression are uniform on `1..=max_terms`; also the caption
    /// length cap.
    pub max_terms: usize,
    pub priors: PriorSet,
    /// Likelihood noise added during sampling (beyond jitter).
    pub noise_variance: f64,
    /// Hyperparameter redraws per token set before redrawing the tokens.
    pub max_retries: usize,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            n_points: 64,
            n_dims: 4,
            max_terms: 3,
            priors: PriorSet::default(),
            noise_variance: 1e-6,
            max_retries: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub x: DMatrix<f64>,
    /// Standardised outputs.
    pub y: DVector<f64>,
    pub label: Caption,
    pub expr: KernelExpression,
}

/// Rng for example `stream` of a run seeded with `seed`; independent of how
/// examples are distributed across workers.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standardize(y: &mut DVector<f64>) -> Option<()> {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 && sd.is_finite()) {
        return None;
    }
    y.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    Some(())
}

/// Draws one labelled dataset.
pub fn generate_example<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    config: &DataGenConfig,
    rng: &mut R,
) -> Result<TrainingExample> {
    if config.n_points < 2 || config.n_dims == 0 {
        return Err(Error::Config(format!(
            "need at least 2 points and 1 dimension, got N={} D={}",
            config.n_points, config.n_dims
        )));
    }
    if vocab.num_kernels() == 0 || config.max_terms == 0 {
        return Err(Error::Config("nothing to sample from".into()));
    }
    let (n, d) = (config.n_points, config.n_dims);
    let max_terms = config.max_terms.min(vocab.num_kernels());
    loop {
        let n_terms = rng.random_range(1..=max_terms);
        let picks = index::sample(rng, vocab.num_kernels(), n_terms);
        let tokens: Vec<_> = picks.iter().map(|i| vocab.kernel_tokens()[i].clone()).collect();
        for _ in 0..config.max_retries.max(1) {
            let expr = KernelExpression::new(
                tokens
                    .iter()
                    .map(|t| sample_hyperparameters(t, &config.priors, d, rng))
                    .collect(),
            );
            let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-INPUT_BOX..INPUT_BOX));
            let model = GpModel::new(expr, config.noise_variance);
            let Ok(mut y) = sample_gp(&x, &model, rng) else {
                continue;
            };
            if standardize(&mut y).is_none() {
                continue;
            }
            let label = expression_to_caption(&model.expr, vocab, config.max_terms)?;
            return Ok(TrainingExample {
                x,
                y,
                label,
                expr: model.expr,
            });
        }
        warn!(
            "degenerate draws for {:?}; redrawing tokens",
            tokens.iter().map(ToString::to_string).collect::<Vec<_>>()
        );
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub version: u32,
    pub n_examples: usize,
    pub n_points: usize,
    pub n_dims: usize,
    pub max_len: usize,
    pub vocab_hash: String,
    pub seed: u64,
    pub shard_index: usize,
    /// Global index of the first example, which also selects its rng stream.
    pub first_example: usize,
}

impl ShardManifest {
    pub fn label_width(&self) -> usize {
        self.max_len + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub manifest: ShardManifest,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
    pub labels: Vec<i32>,
}

impl DatasetShard {
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let bad = |detail: String| Error::Format { what: "shard", detail };
        if m.version != SHARD_VERSION {
            return Err(bad(format!("unsupported version {}", m.version)));
        }
        if self.x.len() != m.n_examples * m.n_points * m.n_dims {
            return Err(bad(format!("X has {} values", self.x.len())));
        }
        if self.y.len() != m.n_examples * m.n_points {
            return Err(bad(format!("y has {} values", self.y.len())));
        }
        if self.labels.len() != m.n_examples * m.label_width() {
            return Err(bad(format!("labels have {} values", self.labels.len())));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = serde_json::to_string(&self.manifest)?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for v in &self.x {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.y {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.labels {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header).map_err(|e| Error::Format {
            what: "shard",
            detail: e.to_string(),
        })?;
        let manifest: ShardManifest = serde_json::from_str(header.trim_end())?;
        let read_words = |r: &mut R, n: usize| -> Result<Vec<[u8; 4]>> {
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf).map_err(|e| Error::Format {
                what: "shard",
                detail: format!("truncated payload: {e}"),
            })?;
            Ok(buf.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
        };
        let m = &manifest;
        let x = read_words(&mut r, m.n_examples * m.n_points * m.n_dims)?
            .into_iter()
            .map(f32::from_le_bytes)
            .collect();
        let y = read_words(&mut r, m.n_examples * m.n_points)?
            .into_iter()
            .map(f32::from_le_bytes)
            .collect();
        let labels = read_words(&mut r, m.n_examples * m.label_width())?
            .into_iter()
            .map(i32::from_le_bytes)
            .collect();
        let shard = DatasetShard { manifest, x, y, labels };
        shard.validate()?;
        Ok(shard)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::Shard {
            index: self.manifest.shard_index,
            source: e,
        })?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::Shard {
            index: self.manifest.shard_index,
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        DatasetShard::read_from(BufReader::new(f))
    }

    /// Loads a shard and checks it was generated with `vocab`.
    pub fn load_checked(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let shard = DatasetShard::load(path)?;
        vocab.check_hash(&shard.manifest.vocab_hash)?;
        Ok(shard)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardConfig {
    pub n_examples: usize,
    pub shard_size: usize,
    pub seed: u64,
}

/// Generates examples `first..first + count` into a shard.
pub fn generate_shard(
    vocab: &Vocabulary,
    config: &DataGenConfig,
    seed: u64,
    shard_index: usize,
    first: usize,
    count: usize,
) -> Result<DatasetShard> {
    let examples = (first..first + count)
        .into_par_iter()
        .map(|i| generate_example(vocab, config, &mut derive_rng(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let width = config.max_terms + 1;
    let mut x = Vec::with_capacity(count * config.n_points * config.n_dims);
    let mut y = Vec::with_capacity(count * config.n_points);
    let mut labels = Vec::with_capacity(count * width);
    for ex in &examples {
        for r in ex.x.row_iter() {
            x.extend(r.iter().map(|&v| v as f32));
        }
        y.extend(ex.y.iter().map(|&v| v as f32));
        labels.extend(ex.label.padded(vocab, width).into_iter().map(|i| i as i32));
    }
    Ok(DatasetShard {
        manifest: ShardManifest {
            version: SHARD_VERSION,
            n_examples: count,
            n_points: config.n_points,
            n_dims: config.n_dims,
            max_len: config.max_terms,
            vocab_hash: vocab.hash().to_string(),
            seed,
            shard_index,
            first_example: first,
        },
        x,
        y,
        labels,
    })
}

/// Writes `shard-00000.bin`, `shard-00001.bin`, … into `dir`.
pub fn generate_shards(
    vocab: &Vocabulary,
    config: &DataGenConfig,
    shards: &ShardConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if shards.n_examples == 0 || shards.shard_size == 0 {
        return Err(Error::Config("n_examples and shard_size must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    let mut first = 0;
    let mut index = 0;
    while first < shards.n_examples {
        let count = shards.shard_size.min(shards.n_examples - first);
        let shard = generate_shard(vocab, config, shards.seed, index, first, count)?;
        let path = dir.join(format!("shard-{index:05}.bin"));
        shard.save(&path)?;
        paths.push(path);
        first += count;
        index += 1;
    }
    Ok(paths)
}

/// Shard files in `dir`, sorted by name.
pub fn list_shards(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    paths.sort();
    Ok(paths)
}

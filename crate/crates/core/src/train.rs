//! Training loops for the captioner (teacher forcing) and the classifier.
//!
//! Each optimiser step draws `batch_size` examples from an epoch-wise
//! shuffle, splits them into micro-batches that run on independent tapes,
//! and sums their gradients in a fixed order so results do not depend on the
//! number of worker threads.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_rng, list_shards, DatasetShard};
use crate::error::{Error, Result};
use crate::net::{save_checkpoint, DataBatch, KittModel, Mode, ModelKind, Network};
use crate::tensor::{adam_step, AdamConfig, ParamId, ParamStore, Real, Tape, TensorError, Var};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Precision::Single),
            "double" => Ok(Precision::Double),
            _ => Err(Error::Config(format!("unknown precision `{s}` (single, double)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Examples per tape; a batch is split into micro-batches.
    pub micro_batch: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_steps: usize,
    /// Evaluate and checkpoint every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub log_every: usize,
    /// Trailing fraction of the examples held out for evaluation.
    pub eval_fraction: f64,
    /// Cap on held-out examples scored per evaluation.
    pub eval_max: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub precision: Precision,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            micro_batch: 16,
            lr0: 1e-4,
            decay_factor: 0.1,
            decay_every: 50_000,
            max_steps: 30_000,
            eval_every: 1_000,
            log_every: 10,
            eval_fraction: 0.05,
            eval_max: 1_024,
            grad_clip: 5.0,
            seed: 0,
            precision: Precision::Single,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch == 0 || self.decay_every == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size, micro_batch, decay_every and log_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!("eval_fraction {} outside [0, 1)", self.eval_fraction)));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }

    /// Staircase decay: `lr0 · decay_factor^⌊step / decay_every⌋`.
    pub fn lr_schedule(&self, step: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((step / self.decay_every.max(1)) as i32)
    }
}

/// All examples from a set of shards, ordered by shard index.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub n_points: usize,
    pub n_dims: usize,
    /// Label ids per example (caption plus STOP padding).
    pub width: usize,
    pub vocab_hash: String,
    x: Vec<f32>,
    y: Vec<f32>,
    labels: Vec<i32>,
    len: usize,
}

impl TrainingSet {
    pub fn from_shards(mut shards: Vec<DatasetShard>) -> Result<Self> {
        shards.sort_by_key(|s| s.manifest.shard_index);
        let first = shards
            .first()
            .ok_or_else(|| Error::Config("no training shards".into()))?
            .manifest
            .clone();
        let mut set = TrainingSet {
            n_points: first.n_points,
            n_dims: first.n_dims,
            width: first.label_width(),
            vocab_hash: first.vocab_hash.clone(),
            x: Vec::new(),
            y: Vec::new(),
            labels: Vec::new(),
            len: 0,
        };
        for s in shards {
            s.validate()?;
            let m = &s.manifest;
            if (m.n_points, m.n_dims, m.label_width()) != (set.n_points, set.n_dims, set.width) || m.vocab_hash != set.vocab_hash {
                return Err(Error::Format {
                    what: "shard",
                    detail: format!("shard {} is inconsistent with shard {}", m.shard_index, first.shard_index),
                });
            }
            set.len += m.n_examples;
            set.x.extend_from_slice(&s.x);
            set.y.extend_from_slice(&s.y);
            set.labels.extend_from_slice(&s.labels);
        }
        Ok(set)
    }

    /// Loads every shard in `dir`, checking it was built for `vocab`.
    pub fn load_dir(dir: &Path, vocab: &Vocabulary) -> Result<Self> {
        let shards = list_shards(dir)?
            .iter()
            .map(|p| DatasetShard::load_checked(p, vocab))
            .collect::<Result<Vec<_>>>()?;
        TrainingSet::from_shards(shards)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn labels(&self, i: usize) -> &[i32] {
        &self.labels[i * self.width..(i + 1) * self.width]
    }

    pub fn batch<T: Real>(&self, idx: &[usize]) -> Result<DataBatch<T>> {
        let (n, d) = (self.n_points, self.n_dims);
        let mut x = Vec::with_capacity(idx.len() * n * d);
        let mut y = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            x.extend(self.x[i * n * d..(i + 1) * n * d].iter().map(|v| T::c(*v as f64)));
            y.extend(self.y[i * n..(i + 1) * n].iter().map(|v| T::c(*v as f64)));
        }
        DataBatch::new(idx.len(), n, d, x, y)
    }

    /// Indices of the training and held-out parts (held-out = the trailing
    /// `fraction` of examples).
    pub fn split(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n_eval = ((self.len as f64) * fraction).round() as usize;
        let n_eval = n_eval.min(self.len.saturating_sub(1));
        let cut = self.len - n_eval;
        ((0..cut).collect(), (cut..self.len).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
}

pub const METRIC_HEADER: &str = "step\tlr\tloss\teval_loss\teval_acc";

impl MetricRow {
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step,
            self.lr,
            self.loss,
            opt(self.eval_loss),
            opt(self.eval_acc)
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Format {
            what: "metric log",
            detail: format!("bad line `{line}`"),
        };
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(MetricRow {
            step: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            loss: num(f[2])?,
            eval_loss: opt(f[3])?,
            eval_acc: opt(f[4])?,
        })
    }
}

/// Reads a metric log written by a training run.
pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(MetricRow::from_tsv)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: usize,
    pub rows: Vec<MetricRow>,
    /// Held-out (loss, accuracy) after the last step, if anything was held out.
    pub final_eval: Option<(f64, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Per-example targets for one micro-batch.
fn targets(kind: ModelKind, data: &TrainingSet, idx: &[usize], n_out: usize, stop: usize) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let mut prompts = Vec::new();
    let mut tgt = Vec::new();
    for &i in idx {
        let labels = data.labels(i);
        let bad = |v: i32| Error::Format {
            what: "shard",
            detail: format!("label {v} of example {i} outside the {n_out} model outputs"),
        };
        // a classifier only reads the first label
        let used = match kind {
            ModelKind::Captioner => labels,
            ModelKind::Classifier => &labels[..1],
        };
        let ids = used
            .iter()
            .map(|&v| usize::try_from(v).ok().filter(|&u| u < n_out).ok_or_else(|| bad(v)))
            .collect::<Result<Vec<_>>>()?;
        match kind {
            ModelKind::Captioner => {
                let end = ids.iter().position(|&t| t == stop).unwrap_or(ids.len() - 1);
                prompts.push(n_out);
                prompts.extend_from_slice(&ids[..ids.len() - 1]);
                tgt.extend(ids.iter().enumerate().map(|(t, &id)| (t <= end).then_some(id)));
            }
            ModelKind::Classifier => tgt.push(Some(ids[0])),
        }
    }
    Ok((prompts, tgt))
}

struct MicroResult<T> {
    loss: f64,
    count: usize,
    correct: usize,
    grads: Vec<(ParamId, Vec<T>)>,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward (and optionally backward) pass over one micro-batch.
fn micro_batch<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    data: &TrainingSet,
    idx: &[usize],
    stop: usize,
    mut mode: Mode,
) -> Result<MicroResult<T>> {
    let batch = data.batch::<T>(idx)?;
    let (prompts, tgt) = targets(net.kind(), data, idx, net.n_out(), stop)?;
    let train = mode.is_train();
    let mut tape = Tape::new();
    let enc = net.encode(&mut tape, store, &batch, &mut mode)?;
    let logits: Var = match net.kind() {
        ModelKind::Captioner => net.decode(&mut tape, store, enc, &prompts, data.width, &mut mode)?,
        ModelKind::Classifier => net.classify_logits(&mut tape, store, enc)?,
    };
    let loss = tape.cross_entropy(logits, &tgt)?;
    let n_out = net.n_out();
    let correct = tape
        .value(logits)
        .chunks(n_out)
        .zip(&tgt)
        .filter(|(row, t)| t.is_some_and(|t| argmax(row) == t))
        .count();
    let count = tgt.iter().filter(|t| t.is_some()).count();
    let loss_value = tape.value(loss)[0].to_f64().unwrap_or(f64::NAN);
    let mut grads = Vec::new();
    if train {
        tape.backward(loss)?;
        grads = tape.param_grads().map(|(id, g)| (id, g.to_vec())).collect();
    }
    Ok(MicroResult {
        loss: loss_value,
        count,
        correct,
        grads,
    })
}

/// Held-out mean loss (per target token) and accuracy. Never touches the
/// parameters.
pub fn evaluate_set<T: Real>(net: &Network, store: &ParamStore<T>, data: &TrainingSet, idx: &[usize], micro: usize, stop: usize) -> Result<(f64, f64)> {
    let results = idx
        .par_chunks(micro.max(1))
        .map(|chunk| micro_batch(net, store, data, chunk, stop, Mode::Eval))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = results.iter().map(|r| r.count).sum();
    let loss = results.iter().map(|r| r.loss * r.count as f64).sum::<f64>() / count.max(1) as f64;
    let correct: usize = results.iter().map(|r| r.correct).sum();
    Ok((loss, correct as f64 / count.max(1) as f64))
}

const DROPOUT_STREAM: u64 = 1 << 40;

struct Run<'a> {
    config: &'a TrainConfig,
    out_dir: Option<&'a Path>,
}

impl Run<'_> {
    fn train<T: Real>(
        &self,
        model: &KittModel,
        store: &mut ParamStore<T>,
        data: &TrainingSet,
        mut on_checkpoint: impl FnMut(&ParamStore<T>, usize) -> Result<Option<PathBuf>>,
    ) -> Result<TrainReport> {
        let cfg = self.config;
        let net = &model.net;
        let stop = model.vocab.stop_id();
        let (train_idx, eval_idx) = data.split(cfg.eval_fraction);
        let eval_idx: Vec<usize> = eval_idx.into_iter().take(cfg.eval_max).collect();
        if train_idx.is_empty() {
            return Err(Error::Config("no training examples after the held-out split".into()));
        }
        let mut metrics = match self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let open = |name: &str| -> Result<BufWriter<File>> {
                    let p = dir.join(name);
                    Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
                };
                let mut m = open("metrics.tsv")?;
                let mut t = open("timing.tsv")?;
                writeln!(m, "{METRIC_HEADER}").map_err(|e| Error::io(dir, e))?;
                writeln!(t, "step\twallclock_s").map_err(|e| Error::io(dir, e))?;
                Some((m, t))
            }
            None => None,
        };
        let started = Instant::now();
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order = train_idx.clone();
        order.shuffle(&mut order_rng);
        let mut cursor = 0;
        let mut rows = Vec::new();
        let mut checkpoints = Vec::new();
        let mut final_eval = None;
        let batch_size = cfg.batch_size.min(train_idx.len());
        let mut loss_acc = 0.0;
        let mut loss_n = 0usize;
        for step in 0..cfg.max_steps {
            let lr = cfg.lr_schedule(step);
            let mut idx = Vec::with_capacity(batch_size);
            while idx.len() < batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let results = idx
                .par_chunks(cfg.micro_batch)
                .enumerate()
                .map(|(m, chunk)| {
                    let mut rng = derive_rng(cfg.seed, DROPOUT_STREAM + (step as u64) * 4096 + m as u64);
                    micro_batch(net, store, data, chunk, stop, Mode::Train(&mut rng))
                })
                .collect::<Vec<_>>();
            let diverged = || Error::NonFiniteLoss {
                step,
                lr,
                batch: idx.clone(),
            };
            let results = results
                .into_iter()
                .map(|r| match r {
                    Err(Error::Tensor(TensorError::NonFinite { .. })) => Err(diverged()),
                    other => other,
                })
                .collect::<Result<Vec<_>>>()?;
            let total: usize = results.iter().map(|r| r.count).sum();
            let mut loss = 0.0;
            store.zero_grad();
            for r in &results {
                let w = r.count as f64 / total.max(1) as f64;
                loss += w * r.loss;
                let wt = T::c(w);
                for (id, g) in &r.grads {
                    let p = store.get_mut(*id);
                    for (a, b) in p.grad.iter_mut().zip(g) {
                        *a += wt * *b;
                    }
                }
            }
            if !loss.is_finite() || !store.grad_norm().is_finite() {
                return Err(diverged());
            }
            store.clip_grad_norm(cfg.grad_clip);
            adam_step(store, lr, &cfg.adam, step as u64 + 1);
            loss_acc += loss;
            loss_n += 1;

            let done = step + 1;
            let eval_now = !eval_idx.is_empty() && ((cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.max_steps);
            if done % cfg.log_every == 0 || eval_now || done == cfg.max_steps {
                let mut row = MetricRow {
                    step: done,
                    lr,
                    loss: loss_acc / loss_n as f64,
                    eval_loss: None,
                    eval_acc: None,
                };
                loss_acc = 0.0;
                loss_n = 0;
                if eval_now {
                    let (el, ea) = evaluate_set(net, store, data, &eval_idx, cfg.micro_batch, stop)?;
                    row.eval_loss = Some(el);
                    row.eval_acc = Some(ea);
                    final_eval = Some((el, ea));
                    if let Some(p) = on_checkpoint(store, done)? {
                        checkpoints.push(p);
                    }
                    info!("step {done}: loss {:.4} eval loss {el:.4} eval acc {ea:.3}", row.loss);
                }
                if let Some((m, t)) = metrics.as_mut() {
                    let err = |e| Error::io("metrics.tsv", e);
                    writeln!(m, "{}", row.to_tsv()).map_err(err)?;
                    writeln!(t, "{done}\t{:.3}", started.elapsed().as_secs_f64()).map_err(err)?;
                }
                rows.push(row);
            }
        }
        if let Some((mut m, mut t)) = metrics {
            m.flush().map_err(|e| Error::io("metrics.tsv", e))?;
            t.flush().map_err(|e| Error::io("timing.tsv", e))?;
        }
        Ok(TrainReport {
            steps: cfg.max_steps,
            rows,
            final_eval,
            checkpoints,
        })
    }
}

fn train(model: &mut KittModel, data: &TrainingSet, config: &TrainConfig, out_dir: Option<&Path>, kind: ModelKind) -> Result<TrainReport> {
    config.validate()?;
    if model.kind() != kind {
        return Err(Error::Config(format!("expected a {kind:?} model, got {:?}", model.kind())));
    }
    model.check_vocab(&data.vocab_hash)?;
    if kind == ModelKind::Captioner && data.width != model.config().max_caption_len + 1 {
        return Err(Error::Config(format!(
            "shards hold captions of up to {} tokens, model expects {}",
            data.width - 1,
            model.config().max_caption_len
        )));
    }
    let run = Run { config, out_dir };
    let base_step = model.step;
    let template = model.clone();
    let save = |params: ParamStore<f32>, step: usize| -> Result<Option<PathBuf>> {
        let Some(dir) = out_dir else { return Ok(None) };
        let mut snapshot = template.clone();
        snapshot.params = params;
        snapshot.step = base_step + step as u64;
        let path = dir.join(format!("ckpt-{:08}.ckpt", snapshot.step));
        save_checkpoint(&snapshot, &path)?;
        Ok(Some(path))
    };
    let report = match config.precision {
        Precision::Single => {
            let mut store = model.params.clone();
            let r = run.train(model, &mut store, data, |s, step| save(s.clone(), step))?;
            model.params = store;
            r
        }
        Precision::Double => {
            let mut store = model.params.cast::<f64>();
            let r = run.train(model, &mut store, data, |s, step| save(s.cast(), step))?;
            model.params = store.cast();
            r
        }
    };
    model.step = base_step + report.steps as u64;
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("model.ckpt"))?;
    }
    Ok(report)
}

/// Trains the caption decoder end to end with teacher forcing: every caption
/// position is predicted in parallel under a causal mask, and positions after
/// the first STOP are excluded from the loss.
pub fn train_captioner(model: &mut KittModel, data: &TrainingSet, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    train(model, data, config, out_dir, ModelKind::Captioner)
}

/// Trains the classifier head (and encoder) on the first label of each
/// example.
pub fn train_classifier(model: &mut KittModel, data: &TrainingSet, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    train(model, data, config, out_dir, ModelKind::Classifier)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_shard, DataGenConfig};
    use crate::kernels::{Primitive, Token};
    use crate::net::ArchitectureConfig;
    use crate::vocab::build_vocabulary;

    fn small_arch() -> ArchitectureConfig {
        ArchitectureConfig {
            embed_dim: 16,
            n_heads: 2,
            rff_hidden: 16,
            n_sab_seq: 1,
            n_sab_dim: 1,
            n_decoder_blocks: 1,
            dropout_rate: 0.1,
            max_caption_len: 2,
        }
    }

    fn data(vocab: &Vocabulary, n: usize, seed: u64) -> TrainingSet {
        let cfg = DataGenConfig {
            n_points: 12,
            n_dims: 2,
            max_terms: 2,
            ..Default::default()
        };
        let a = generate_shard(vocab, &cfg, seed, 1, n / 2, n - n / 2).unwrap();
        let b = generate_shard(vocab, &cfg, seed, 0, 0, n / 2).unwrap();
        TrainingSet::from_shards(vec![a, b]).unwrap()
    }

    #[test]
    fn staircase_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_schedule(0), 1e-4);
        assert_eq!(c.lr_schedule(49_999), 1e-4);
        assert!((c.lr_schedule(50_000) - 1e-5).abs() < 1e-20);
        assert!((c.lr_schedule(149_999) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn shards_are_ordered_by_index() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Linear], Default::default()).unwrap();
        let set = data(&vocab, 10, 3);
        assert_eq!(set.len(), 10);
        let direct = generate_shard(
            &vocab,
            &DataGenConfig {
                n_points: 12,
                n_dims: 2,
                max_terms: 2,
                ..Default::default()
            },
            3,
            0,
            0,
            10,
        )
        .unwrap();
        assert_eq!(set.labels, direct.labels);
        assert_eq!(set.x, direct.x);
    }

    #[test]
    fn caption_targets_stop_after_first_stop() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Linear], Default::default()).unwrap();
        let set = data(&vocab, 6, 4);
        let stop = vocab.stop_id();
        let (prompts, tgt) = targets(ModelKind::Captioner, &set, &[0, 1], vocab.len(), stop).unwrap();
        assert_eq!(prompts.len(), 2 * set.width);
        assert_eq!(prompts[0], vocab.len());
        for (e, chunk) in tgt.chunks(set.width).enumerate() {
            let labels = set.labels(e);
            let end = labels.iter().position(|&l| l as usize == stop).unwrap();
            for (t, v) in chunk.iter().enumerate() {
                assert_eq!(v.is_some(), t <= end);
            }
        }
    }

    #[test]
    fn initial_loss_is_near_uniform_and_training_is_deterministic() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Linear, Primitive::Periodic], Default::default()).unwrap();
        let set = data(&vocab, 40, 5);
        let cfg = TrainConfig {
            batch_size: 8,
            micro_batch: 4,
            lr0: 1e-3,
            max_steps: 6,
            eval_every: 3,
            log_every: 1,
            eval_fraction: 0.1,
            seed: 9,
            ..Default::default()
        };
        let run = || {
            let mut m = KittModel::new(&small_arch(), ModelKind::Captioner, vocab.clone(), 1).unwrap();
            let r = train_captioner(&mut m, &set, &cfg, None).unwrap();
            (r, m.checksum())
        };
        let (r1, c1) = run();
        let (r2, c2) = run();
        assert_eq!(r1.rows, r2.rows);
        assert_eq!(c1, c2);
        let uniform = (vocab.len() as f64).ln();
        assert!((r1.rows[0].loss - uniform).abs() < 0.2 * uniform, "{} vs {uniform}", r1.rows[0].loss);
        assert!(r1.final_eval.is_some());
    }

    #[test]
    fn evaluation_does_not_mutate_parameters() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Linear], Default::default()).unwrap();
        let set = data(&vocab, 8, 6);
        let m = KittModel::new(&small_arch(), ModelKind::Captioner, vocab.clone(), 2).unwrap();
        let before = m.checksum();
        evaluate_set(&m.net, &m.params, &set, &[0, 1, 2, 3], 2, vocab.stop_id()).unwrap();
        assert_eq!(before, m.checksum());
    }

    #[test]
    fn rejects_mismatched_vocab_and_kind() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Linear], Default::default()).unwrap();
        let set = data(&vocab, 6, 7);
        let other = build_vocabulary(&[Primitive::Rbf], Default::default()).unwrap();
        let mut m = KittModel::new(&small_arch(), ModelKind::Captioner, other, 1).unwrap();
        assert!(matches!(
            train_captioner(&mut m, &set, &TrainConfig::default(), None),
            Err(Error::VocabMismatch { .. })
        ));
        let mut c = KittModel::new(&small_arch(), ModelKind::Classifier, vocab, 1).unwrap();
        assert!(train_captioner(&mut c, &set, &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn metric_rows_round_trip() {
        let row = MetricRow {
            step: 10,
            lr: 1e-4,
            loss: 0.5,
            eval_loss: None,
            eval_acc: Some(0.25),
        };
        assert_eq!(MetricRow::from_tsv(&row.to_tsv()).unwrap(), row);
        let _ = Token::single(Primitive::Rbf);
    }
}

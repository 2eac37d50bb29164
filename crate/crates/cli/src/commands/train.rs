use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use kitt_core::net::{load_checkpoint, ArchitectureConfig, KittModel, ModelKind};
use kitt_core::train::{train_captioner, train_classifier, Precision, TrainConfig, TrainingSet};
use kitt_core::vocab::Vocabulary;
use serde_json::json;

use super::start;
use crate::settings::Settings;
use crate::Global;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory of shards written by `gen-data` (the `data/` folder or its run).
    #[arg(long)]
    pub data: Option<String>,
    /// Continue training from this checkpoint.
    #[arg(long, conflicts_with_all = ["embed_dim", "heads", "rff_hidden", "sab_seq", "sab_dim", "decoder_blocks", "dropout"])]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub eval_fraction: Option<f64>,
    #[arg(long)]
    pub eval_max: Option<usize>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `single` or `double`.
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub rff_hidden: Option<usize>,
    #[arg(long)]
    pub sab_seq: Option<usize>,
    #[arg(long)]
    pub sab_dim: Option<usize>,
    #[arg(long)]
    pub decoder_blocks: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

fn data_dir(path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.join("data").join("vocab.json").exists() {
        p.join("data")
    } else {
        p.to_path_buf()
    }
}

pub fn train(g: &Global, a: &TrainArgs, classifier: bool) -> Result<PathBuf> {
    let command = if classifier { "train-classifier" } else { "train" };
    let kind = if classifier { ModelKind::Classifier } else { ModelKind::Captioner };
    let mut s = Settings::load(g.config.as_deref())?;
    let data = data_dir(&s.required::<String>("data", a.data.clone())?);
    let checkpoint = s.optional::<String>("checkpoint", a.checkpoint.clone())?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: s.get("batch-size", a.batch_size, d.batch_size)?,
        micro_batch: s.get("micro-batch", a.micro_batch, d.micro_batch)?,
        lr0: s.get("lr", a.lr, d.lr0)?,
        decay_factor: s.get("decay-factor", a.decay_factor, d.decay_factor)?,
        decay_every: s.get("decay-every", a.decay_every, d.decay_every)?,
        max_steps: s.get("steps", a.steps, d.max_steps)?,
        eval_every: s.get("eval-every", a.eval_every, d.eval_every)?,
        log_every: s.get("log-every", a.log_every, d.log_every)?,
        eval_fraction: s.get("eval-fraction", a.eval_fraction, d.eval_fraction)?,
        eval_max: s.get("eval-max", a.eval_max, d.eval_max)?,
        grad_clip: s.get("grad-clip", a.grad_clip, d.grad_clip)?,
        seed: s.get("seed", a.seed, d.seed)?,
        precision: s.get("precision", a.precision, d.precision)?,
        adam: d.adam,
    };
    cfg.validate()?;
    let vocab_path = data.join("vocab.json");
    let vocab = Vocabulary::from_json(
        &fs::read_to_string(&vocab_path).with_context(|| format!("reading {}", vocab_path.display()))?,
    )?;
    let set = TrainingSet::load_dir(&data, &vocab)?;
    let mut model = match &checkpoint {
        Some(p) => {
            let m = load_checkpoint(Path::new(p), None).with_context(|| format!("missing or unreadable checkpoint {p}"))?;
            m.check_vocab(&set.vocab_hash).context("checkpoint and training data use different vocabularies")?;
            if m.kind() != kind {
                bail!("checkpoint {p} holds a {:?}, not a {kind:?}", m.kind());
            }
            m
        }
        None => {
            let da = ArchitectureConfig::default();
            let arch = ArchitectureConfig {
                embed_dim: s.get("embed-dim", a.embed_dim, da.embed_dim)?,
                n_heads: s.get("heads", a.heads, da.n_heads)?,
                rff_hidden: s.get("rff-hidden", a.rff_hidden, da.rff_hidden)?,
                n_sab_seq: s.get("sab-seq", a.sab_seq, da.n_sab_seq)?,
                n_sab_dim: s.get("sab-dim", a.sab_dim, da.n_sab_dim)?,
                n_decoder_blocks: s.get("decoder-blocks", a.decoder_blocks, da.n_decoder_blocks)?,
                dropout_rate: s.get("dropout", a.dropout, da.dropout_rate)?,
                max_caption_len: set.width - 1,
            };
            KittModel::new(&arch, kind, vocab, cfg.seed)?
        }
    };
    let dir = start(command, g, s)?;
    log::info!("{} examples of N={} D={}; {} parameters", set.len(), set.n_points, set.n_dims, model.params.iter().map(|p| p.value.len()).sum::<usize>());
    let t = Instant::now();
    let report = if classifier {
        train_classifier(&mut model, &set, &cfg, Some(&dir.path))?
    } else {
        train_captioner(&mut model, &set, &cfg, Some(&dir.path))?
    };
    log::info!("trained {} steps in {:.1}s", report.steps, t.elapsed().as_secs_f64());
    dir.write_json(
        "report.json",
        &json!({
            "kind": format!("{kind:?}").to_lowercase(),
            "steps": report.steps,
            "model_step": model.step,
            "final_eval_loss": report.final_eval.map(|e| e.0),
            "final_eval_acc": report.final_eval.map(|e| e.1),
            "checksum": model.checksum(),
            "vocab_hash": model.vocab.hash(),
            "architecture": model.config(),
        }),
    )?;
    Ok(dir.path)
}

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use kitt_core::datagen::{generate_shards, DataGenConfig, ShardConfig};
use serde_json::json;

use super::{start, VocabArgs};
use crate::settings::Settings;
use crate::Global;

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n_examples: Option<usize>,
    #[arg(long)]
    pub shard_size: Option<usize>,
    /// Points per dataset.
    #[arg(long)]
    pub n_points: Option<usize>,
    /// Input dimensions per dataset.
    #[arg(long)]
    pub n_dims: Option<usize>,
    /// Maximum caption length (terms per expression).
    #[arg(long)]
    pub max_terms: Option<usize>,
    #[arg(long)]
    pub noise_variance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub vocab: VocabArgs,
}

/// Shards go to `<run>/data/` next to `vocab.json`.
pub fn gen_data(g: &Global, a: &GenDataArgs) -> Result<PathBuf> {
    let mut s = Settings::load(g.config.as_deref())?;
    let d = DataGenConfig::default();
    let shards = ShardConfig {
        n_examples: s.get("n-examples", a.n_examples, 20_000)?,
        shard_size: s.get("shard-size", a.shard_size, 5_000)?,
        seed: s.get("seed", a.seed, 0)?,
    };
    let cfg = DataGenConfig {
        n_points: s.get("n-points", a.n_points, d.n_points)?,
        n_dims: s.get("n-dims", a.n_dims, d.n_dims)?,
        max_terms: s.get("max-terms", a.max_terms, d.max_terms)?,
        noise_variance: s.get("noise-variance", a.noise_variance, d.noise_variance)?,
        ..d
    };
    let vocab = a.vocab.resolve(&mut s)?;
    let dir = start("gen-data", g, s)?;
    let data_dir = dir.join("data");
    let t = Instant::now();
    let paths = generate_shards(&vocab, &cfg, &shards, &data_dir)?;
    dir.write_text("data/vocab.json", &vocab.to_json())?;
    log::info!("wrote {} shards ({} examples) in {:.1}s", paths.len(), shards.n_examples, t.elapsed().as_secs_f64());
    dir.write_json(
        "report.json",
        &json!({
            "n_examples": shards.n_examples,
            "shards": paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<_>>(),
            "vocab_size": vocab.len(),
            "vocab_hash": vocab.hash(),
            "generator": cfg,
        }),
    )?;
    Ok(dir.path)
}

pub mod bench;
pub mod data;
pub mod gp;
pub mod report;
pub mod train;

use anyhow::{bail, Result};
use clap::Args;
use kitt_core::io::IngestConfig;
use kitt_core::kernels::Primitive;
use kitt_core::vocab::{build_vocabulary, SelfProductRule, Vocabulary};

use crate::run::{self, RunDir};
use crate::settings::{parse_list, Settings};
use crate::Global;

/// Resolves `threads`, checks for unknown config keys, then creates the run
/// directory with its config snapshot and log file.
pub fn start(command: &str, g: &Global, mut s: Settings) -> Result<RunDir> {
    let threads = s.get("threads", g.threads, 0usize)?;
    s.finish()?;
    if threads > 0 {
        // only the first call in a process can size the global pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let dir = RunDir::create(command, g.run_dir.as_deref(), g.run_root.as_deref())?;
    run::log_to(&dir.join("log.txt"))?;
    dir.write_config(command, &s)?;
    log::info!("kitt {command}: run directory {}", dir.path.display());
    Ok(dir)
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: Option<String>,
    /// Output column.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Row cap applied before splitting, or `none`.
    #[arg(long)]
    pub subsample: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl DataArgs {
    pub fn resolve(&self, s: &mut Settings) -> Result<(String, IngestConfig)> {
        let path = s.required("data", self.data.clone())?;
        let d = IngestConfig::default();
        let subsample = s.get("subsample", self.subsample.clone(), "2000".to_string())?;
        let subsample = match subsample.as_str() {
            "none" => None,
            v => Some(v.parse().map_err(|e| anyhow::anyhow!("subsample `{v}`: {e}"))?),
        };
        let cfg = IngestConfig {
            target_column: s.get("target", self.target.clone(), d.target_column)?,
            test_fraction: s.get("test-fraction", self.test_fraction, d.test_fraction)?,
            subsample,
            seed: s.get("seed", self.seed, 0)?,
        };
        Ok((path, cfg))
    }
}

#[derive(Args, Debug, Default)]
pub struct VocabArgs {
    /// Comma-separated primitive names, or `all`.
    #[arg(long)]
    pub primitives: Option<String>,
    /// `exclude` or `nonreducible`.
    #[arg(long)]
    pub self_products: Option<String>,
}

impl VocabArgs {
    pub fn resolve(&self, s: &mut Settings) -> Result<Vocabulary> {
        let prims = s.get("primitives", self.primitives.clone(), "all".to_string())?;
        let rule = s.get("self-products", self.self_products.clone(), "exclude".to_string())?;
        let prims: Vec<Primitive> = if prims == "all" {
            Primitive::ALL.to_vec()
        } else {
            parse_list::<String>("primitives", &prims)?
                .iter()
                .map(|n| Primitive::from_name(n))
                .collect::<kitt_core::Result<_>>()?
        };
        let rule = match rule.as_str() {
            "exclude" => SelfProductRule::ExcludeAll,
            "nonreducible" => SelfProductRule::NonReducible,
            other => bail!("self-products must be `exclude` or `nonreducible`, got `{other}`"),
        };
        Ok(build_vocabulary(&prims, rule)?)
    }
}

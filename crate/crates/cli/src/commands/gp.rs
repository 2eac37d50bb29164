use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use kitt_core::baselines::{greedy_search, SearchConfig};
use kitt_core::datagen::derive_rng;
use kitt_core::gp::{metrics, predict, Metrics, PredictiveDistribution};
use kitt_core::inference::{fit_hyperparameters, predict_kernel as run_inference, FitConfig, InferenceConfig, Weighting};
use kitt_core::io::{ingest, Dataset, Ingested, Table};
use kitt_core::kernels::{KernelExpression, Token};
use kitt_core::net::load_checkpoint;
use serde_json::json;

use super::{start, DataArgs, VocabArgs};
use crate::model_file::{Component, FittedModel};
use crate::run::RunDir;
use crate::settings::Settings;
use crate::Global;

#[derive(Args, Debug)]
pub struct FitOptions {
    /// Random prior draws before BFGS.
    #[arg(long)]
    pub n_init: Option<usize>,
    /// Pin linear-kernel shifts at 0.
    #[arg(long)]
    pub fix_shift: bool,
}

impl FitOptions {
    fn resolve(&self, s: &mut Settings, default_init: usize) -> Result<FitConfig> {
        Ok(FitConfig {
            n_init: s.get("n-init", self.n_init, default_init)?,
            fix_shift: s.flag("fix-shift", self.fix_shift)?,
            ..Default::default()
        })
    }
}

fn load_data(path: &str, cfg: &kitt_core::io::IngestConfig) -> Result<Ingested> {
    let ing = ingest(Path::new(path), cfg).with_context(|| format!("ingesting {path}"))?;
    log::info!(
        "{path}: {} train / {} test rows, inputs {:?}",
        ing.train.len(),
        ing.test.len(),
        ing.input_columns
    );
    Ok(ing)
}

/// Test metrics in original units, plus a per-row predictions file.
fn score_test(dir: &RunDir, ing: &Ingested, pred_norm: &PredictiveDistribution) -> Result<Option<Metrics>> {
    if ing.test.is_empty() {
        return Ok(None);
    }
    let pred = ing.normalization.inverse_predictive(pred_norm);
    write_predictions(dir, &ing.test_rows, ing.raw_test.y_slice(), &pred)?;
    Ok(Some(metrics(&pred, ing.raw_test.y_slice())?))
}

fn write_predictions(dir: &RunDir, rows: &[usize], y: &[f64], pred: &PredictiveDistribution) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .zip(y)
        .zip(pred.mean.iter().zip(&pred.variance))
        .map(|((r, y), (m, v))| vec![r.to_string(), y.to_string(), m.to_string(), v.to_string()])
        .collect();
    dir.write_tsv("predictions.tsv", &["row", "y", "mean", "variance"], &body)
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained captioner checkpoint.
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Stochastic captions drawn besides the greedy one.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// `network`, `bic` or `uniform`.
    #[arg(long)]
    pub weighting: Option<Weighting>,
    #[command(flatten)]
    pub fit: FitOptions,
}

pub fn predict_kernel(g: &Global, a: &PredictArgs) -> Result<PathBuf> {
    let mut s = Settings::load(g.config.as_deref())?;
    let (path, ingest_cfg) = a.data.resolve(&mut s)?;
    let checkpoint = s.required::<String>("checkpoint", a.checkpoint.clone())?;
    let d = InferenceConfig::default();
    let cfg = InferenceConfig {
        n_samples: s.get("samples", a.samples, d.n_samples)?,
        top_k: s.get("top-k", a.top_k, d.top_k)?,
        temperature: s.get("temperature", a.temperature, d.temperature)?,
        weighting: s.get("weighting", a.weighting, d.weighting)?,
        seed: ingest_cfg.seed,
        fit: a.fit.resolve(&mut s, d.fit.n_init)?,
    };
    let model = load_checkpoint(Path::new(&checkpoint), None).with_context(|| format!("missing or unreadable checkpoint {checkpoint}"))?;
    let dir = start("predict-kernel", g, s)?;
    let ing = load_data(&path, &ingest_cfg)?;
    let test = (!ing.test.is_empty()).then_some(&ing.test);
    let out = run_inference(&model, &ing.train, test, &cfg)?;
    let original = match &out.averaged {
        Some(avg) => score_test(&dir, &ing, &avg.mixture)?,
        None => None,
    };
    let weights: Vec<f64> = out.report.candidates.iter().map(|c| c.weight).collect();
    let components: Vec<Component> = out
        .candidates
        .iter()
        .zip(&weights)
        .filter_map(|(c, w)| {
            c.fit.as_ref().map(|f| Component {
                kernel: c.name(),
                weight: *w,
                model: f.model.clone(),
            })
        })
        .collect();
    if components.is_empty() {
        bail!("no candidate could be fitted");
    }
    FittedModel::new(&ingest_cfg.target_column, &ing.input_columns, &ing.normalization, components, &ing.train).save(&dir.join("model.json"))?;
    let rows: Vec<Vec<String>> = out
        .report
        .candidates
        .iter()
        .map(|c| {
            vec![
                c.kernel.clone(),
                c.caption_log_prob.to_string(),
                c.bic.map_or("nan".into(), |b| b.to_string()),
                c.weight.to_string(),
                c.test_metrics.map_or("nan".into(), |m| m.nlpd.to_string()),
            ]
        })
        .collect();
    dir.write_tsv("candidates.tsv", &["kernel", "caption_log_prob", "bic", "weight", "nlpd"], &rows)?;
    for c in &out.report.candidates {
        log::info!("{:<30} log p = {:>8.3}  weight = {:.3}", c.kernel, c.caption_log_prob, c.weight);
    }
    let t = &out.report.timings;
    log::info!(
        "kernel prediction {:.3}s, hyperparameter fit {:.3}s, total {:.3}s",
        t.kernel_prediction_s,
        t.hyperparameter_fit_s,
        t.total_s
    );
    dir.write_json(
        "report.json",
        &json!({
            "checkpoint": checkpoint,
            "input_columns": ing.input_columns,
            "normalization": ing.normalization,
            "inference": out.report,
            "test_metrics_original_units": original,
        }),
    )?;
    Ok(dir.path)
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Sum of tokens, e.g. `RBF + LIN*NOISE`.
    #[arg(long)]
    pub kernel: Option<String>,
    #[command(flatten)]
    pub fit: FitOptions,
}

pub fn parse_kernel(text: &str, dims: usize) -> Result<KernelExpression> {
    let tokens = text
        .split('+')
        .map(|t| Token::parse(t.trim()))
        .collect::<kitt_core::Result<Vec<_>>>()
        .with_context(|| format!("kernel `{text}`"))?;
    Ok(KernelExpression::from_tokens(&tokens, dims))
}

pub fn fit(g: &Global, a: &FitArgs) -> Result<PathBuf> {
    let mut s = Settings::load(g.config.as_deref())?;
    let (path, ingest_cfg) = a.data.resolve(&mut s)?;
    let kernel = s.required::<String>("kernel", a.kernel.clone())?;
    parse_kernel(&kernel, 1)?;
    let cfg = a.fit.resolve(&mut s, 1000)?;
    let dir = start("fit", g, s)?;
    let ing = load_data(&path, &ingest_cfg)?;
    let expr = parse_kernel(&kernel, ing.train.dims())?;
    let fit = fit_hyperparameters(&ing.train, &expr, &cfg, &mut derive_rng(ingest_cfg.seed, 0))?;
    log::info!("{}: LML {:.4}, BIC {:.4}, converged {}", fit.model.expr, fit.lml, fit.bic, fit.converged);
    let metrics = if ing.test.is_empty() {
        None
    } else {
        let pred = predict(&ing.train.x, &ing.train.y, &ing.test.x, &fit.model)?;
        score_test(&dir, &ing, &pred)?
    };
    let component = Component {
        kernel: fit.model.expr.to_string(),
        weight: 1.0,
        model: fit.model.clone(),
    };
    FittedModel::new(&ingest_cfg.target_column, &ing.input_columns, &ing.normalization, vec![component], &ing.train).save(&dir.join("model.json"))?;
    dir.write_json(
        "report.json",
        &json!({
            "kernel": fit.model.expr.to_string(),
            "lml": fit.lml,
            "bic": fit.bic,
            "n_params": fit.n_params,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "noise_variance": fit.model.noise_variance,
            "params": fit.model.expr.export_params(),
            "test_metrics_original_units": metrics,
        }),
    )?;
    Ok(dir.path)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// `model.json` from `fit`, `search` or `predict-kernel`.
    #[arg(long)]
    pub model: Option<String>,
    /// CSV with the model's input columns and target.
    #[arg(long)]
    pub data: Option<String>,
}

pub fn evaluate(g: &Global, a: &EvaluateArgs) -> Result<PathBuf> {
    let mut s = Settings::load(g.config.as_deref())?;
    let model_path = s.required::<String>("model", a.model.clone())?;
    let data = s.required::<String>("data", a.data.clone())?;
    let model = FittedModel::load(Path::new(&model_path))?;
    let dir = start("evaluate", g, s)?;
    let table = Table::read(Path::new(&data))?;
    let (ds, columns): (Dataset, Vec<String>) = table.dataset(&model.target_column)?;
    if columns != model.input_columns {
        bail!("{data} has inputs {columns:?}, the model expects {:?}", model.input_columns);
    }
    let pred = model.predict_raw(&ds.x)?;
    let m = metrics(&pred, ds.y_slice())?;
    write_predictions(&dir, &(0..ds.len()).collect::<Vec<_>>(), ds.y_slice(), &pred)?;
    log::info!("NLPD {:.4}, RMSE {:.4} over {} rows (original units)", m.nlpd, m.rmse, ds.len());
    dir.write_json(
        "report.json",
        &json!({ "model": model_path, "data": data, "rows": ds.len(), "nlpd": m.nlpd, "rmse": m.rmse }),
    )?;
    Ok(dir.path)
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Prior draws per candidate during the search.
    #[arg(long)]
    pub search_init: Option<usize>,
    /// Prior draws for the final refit.
    #[arg(long)]
    pub final_init: Option<usize>,
    /// Stop starting new fits after this many seconds.
    #[arg(long)]
    pub deadline: Option<f64>,
    /// Pin linear-kernel shifts at 0.
    #[arg(long)]
    pub fix_shift: bool,
}

pub fn search(g: &Global, a: &SearchArgs) -> Result<PathBuf> {
    let mut s = Settings::load(g.config.as_deref())?;
    let (path, ingest_cfg) = a.data.resolve(&mut s)?;
    let vocab = a.vocab.resolve(&mut s)?;
    let d = SearchConfig::default();
    let cfg = SearchConfig {
        max_depth: s.get("max-depth", a.max_depth, d.max_depth)?,
        search_init: s.get("search-init", a.search_init, d.search_init)?,
        final_init: s.get("final-init", a.final_init, d.final_init)?,
        deadline: s.optional("deadline", a.deadline)?.map(std::time::Duration::from_secs_f64),
        seed: ingest_cfg.seed,
        fit: FitConfig {
            fix_shift: s.flag("fix-shift", a.fix_shift)?,
            ..Default::default()
        },
    };
    let dir = start("search", g, s)?;
    let ing = load_data(&path, &ingest_cfg)?;
    let r = greedy_search(&ing.train, &vocab, &cfg)?;
    log::info!("selected {} (BIC {:.3}) in {:.1}s", r.expression, r.fit.bic, r.elapsed_s);
    if r.timed_out {
        log::warn!("deadline reached; result is the incumbent at that point");
    }
    let metrics = if ing.test.is_empty() {
        None
    } else {
        let pred = predict(&ing.train.x, &ing.train.y, &ing.test.x, &r.fit.model)?;
        score_test(&dir, &ing, &pred)?
    };
    let trace: Vec<Vec<String>> = r
        .trace
        .iter()
        .map(|t| vec![t.depth.to_string(), t.kernel.clone(), t.bic.map_or("nan".into(), |b| b.to_string())])
        .collect();
    dir.write_tsv("trace.tsv", &["depth", "kernel", "bic"], &trace)?;
    let component = Component {
        kernel: r.expression.to_string(),
        weight: 1.0,
        model: r.fit.model.clone(),
    };
    FittedModel::new(&ingest_cfg.target_column, &ing.input_columns, &ing.normalization, vec![component], &ing.train).save(&dir.join("model.json"))?;
    dir.write_json(
        "report.json",
        &json!({
            "kernel": r.expression.to_string(),
            "bic": r.fit.bic,
            "lml": r.fit.lml,
            "path": r.path,
            "timed_out": r.timed_out,
            "elapsed_s": r.elapsed_s,
            "candidates_evaluated": r.trace.len(),
            "test_metrics_original_units": metrics,
        }),
    )?;
    Ok(dir.path)
}

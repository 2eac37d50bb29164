use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use kitt_core::baselines::{greedy_search, SearchConfig};
use kitt_core::datagen::{derive_rng, generate_example, DataGenConfig};
use kitt_core::gp::{log_marginal_likelihood_value, GpModel};
use kitt_core::inference::{generate_caption, DecodeMode};
use kitt_core::io::Dataset;
use kitt_core::kernels::{KernelExpression, Primitive, Token};
use kitt_core::net::{load_checkpoint, KittModel, ModelKind};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::json;

use super::start;
use crate::settings::{parse_list, Settings};
use crate::Global;

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// `synthetic-gtr` (ground-truth recovery) or `timing`.
    #[arg(long)]
    pub suite: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Comma-separated dataset sizes.
    #[arg(long)]
    pub sizes: Option<String>,
    /// Comma-separated input dimensions.
    #[arg(long)]
    pub dims: Option<String>,
    /// Datasets per size (synthetic-gtr).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Run the full greedy search in every timing cell instead of bounding it.
    #[arg(long)]
    pub full_search: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct AccuracyCell {
    n: usize,
    d: usize,
    samples: usize,
    top1: f64,
    top3: f64,
    top1_se: f64,
}

#[derive(Serialize)]
struct TimingCell {
    n: usize,
    d: usize,
    caption_s: f64,
    search_s: f64,
    /// False when `search_s` is a lower bound from the depth-1 prior scoring.
    search_exact: bool,
}

fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    idx
}

/// First-token distribution over kernel tokens for either model kind.
fn first_token_probs(model: &KittModel, x: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
    Ok(match model.kind() {
        ModelKind::Classifier => model.classify(x, y)?,
        ModelKind::Captioner => {
            let mut p = model.decode_step(x, y, &[])?;
            p.truncate(model.vocab.num_kernels());
            p
        }
    })
}

fn accuracy(model: &KittModel, sizes: &[usize], dims: &[usize], samples: usize, seed: u64) -> Result<Vec<AccuracyCell>> {
    let mut cells = Vec::new();
    for &d in dims {
        for &n in sizes {
            let cfg = DataGenConfig {
                n_points: n,
                n_dims: d,
                max_terms: 1,
                ..Default::default()
            };
            let (mut top1, mut top3) = (0, 0);
            for i in 0..samples {
                let ex = generate_example(&model.vocab, &cfg, &mut derive_rng(seed, (n * 1000 + d) as u64 * 1_000_000 + i as u64))?;
                let truth = ex.label.kernel_ids()[0];
                let order = ranked(&first_token_probs(model, &ex.x, ex.y.as_slice())?);
                top1 += usize::from(order[0] == truth);
                top3 += usize::from(order.iter().take(3).any(|&t| t == truth));
            }
            let p = top1 as f64 / samples as f64;
            log::info!("N={n} D={d}: top-1 {p:.3}, top-3 {:.3}", top3 as f64 / samples as f64);
            cells.push(AccuracyCell {
                n,
                d,
                samples,
                top1: p,
                top3: top3 as f64 / samples as f64,
                top1_se: (p * (1.0 - p) / samples as f64).sqrt(),
            });
        }
    }
    Ok(cells)
}

fn timing(model: &KittModel, sizes: &[usize], dims: &[usize], full: bool, seed: u64) -> Result<Vec<TimingCell>> {
    use rand::Rng;
    let mut cells = Vec::new();
    for &d in dims {
        for &n in sizes {
            let mut rng = derive_rng(seed, (n * 1000 + d) as u64);
            let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.5..2.5));
            let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let data = Dataset::new(x, y)?;
            let t = Instant::now();
            generate_caption(model, &data, DecodeMode::Greedy, &mut rng)?;
            let caption_s = t.elapsed().as_secs_f64();
            let first = n == sizes[0] && d == dims[0];
            let (search_s, search_exact) = if full || first {
                let t = Instant::now();
                greedy_search(&data, &model.vocab, &SearchConfig { seed, ..Default::default() })?;
                (t.elapsed().as_secs_f64(), true)
            } else {
                // depth 1 alone scores every token at 50 prior draws
                let gp = GpModel::new(KernelExpression::from_tokens(&[Token::single(Primitive::Rbf)], d), 0.1);
                let t = Instant::now();
                log_marginal_likelihood_value(&data.x, &data.y, &gp)?;
                (model.vocab.num_kernels() as f64 * 50.0 * t.elapsed().as_secs_f64(), false)
            };
            log::info!("N={n} D={d}: caption {caption_s:.3}s, search {}{search_s:.2}s", if search_exact { "" } else { "≥" });
            cells.push(TimingCell {
                n,
                d,
                caption_s,
                search_s,
                search_exact,
            });
        }
    }
    Ok(cells)
}

pub fn benchmark(g: &Global, a: &BenchArgs) -> Result<PathBuf> {
    let mut s = Settings::load(g.config.as_deref())?;
    let suite = s.required::<String>("suite", a.suite.clone())?;
    let checkpoint = s.required::<String>("checkpoint", a.checkpoint.clone())?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let model = load_checkpoint(Path::new(&checkpoint), None).with_context(|| format!("missing or unreadable checkpoint {checkpoint}"))?;
    match suite.as_str() {
        "synthetic-gtr" => {
            let sizes = parse_list::<usize>("sizes", &s.get("sizes", a.sizes.clone(), "64,256,1024".to_string())?)?;
            let dims = parse_list::<usize>("dims", &s.get("dims", a.dims.clone(), "4".to_string())?)?;
            let samples = s.get("samples", a.samples, 300)?;
            let dir = start("benchmark", g, s)?;
            let cells = accuracy(&model, &sizes, &dims, samples, seed)?;
            let rows: Vec<Vec<String>> = cells
                .iter()
                .map(|c| vec![c.n.to_string(), c.d.to_string(), c.top1.to_string(), c.top3.to_string(), c.top1_se.to_string()])
                .collect();
            dir.write_tsv("accuracy.tsv", &["n", "d", "top1", "top3", "top1_se"], &rows)?;
            dir.write_json(
                "report.json",
                &json!({ "suite": suite, "checkpoint": checkpoint, "chance": 1.0 / model.vocab.num_kernels() as f64, "cells": cells }),
            )?;
            Ok(dir.path)
        }
        "timing" => {
            let sizes = parse_list::<usize>("sizes", &s.get("sizes", a.sizes.clone(), "64,512,2000".to_string())?)?;
            let dims = parse_list::<usize>("dims", &s.get("dims", a.dims.clone(), "4,14".to_string())?)?;
            let full = s.flag("full-search", a.full_search)?;
            let dir = start("benchmark", g, s)?;
            let cells = timing(&model, &sizes, &dims, full, seed)?;
            let rows: Vec<Vec<String>> = cells
                .iter()
                .map(|c| vec![c.n.to_string(), c.d.to_string(), c.caption_s.to_string(), c.search_s.to_string(), c.search_exact.to_string()])
                .collect();
            dir.write_tsv("timing.tsv", &["n", "d", "caption_s", "search_s", "search_exact"], &rows)?;
            dir.write_json("report.json", &json!({ "suite": suite, "checkpoint": checkpoint, "cells": cells }))?;
            Ok(dir.path)
        }
        other => bail!("unknown suite `{other}` (synthetic-gtr, timing)"),
    }
}

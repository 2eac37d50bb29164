//! From a dataset to fitted, model-averaged kernels: decode captions,
//! rank candidates, fit hyperparameters and combine the predictives.

use std::collections::HashMap;
use std::time::Instant;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::derive_rng;
use crate::error::{Error, Result};
use crate::gp::{bic, log_marginal_likelihood, log_marginal_likelihood_value, metrics, predict, GpModel, Metrics, PredictiveDistribution};
use crate::io::Dataset;
use crate::kernels::priors::sample_hyperparameters;
use crate::kernels::{Factor, KernelExpression, PriorSet, Token};
use crate::net::{KittModel, ModelKind};
use crate::optim::{minimize, BfgsOptions};
use crate::vocab::{caption_to_expression, Caption};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    /// Sample each token from the distribution sharpened by `1/temperature`.
    Stochastic { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCaption {
    pub caption: Caption,
    /// Sum of the log-probabilities of every emitted token, STOP included.
    pub log_prob: f64,
}

fn pick<R: Rng + ?Sized>(probs: &[f64], mode: DecodeMode, rng: &mut R) -> usize {
    let argmax = || {
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        best
    };
    match mode {
        DecodeMode::Greedy => argmax(),
        DecodeMode::Stochastic { temperature } if temperature <= 0.0 => argmax(),
        DecodeMode::Stochastic { temperature } => {
            // work in log space so small temperatures do not underflow
            let logs: Vec<f64> = probs.iter().map(|p| p.ln() / temperature).collect();
            let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, wi) in w.iter().enumerate() {
                u -= wi;
                if u < 0.0 {
                    return i;
                }
            }
            argmax()
        }
    }
}

/// Caption decoder over one dataset's encodings.
struct Decoder<'a> {
    model: &'a KittModel,
    enc: Vec<f32>,
    d: usize,
}

impl<'a> Decoder<'a> {
    fn new(model: &'a KittModel, data: &Dataset) -> Result<Self> {
        if model.kind() != ModelKind::Captioner {
            return Err(Error::Config("caption generation needs a captioner model".into()));
        }
        if data.is_empty() {
            return Err(Error::Config("cannot caption an empty dataset".into()));
        }
        Ok(Decoder {
            model,
            enc: model.encode_dataset(&data.x, data.y_slice())?,
            d: data.dims(),
        })
    }

    fn generate<R: Rng + ?Sized>(&self, mode: DecodeMode, rng: &mut R) -> Result<GeneratedCaption> {
        let stop = self.model.vocab.stop_id();
        let max_len = self.model.config().max_caption_len;
        let mut ids = Vec::with_capacity(max_len + 1);
        let mut log_prob = 0.0;
        loop {
            let probs = self.model.net.next_token_probs(&self.model.params, &self.enc, self.d, &ids)?;
            // the last position may only hold STOP
            let t = if ids.len() == max_len { stop } else { pick(&probs, mode, rng) };
            log_prob += probs[t].ln();
            ids.push(t);
            if t == stop {
                break;
            }
        }
        Ok(GeneratedCaption {
            caption: Caption { ids },
            log_prob,
        })
    }
}

/// Decodes one caption token by token until STOP or the maximum length.
pub fn generate_caption<R: Rng + ?Sized>(model: &KittModel, data: &Dataset, mode: DecodeMode, rng: &mut R) -> Result<GeneratedCaption> {
    Decoder::new(model, data)?.generate(mode, rng)
}

/// Fitted hyperparameters of one expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: GpModel,
    pub lml: f64,
    /// Best marginal likelihood among the random initialisations.
    pub init_lml: f64,
    pub bic: f64,
    /// Number of free hyperparameters (likelihood noise included).
    pub n_params: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateKernel {
    pub expression: KernelExpression,
    pub caption: Caption,
    pub caption_log_prob: f64,
    pub fit: Option<FitResult>,
}

impl CandidateKernel {
    pub fn name(&self) -> String {
        if self.expression.is_empty() {
            "<empty>".into()
        } else {
            self.expression.tokens().iter().map(ToString::to_string).collect::<Vec<_>>().join(" + ")
        }
    }
}

/// Greedy caption plus `n_samples` stochastic ones, deduplicated by
/// structure and ranked by caption log-probability; the `k` best are kept.
///
/// A structure reached by several captions keeps its most probable one.
pub fn top_candidates<R: Rng + ?Sized>(
    model: &KittModel,
    data: &Dataset,
    n_samples: usize,
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<CandidateKernel>> {
    if k == 0 || n_samples < k {
        return Err(Error::Config(format!("need n_samples ≥ k ≥ 1, got n_samples={n_samples}, k={k}")));
    }
    let decoder = Decoder::new(model, data)?;
    let max_len = model.config().max_caption_len;
    let mut captions = vec![decoder.generate(DecodeMode::Greedy, rng)?];
    for _ in 0..n_samples {
        captions.push(decoder.generate(DecodeMode::Stochastic { temperature }, rng)?);
    }
    let mut best: HashMap<Vec<Token>, CandidateKernel> = HashMap::new();
    for g in captions {
        let expression = caption_to_expression(&g.caption, &model.vocab, max_len, data.dims())?;
        let key = expression.structure_key();
        let cand = CandidateKernel {
            expression,
            caption: g.caption,
            caption_log_prob: g.log_prob,
            fit: None,
        };
        match best.get(&key) {
            Some(old) if old.caption_log_prob >= cand.caption_log_prob => {}
            _ => {
                best.insert(key, cand);
            }
        }
    }
    let mut out: Vec<CandidateKernel> = best.into_values().collect();
    if out.iter().all(|c| c.expression.is_empty()) {
        warn!("the model only emitted STOP; returning the empty expression");
    } else {
        out.retain(|c| !c.expression.is_empty());
    }
    out.sort_by(|a, b| {
        b.caption_log_prob
            .total_cmp(&a.caption_log_prob)
            .then_with(|| a.name().cmp(&b.name()))
    });
    out.truncate(k);
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Random prior draws; BFGS starts from the best of them.
    pub n_init: usize,
    pub priors: PriorSet,
    #[serde(skip)]
    pub bfgs: BfgsOptions,
    /// Pin every linear shift at 0 instead of fitting it.
    pub fix_shift: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_init: 1000,
            priors: PriorSet::default(),
            bfgs: BfgsOptions::default(),
            fix_shift: false,
        }
    }
}

fn zero_shifts(expr: &mut KernelExpression) {
    for t in &mut expr.terms {
        for f in t.factors_mut() {
            if let Factor::Linear { shifts, .. } = f {
                shifts.iter_mut().for_each(|s| *s = 0.0);
            }
        }
    }
}

/// Maximum-marginal-likelihood hyperparameters for `expr`, likelihood noise
/// included.
pub fn fit_hyperparameters<R: Rng + ?Sized>(data: &Dataset, expr: &KernelExpression, config: &FitConfig, rng: &mut R) -> Result<FitResult> {
    let d = data.dims();
    let tokens = expr.tokens();
    let draws: Vec<GpModel> = (0..config.n_init.max(1))
        .map(|_| {
            let mut e = KernelExpression::new(
                tokens
                    .iter()
                    .map(|t| sample_hyperparameters(t, &config.priors, d, rng))
                    .collect(),
            );
            if config.fix_shift {
                zero_shifts(&mut e);
            }
            GpModel::new(e, config.priors.sample_noise(rng))
        })
        .collect();
    let scores: Vec<f64> = draws
        .par_iter()
        .map(|m| log_marginal_likelihood_value(&data.x, &data.y, m).unwrap_or(f64::NEG_INFINITY))
        .collect();
    let (best, init_lml) = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, s)| (i, *s))
        .ok_or_else(|| Error::FitFailed(expr.to_text()))?;
    let mut model = draws[best].clone();

    // free coordinates of the unconstrained vector (noise is last)
    let mut free: Vec<bool> = expr_shift_free(&model.expr, config.fix_shift);
    free.push(true);
    let full0 = model.to_unconstrained();
    let x0: Vec<usize> = (0..full0.len()).filter(|&i| free[i]).collect();
    let embed = |z: &[f64]| {
        let mut theta = full0.clone();
        for (k, &i) in x0.iter().enumerate() {
            theta[i] = z[k];
        }
        theta
    };
    let mut work = model.clone();
    let objective = |z: &[f64]| -> Option<(f64, Vec<f64>)> {
        work.set_unconstrained(&embed(z)).ok()?;
        let (v, g) = log_marginal_likelihood(&data.x, &data.y, &work).ok()?;
        let g: Vec<f64> = x0.iter().map(|&i| -g[i]).collect();
        (v.is_finite() && g.iter().all(|x| x.is_finite())).then_some((-v, g))
    };
    let start: Vec<f64> = x0.iter().map(|&i| full0[i]).collect();
    let (lml, converged, grad_norm, iterations) = match minimize(objective, start, &config.bfgs) {
        Some(r) if -r.f >= init_lml => {
            model.set_unconstrained(&embed(&r.x))?;
            (-r.f, r.converged, r.grad_norm(), r.iterations)
        }
        _ => (init_lml, false, f64::NAN, 0),
    };
    if !converged {
        log::debug!("BFGS did not converge for `{}`", expr.to_text());
    }
    let n_params = x0.len();
    Ok(FitResult {
        bic: bic(lml, n_params, data.len()),
        model,
        lml,
        init_lml,
        n_params,
        converged,
        grad_norm,
        iterations,
    })
}

fn expr_shift_free(expr: &KernelExpression, fix_shift: bool) -> Vec<bool> {
    expr.shift_mask().into_iter().map(|s| !(s && fix_shift)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Proportional to the caption probability.
    #[default]
    Network,
    /// Proportional to `exp(-BIC/2)`.
    Bic,
    Uniform,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network" => Ok(Weighting::Network),
            "bic" => Ok(Weighting::Bic),
            "uniform" => Ok(Weighting::Uniform),
            _ => Err(Error::Config(format!("unknown weighting `{s}` (network, bic, uniform)"))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Weighting::Network => "network",
            Weighting::Bic => "bic",
            Weighting::Uniform => "uniform",
        })
    }
}

/// Normalised weights from unnormalised log-weights.
pub fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let mx = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logw.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn candidate_weights(candidates: &[CandidateKernel], weighting: Weighting) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let logw = candidates
        .iter()
        .map(|c| match weighting {
            Weighting::Network => Ok(c.caption_log_prob),
            Weighting::Uniform => Ok(0.0),
            Weighting::Bic => c
                .fit
                .as_ref()
                .map(|f| -0.5 * f.bic)
                .ok_or_else(|| Error::Config(format!("candidate `{}` has not been fitted", c.name()))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_log_weights(&logw))
}

/// Moments of the Gaussian mixture `Σ w_i N(m_i, v_i)` at each point.
///
/// The variance is accumulated as `Σ w_i (v_i + (m_i − m̄)²)`, which equals
/// `Σ w_i (v_i + m_i²) − m̄²` and is exact for a single component.
pub fn mixture(components: &[PredictiveDistribution], weights: &[f64]) -> Result<PredictiveDistribution> {
    let first = components.first().ok_or(Error::NoCandidates)?;
    if weights.len() != components.len() || components.iter().any(|c| c.len() != first.len() || c.variance.len() != c.mean.len()) {
        return Err(Error::DimensionMismatch("mixture components disagree in length".into()));
    }
    let n = first.len();
    let mut mean = vec![0.0; n];
    let mut variance = vec![0.0; n];
    for (c, w) in components.iter().zip(weights) {
        for i in 0..n {
            mean[i] += w * c.mean[i];
        }
    }
    for (c, w) in components.iter().zip(weights) {
        for i in 0..n {
            let dm = c.mean[i] - mean[i];
            variance[i] += w * (c.variance[i] + dm * dm);
        }
    }
    Ok(PredictiveDistribution { mean, variance })
}

#[derive(Debug, Clone)]
pub struct Averaged {
    pub weights: Vec<f64>,
    pub components: Vec<PredictiveDistribution>,
    pub mixture: PredictiveDistribution,
}

/// Weighted mixture of the fitted candidates' posteriors at `x_test`.
pub fn model_average(candidates: &[CandidateKernel], weighting: Weighting, train: &Dataset, x_test: &DMatrix<f64>) -> Result<Averaged> {
    let weights = candidate_weights(candidates, weighting)?;
    let components = candidates
        .par_iter()
        .map(|c| {
            let fit = c
                .fit
                .as_ref()
                .ok_or_else(|| Error::Config(format!("candidate `{}` has not been fitted", c.name())))?;
            predict(&train.x, &train.y, x_test, &fit.model)
        })
        .collect::<Result<Vec<_>>>()?;
    let mixture = mixture(&components, &weights)?;
    Ok(Averaged {
        weights,
        components,
        mixture,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub n_samples: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub weighting: Weighting,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            n_samples: 16,
            top_k: 3,
            temperature: 1.0,
            weighting: Weighting::Network,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub kernel_prediction_s: f64,
    pub hyperparameter_fit_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateReport {
    pub kernel: String,
    pub caption: String,
    pub caption_log_prob: f64,
    pub lml: Option<f64>,
    pub bic: Option<f64>,
    pub noise_variance: Option<f64>,
    pub params: Option<crate::kernels::ParamMap>,
    pub converged: Option<bool>,
    pub weight: f64,
    pub test_metrics: Option<Metrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceReport {
    pub weighting: Weighting,
    pub candidates: Vec<CandidateReport>,
    /// Metrics of the mixture on the test set, in normalised units.
    pub test_metrics: Option<Metrics>,
    pub timings: Timings,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub candidates: Vec<CandidateKernel>,
    pub averaged: Option<Averaged>,
    pub report: InferenceReport,
}

/// Fits every candidate in parallel; candidate `i` draws its initial
/// hyperparameters from stream `i` of `seed`.
pub fn fit_candidates(candidates: &mut [CandidateKernel], data: &Dataset, config: &FitConfig, seed: u64) -> Result<()> {
    let fits = candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| fit_hyperparameters(data, &c.expression, config, &mut derive_rng(seed, i as u64)))
        .collect::<Vec<_>>();
    for (c, f) in candidates.iter_mut().zip(fits) {
        c.fit = Some(f?);
    }
    Ok(())
}

/// Caption, rank, fit and average; test metrics when `test` is given.
pub fn predict_kernel(model: &KittModel, train: &Dataset, test: Option<&Dataset>, config: &InferenceConfig) -> Result<Inference> {
    let started = Instant::now();
    let mut rng = derive_rng(config.seed, u64::MAX);
    let mut candidates = top_candidates(model, train, config.n_samples, config.top_k, config.temperature, &mut rng)?;
    let kernel_prediction_s = started.elapsed().as_secs_f64();
    let fit_started = Instant::now();
    fit_candidates(&mut candidates, train, &config.fit, config.seed)?;
    let hyperparameter_fit_s = fit_started.elapsed().as_secs_f64();
    let weights = candidate_weights(&candidates, config.weighting)?;
    let (averaged, test_metrics, per) = match test {
        Some(t) if !t.is_empty() => {
            let avg = model_average(&candidates, config.weighting, train, &t.x)?;
            let m = metrics(&avg.mixture, t.y_slice())?;
            let per = avg
                .components
                .iter()
                .map(|p| metrics(p, t.y_slice()).ok())
                .collect::<Vec<_>>();
            (Some(avg), Some(m), per)
        }
        _ => (None, None, vec![None; candidates.len()]),
    };
    let report_rows = candidates
        .iter()
        .zip(&weights)
        .zip(per)
        .map(|((c, w), m)| CandidateReport {
            kernel: c.name(),
            caption: c.caption.to_text(&model.vocab).unwrap_or_default(),
            caption_log_prob: c.caption_log_prob,
            lml: c.fit.as_ref().map(|f| f.lml),
            bic: c.fit.as_ref().map(|f| f.bic),
            noise_variance: c.fit.as_ref().map(|f| f.model.noise_variance),
            params: c.fit.as_ref().map(|f| f.model.expr.export_params()),
            converged: c.fit.as_ref().map(|f| f.converged),
            weight: *w,
            test_metrics: m,
        })
        .collect();
    Ok(Inference {
        candidates,
        averaged,
        report: InferenceReport {
            weighting: config.weighting,
            candidates: report_rows,
            test_metrics,
            timings: Timings {
                kernel_prediction_s,
                hyperparameter_fit_s,
                total_s: started.elapsed().as_secs_f64(),
            },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::sample_gp;
    use crate::kernels::{Primitive, ProductKernel};
    use crate::net::ArchitectureConfig;
    use crate::vocab::{build_vocabulary, default_vocabulary};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(vocab: crate::vocab::Vocabulary) -> KittModel {
        let arch = ArchitectureConfig {
            embed_dim: 8,
            n_heads: 2,
            rff_hidden: 8,
            n_sab_seq: 1,
            n_sab_dim: 1,
            n_decoder_blocks: 1,
            dropout_rate: 0.0,
            max_caption_len: 3,
        };
        KittModel::new(&arch, ModelKind::Captioner, vocab, 5).unwrap()
    }

    fn random_data(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.5..2.5));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        Dataset::new(x, y).unwrap()
    }

    fn rbf_data(n: usize, ls: f64, noise: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.5..2.5));
        let expr = KernelExpression::new(vec![ProductKernel::new(1.0, vec![Factor::Rbf { lengthscales: vec![ls] }]).unwrap()]);
        let y = sample_gp(&x, &GpModel::new(expr, noise), &mut rng).unwrap();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let model = tiny_model(default_vocabulary());
        let data = random_data(10, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = generate_caption(&model, &data, DecodeMode::Greedy, &mut rng).unwrap();
        let b = generate_caption(&model, &data, DecodeMode::Greedy, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a.log_prob <= 0.0);
        for s in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let c = generate_caption(&model, &data, DecodeMode::Stochastic { temperature: 1.0 }, &mut rng).unwrap();
            assert!(c.caption.kernel_ids().len() <= 3);
            assert_eq!(*c.caption.ids.last().unwrap(), model.vocab.stop_id());
        }
    }

    #[test]
    fn cold_sampling_matches_greedy() {
        let model = tiny_model(default_vocabulary());
        let data = random_data(10, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = generate_caption(&model, &data, DecodeMode::Greedy, &mut rng).unwrap();
        for s in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let c = generate_caption(&model, &data, DecodeMode::Stochastic { temperature: 1e-4 }, &mut rng).unwrap();
            assert_eq!(c.caption, g.caption);
        }
    }

    #[test]
    fn log_prob_is_the_sum_of_step_probabilities() {
        let model = tiny_model(default_vocabulary());
        let data = random_data(8, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = generate_caption(&model, &data, DecodeMode::Stochastic { temperature: 1.0 }, &mut rng).unwrap();
        let mut want = 0.0;
        for (i, &t) in g.caption.ids.iter().enumerate() {
            let p = model.decode_step(&data.x, data.y_slice(), &g.caption.ids[..i]).unwrap();
            want += p[t].ln();
        }
        assert!((g.log_prob - want).abs() < 1e-9);
    }

    #[test]
    fn candidates_are_unique_ranked_and_include_greedy() {
        let model = tiny_model(default_vocabulary());
        let data = random_data(12, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let greedy = generate_caption(&model, &data, DecodeMode::Greedy, &mut rng).unwrap();
        let all = top_candidates(&model, &data, 40, 40, 1.0, &mut rng).unwrap();
        let mut keys: Vec<_> = all.iter().map(|c| c.expression.structure_key()).collect();
        keys.dedup();
        let n = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), n);
        assert!(all.windows(2).all(|w| w[0].caption_log_prob >= w[1].caption_log_prob));
        let gexpr = caption_to_expression(&greedy.caption, &model.vocab, 3, 2).unwrap();
        assert!(gexpr.is_empty() || keys.contains(&gexpr.structure_key()));
        let top = top_candidates(&model, &data, 16, 3, 1.0, &mut rng).unwrap();
        assert!(top.len() <= 3);
        assert!(top_candidates(&model, &data, 2, 3, 1.0, &mut rng).is_err());
    }

    #[test]
    fn stop_only_model_yields_the_empty_candidate() {
        let mut model = tiny_model(build_vocabulary(&[Primitive::Rbf], Default::default()).unwrap());
        // make STOP overwhelmingly likely
        let id = model.params.id("dec.out.b").unwrap();
        let stop = model.vocab.stop_id();
        model.params.get_mut(id).value[stop] = 50.0;
        let data = random_data(6, 1, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = top_candidates(&model, &data, 4, 3, 1.0, &mut rng).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].expression.is_empty());
    }

    #[test]
    fn fit_improves_on_initialisation_and_reaches_a_stationary_point() {
        let data = rbf_data(60, 0.7, 0.05, 11);
        let expr = KernelExpression::from_tokens(&[Token::single(Primitive::Rbf)], 1);
        let cfg = FitConfig {
            n_init: 50,
            ..Default::default()
        };
        let f = fit_hyperparameters(&data, &expr, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(f.lml >= f.init_lml);
        assert!(f.bic.is_finite());
        assert_eq!(f.n_params, 3);
        if f.converged {
            assert!(f.grad_norm < 1e-3);
        }
        let direct = log_marginal_likelihood_value(&data.x, &data.y, &f.model).unwrap();
        assert!((direct - f.lml).abs() < 1e-8);
    }

    #[test]
    fn fixed_shift_stays_at_zero() {
        let data = random_data(30, 1, 8);
        let expr = KernelExpression::from_tokens(&[Token::product([Primitive::Linear, Primitive::WhiteNoise])], 1);
        let cfg = FitConfig {
            n_init: 20,
            fix_shift: true,
            ..Default::default()
        };
        let f = fit_hyperparameters(&data, &expr, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let theta = f.model.expr.to_unconstrained();
        for (v, s) in theta.iter().zip(f.model.expr.shift_mask()) {
            if s {
                assert_eq!(*v, 0.0);
            }
        }
        let free = FitConfig { fix_shift: false, ..cfg };
        let g = fit_hyperparameters(&data, &expr, &free, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(g.n_params, f.n_params + 1);
    }

    #[test]
    fn mixture_degenerate_cases() {
        let p = PredictiveDistribution {
            mean: vec![0.3, -1.7],
            variance: vec![0.2, 1.1],
        };
        assert_eq!(mixture(&[p.clone()], &[1.0]).unwrap(), p);
        let two = mixture(&[p.clone(), p.clone()], &[0.3, 0.7]).unwrap();
        for i in 0..2 {
            assert!((two.mean[i] - p.mean[i]).abs() < 1e-15);
            assert!((two.variance[i] - p.variance[i]).abs() < 1e-15);
        }
        assert!(matches!(mixture(&[], &[]), Err(Error::NoCandidates)));
        assert!(matches!(candidate_weights(&[], Weighting::Uniform), Err(Error::NoCandidates)));
    }

    #[test]
    fn weights_follow_the_chosen_score() {
        let mk = |lp: f64, bic_v: f64| CandidateKernel {
            expression: KernelExpression::default(),
            caption: Caption { ids: vec![0] },
            caption_log_prob: lp,
            fit: Some(FitResult {
                model: GpModel::new(KernelExpression::default(), 1.0),
                lml: 0.0,
                init_lml: 0.0,
                bic: bic_v,
                n_params: 1,
                converged: true,
                grad_norm: 0.0,
                iterations: 0,
            }),
        };
        let c = [mk(-1.0, 10.0), mk(-2.0, 8.0)];
        let w = candidate_weights(&c, Weighting::Network).unwrap();
        assert!((w[0] / w[1] - 1f64.exp()).abs() < 1e-12);
        let w = candidate_weights(&c, Weighting::Bic).unwrap();
        assert!((w[1] / w[0] - 1f64.exp()).abs() < 1e-12);
        assert_eq!(candidate_weights(&c, Weighting::Uniform).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn pipeline_report() {
        let model = tiny_model(build_vocabulary(&[Primitive::Rbf, Primitive::Linear], Default::default()).unwrap());
        let data = rbf_data(40, 0.8, 0.05, 9);
        let train = data.rows(&(0..30).collect::<Vec<_>>());
        let test = data.rows(&(30..40).collect::<Vec<_>>());
        let cfg = InferenceConfig {
            n_samples: 6,
            fit: FitConfig {
                n_init: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = predict_kernel(&model, &train, Some(&test), &cfg).unwrap();
        assert!(!out.candidates.is_empty() && out.candidates.len() <= 3);
        let wsum: f64 = out.report.candidates.iter().map(|c| c.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert!(out.report.test_metrics.is_some());
        let again = predict_kernel(&model, &train, Some(&test), &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&again.report.candidates).unwrap(),
            serde_json::to_string(&out.report.candidates).unwrap()
        );
    }
}

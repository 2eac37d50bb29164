//! Comparison methods: greedy kernel search over sums of vocabulary tokens,
//! a single RBF-ARD kernel, and random vocabulary selection.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::derive_rng;
use crate::error::{Error, Result};
use crate::inference::{fit_hyperparameters, FitConfig, FitResult};
use crate::io::Dataset;
use crate::kernels::{KernelExpression, Primitive, Token};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub max_depth: usize,
    /// Prior draws per candidate during the search.
    pub search_init: usize,
    /// Prior draws for the final refit of the winner.
    pub final_init: usize,
    /// Stop starting new fits after this long.
    pub deadline: Option<Duration>,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_depth: 3,
            search_init: 50,
            final_init: 1000,
            deadline: None,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub depth: usize,
    pub kernel: String,
    /// `None` when the fit failed or was skipped.
    pub bic: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchResult {
    pub expression: KernelExpression,
    pub fit: FitResult,
    /// Every candidate evaluated, in order.
    pub trace: Vec<TraceEntry>,
    /// Incumbent and its search-time BIC after each accepted depth.
    pub path: Vec<(String, f64)>,
    pub timed_out: bool,
    pub elapsed_s: f64,
}

fn sum_name(tokens: &[Token]) -> String {
    tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(" + ")
}

/// Greedy search scored by BIC. Depth 1 fits every token; each later depth
/// adds one more token to the incumbent sum and keeps the best extension if
/// it lowers the BIC.
pub fn greedy_search(data: &Dataset, vocab: &Vocabulary, config: &SearchConfig) -> Result<SearchResult> {
    if config.max_depth == 0 {
        return Err(Error::Config("max_depth must be at least 1".into()));
    }
    if vocab.num_kernels() == 0 {
        return Err(Error::NoCandidates);
    }
    let started = Instant::now();
    let expired = AtomicBool::new(false);
    let past_deadline = || {
        let late = config.deadline.is_some_and(|d| started.elapsed() >= d);
        if late {
            expired.store(true, Ordering::Relaxed);
        }
        late
    };
    let search_fit = FitConfig {
        n_init: config.search_init,
        ..config.fit.clone()
    };
    let d = data.dims();
    let mut trace = Vec::new();
    let mut path: Vec<(String, f64)> = Vec::new();
    let mut incumbent: Option<(Vec<Token>, f64)> = None;
    let mut stream = 0u64;
    for depth in 1..=config.max_depth {
        let base = incumbent.as_ref().map(|(t, _)| t.clone()).unwrap_or_default();
        let cands: Vec<Vec<Token>> = vocab
            .kernel_tokens()
            .iter()
            .map(|t| {
                let mut c = base.clone();
                c.push(t.clone());
                c
            })
            .collect();
        let first_stream = stream;
        stream += cands.len() as u64;
        let scores: Vec<Option<f64>> = cands
            .par_iter()
            .enumerate()
            .map(|(i, toks)| {
                if past_deadline() {
                    return None;
                }
                let expr = KernelExpression::from_tokens(toks, d);
                let mut rng = derive_rng(config.seed, first_stream + i as u64);
                fit_hyperparameters(data, &expr, &search_fit, &mut rng).ok().map(|f| f.bic)
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (i, (toks, s)) in cands.iter().zip(&scores).enumerate() {
            trace.push(TraceEntry {
                depth,
                kernel: sum_name(toks),
                bic: *s,
            });
            if let Some(s) = *s {
                if best.is_none_or(|(_, b)| s < b) {
                    best = Some((i, s));
                }
            }
        }
        match (best, &incumbent) {
            (Some((i, s)), None) => incumbent = Some((cands[i].clone(), s)),
            (Some((i, s)), Some((_, cur))) if s < *cur => incumbent = Some((cands[i].clone(), s)),
            _ => break,
        }
        let (t, s) = incumbent.as_ref().expect("set above");
        path.push((sum_name(t), *s));
        if expired.load(Ordering::Relaxed) {
            break;
        }
    }
    let (tokens, _) = incumbent.ok_or_else(|| Error::FitFailed("every depth-1 candidate".into()))?;
    let expression = KernelExpression::from_tokens(&tokens, d);
    let final_fit = FitConfig {
        n_init: config.final_init,
        ..config.fit.clone()
    };
    let fit = fit_hyperparameters(data, &expression, &final_fit, &mut derive_rng(config.seed, stream))?;
    Ok(SearchResult {
        expression: fit.model.expr.clone(),
        fit,
        trace,
        path,
        timed_out: expired.load(Ordering::Relaxed),
        elapsed_s: started.elapsed().as_secs_f64(),
    })
}

/// A single ARD RBF kernel, fitted like any candidate.
pub fn rbf_ard_fit<R: Rng + ?Sized>(data: &Dataset, config: &FitConfig, rng: &mut R) -> Result<FitResult> {
    let expr = KernelExpression::from_tokens(&[Token::single(Primitive::Rbf)], data.dims());
    fit_hyperparameters(data, &expr, config, rng)
}

/// Sum of `k` distinct kernel tokens drawn uniformly, in vocabulary order.
pub fn random_vocab_select<R: Rng + ?Sized>(vocab: &Vocabulary, k: usize, dims: usize, rng: &mut R) -> Result<KernelExpression> {
    let n = vocab.num_kernels();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot pick {k} of {n} tokens")));
    }
    let mut picks = index::sample(rng, n, k).into_vec();
    picks.sort_unstable();
    let tokens: Vec<Token> = picks.iter().map(|&i| vocab.kernel_tokens()[i].clone()).collect();
    Ok(KernelExpression::from_tokens(&tokens, dims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{sample_gp, GpModel};
    use crate::kernels::{Factor, ProductKernel};
    use crate::vocab::build_vocabulary;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn periodic_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.5..2.5));
        let expr = KernelExpression::new(vec![ProductKernel::new(
            1.0,
            vec![Factor::Periodic {
                lengthscales: vec![1.0],
                periods: vec![0.8],
            }],
        )
        .unwrap()]);
        let y = sample_gp(&x, &GpModel::new(expr, 0.01), &mut rng).unwrap();
        Dataset::new(x, y).unwrap()
    }

    fn quick() -> SearchConfig {
        SearchConfig {
            max_depth: 2,
            search_init: 10,
            final_init: 20,
            ..Default::default()
        }
    }

    #[test]
    fn path_bic_never_increases() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Periodic, Primitive::Linear], Default::default()).unwrap();
        let data = periodic_data(40, 1);
        let r = greedy_search(&data, &vocab, &quick()).unwrap();
        assert!(r.path.windows(2).all(|w| w[1].1 <= w[0].1));
        assert!(!r.timed_out);
        assert_eq!(r.trace.iter().filter(|t| t.depth == 1).count(), vocab.num_kernels());
    }

    #[test]
    fn depth_one_is_exhaustive_single_token_selection() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Periodic, Primitive::Linear], Default::default()).unwrap();
        let data = periodic_data(40, 2);
        let cfg = SearchConfig { max_depth: 1, ..quick() };
        let r = greedy_search(&data, &vocab, &cfg).unwrap();
        let best = r
            .trace
            .iter()
            .filter_map(|t| t.bic.map(|b| (b, t.kernel.clone())))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        assert_eq!(r.expression.terms.len(), 1);
        assert_eq!(r.expression.terms[0].token().to_string(), best.1);
    }

    #[test]
    fn single_rbf_search_matches_rbf_ard() {
        let vocab = build_vocabulary(&[Primitive::Rbf], Default::default()).unwrap();
        let data = periodic_data(30, 3);
        let cfg = SearchConfig { max_depth: 1, ..quick() };
        let r = greedy_search(&data, &vocab, &cfg).unwrap();
        assert_eq!(r.expression.tokens(), vec![Token::single(Primitive::Rbf)]);
        let fit = FitConfig { n_init: 20, ..Default::default() };
        // the final refit draws from the stream after the single depth-1 fit
        let direct = rbf_ard_fit(&data, &fit, &mut derive_rng(cfg.seed, 1)).unwrap();
        assert_eq!(direct, r.fit);
    }

    #[test]
    fn zero_deadline_times_out() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Linear], Default::default()).unwrap();
        let data = periodic_data(20, 4);
        let cfg = SearchConfig {
            deadline: Some(Duration::ZERO),
            ..quick()
        };
        assert!(matches!(greedy_search(&data, &vocab, &cfg), Err(Error::FitFailed(_))));
    }

    #[test]
    fn random_selection() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Linear, Primitive::Periodic], Default::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = random_vocab_select(&vocab, vocab.num_kernels(), 1, &mut rng).unwrap();
        assert_eq!(all.tokens(), vocab.kernel_tokens());
        assert!(random_vocab_select(&vocab, vocab.num_kernels() + 1, 1, &mut rng).is_err());
        let single = build_vocabulary(&[Primitive::Cosine], Default::default()).unwrap();
        assert_eq!(
            random_vocab_select(&single, 1, 2, &mut rng).unwrap().tokens(),
            vec![Token::single(Primitive::Cosine)]
        );
    }

    #[test]
    fn random_selection_is_uniform() {
        let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Linear, Primitive::Periodic], Default::default()).unwrap();
        let n = vocab.num_kernels();
        let mut counts = vec![0usize; n];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        for _ in 0..draws {
            let e = random_vocab_select(&vocab, 2, 1, &mut rng).unwrap();
            for t in e.tokens() {
                counts[vocab.id(&t).unwrap()] += 1;
            }
        }
        // each token is included with probability k/n
        let p = 2.0 / n as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 5.0 * sd);
        }
    }
}

//! Measurements shared by the integration tests and the acceptance runner.
//! Each function returns the measured quantity; callers apply thresholds.
#![allow(dead_code)]

use std::f64::consts::PI;

use kitt_core::gp::{log_marginal_likelihood, predict, GpModel, PredictiveDistribution};
use kitt_core::io::Dataset;
use kitt_core::kernels::priors::{implied_lengthscale, sample_hyperparameters};
use kitt_core::kernels::{shrinkage_correction, Factor, HyperPrior, KernelExpression, LogNormal, PriorSet, Primitive, ProductKernel};
use kitt_core::net::{ArchitectureConfig, DataBatch, KittModel, Mode, ModelKind};
use kitt_core::tensor::{gradient_check, Graph, ParamStore, Tape, Var};
use kitt_core::vocab::{build_vocabulary, default_vocabulary, SelfProductRule, Vocabulary};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dataset(n: usize, d: usize, rng: &mut impl Rng) -> Dataset {
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.5..2.5));
    let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Dataset::new(x, y).unwrap()
}

/// Rows reordered by `rows`, columns by `cols` (new column j = old column cols[j]).
pub fn permute(data: &Dataset, rows: &[usize], cols: &[usize]) -> Dataset {
    let x = DMatrix::from_fn(rows.len(), cols.len(), |i, j| data.x[(rows[i], cols[j])]);
    let y = DVector::from_fn(rows.len(), |i, _| data.y[rows[i]]);
    Dataset::new(x, y).unwrap()
}

pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

pub fn tiny_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        embed_dim: 8,
        n_heads: 2,
        rff_hidden: 8,
        n_sab_seq: 1,
        n_sab_dim: 1,
        n_decoder_blocks: 1,
        dropout_rate: 0.1,
        max_caption_len: 3,
    }
}

/// Largest change of the sequence-encoder output under row permutations.
pub fn seq_enc_row_permutation_error(arch: &ArchitectureConfig, n_sets: usize, n_perms: usize, max_n: usize, max_d: usize, seed: u64) -> f64 {
    let model = KittModel::new(arch, ModelKind::Captioner, default_vocabulary(), seed).unwrap();
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_sets {
        let n = rng.random_range(1..=max_n);
        let d = rng.random_range(1..=max_d);
        let data = random_dataset(n, d, &mut rng);
        let seq = |ds: &Dataset| {
            let b = DataBatch::<f32>::from_dataset(&ds.x, ds.y_slice()).unwrap();
            model.net.seq_enc_values(&model.params, &b).unwrap()
        };
        let base = seq(&data);
        let cols: Vec<usize> = (0..d).collect();
        for _ in 0..n_perms {
            let p = shuffled(n, &mut rng);
            worst = worst.max(max_abs_diff(&base, &seq(&permute(&data, &p, &cols))));
        }
    }
    worst
}

/// (encoder equivariance error, decode distribution invariance error) under
/// joint row and column permutations.
pub fn dimension_permutation_errors(arch: &ArchitectureConfig, n_sets: usize, n_perms: usize, seed: u64) -> (f64, f64) {
    let model = KittModel::new(arch, ModelKind::Captioner, default_vocabulary(), seed).unwrap();
    let e = arch.embed_dim;
    let mut rng = rng(seed);
    let (mut enc_err, mut dec_err) = (0.0f64, 0.0f64);
    for _ in 0..n_sets {
        let n = rng.random_range(2..=48);
        let d = rng.random_range(2..=6);
        let data = random_dataset(n, d, &mut rng);
        let enc = model.encode_dataset(&data.x, data.y_slice()).unwrap();
        let prompt = [rng.random_range(0..model.vocab.num_kernels())];
        let p0 = model.decode_step(&data.x, data.y_slice(), &[]).unwrap();
        let p1 = model.decode_step(&data.x, data.y_slice(), &prompt).unwrap();
        for _ in 0..n_perms {
            let rows = shuffled(n, &mut rng);
            let cols = shuffled(d, &mut rng);
            let pd = permute(&data, &rows, &cols);
            let enc_p = model.encode_dataset(&pd.x, pd.y_slice()).unwrap();
            // output row j belongs to original dimension cols[j]
            let expected: Vec<f32> = cols.iter().flat_map(|&c| enc[c * e..(c + 1) * e].iter().copied()).collect();
            enc_err = enc_err.max(max_abs_diff(&enc_p, &expected));
            let q0 = model.decode_step(&pd.x, pd.y_slice(), &[]).unwrap();
            let q1 = model.decode_step(&pd.x, pd.y_slice(), &prompt).unwrap();
            for (a, b) in p0.iter().chain(&p1).zip(q0.iter().chain(&q1)) {
                dec_err = dec_err.max((a - b).abs());
            }
        }
    }
    (enc_err, dec_err)
}

fn uniform(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// (op name, max relative error) for every differentiable tape op.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    type Case = (&'static str, Box<Graph<'static>>, Vec<Vec<usize>>);
    let causal: Vec<bool> = (0..9).map(|i| i % 3 > i / 3).collect();
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.matmul(v[0], v[1])), vec![vec![2, 3, 4], vec![4, 5]]),
        ("bmm", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.bmm(v[0], v[1], false)), vec![vec![2, 3, 4], vec![2, 4, 5]]),
        ("bmm_transposed", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.bmm(v[0], v[1], true)), vec![vec![2, 3, 4], vec![2, 5, 4]]),
        ("permute", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.permute(v[0], &[2, 0, 1])), vec![vec![2, 3, 4]]),
        ("transpose", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.transpose(v[0], 0, 2)), vec![vec![2, 3, 4]]),
        ("reshape", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.reshape(v[0], &[4, 6])), vec![vec![2, 3, 4]]),
        ("add", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add(v[0], v[1])), vec![vec![3, 4], vec![3, 4]]),
        ("mul", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1])), vec![vec![3, 4], vec![3, 4]]),
        ("add_bias", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.add_bias(v[0], v[1])), vec![vec![2, 3, 4], vec![4]]),
        ("scale", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.scale(v[0], -0.7)), vec![vec![5]]),
        ("relu", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.relu(v[0])), vec![vec![4, 4]]),
        ("softmax", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.softmax(v[0], 1)), vec![vec![2, 3, 4]]),
        ("layernorm", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.layernorm(v[0], v[1], v[2], 2)), vec![vec![2, 3, 4], vec![4], vec![4]]),
        ("mean_pool", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mean_pool(v[0], 1)), vec![vec![2, 3, 4]]),
        ("embed", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.embed(v[0], &[2, 0, 2, 4])), vec![vec![5, 3]]),
        ("concat", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.concat(&[v[0], v[1]], 1)), vec![vec![2, 3, 4], vec![2, 1, 4]]),
        (
            "mask_fill",
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.mask_fill(v[0], &causal, -3.0)),
            vec![vec![2, 3, 3]],
        ),
        (
            "dropout",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.dropout(v[0], 0.3, true, &mut ChaCha8Rng::seed_from_u64(9))),
            vec![vec![4, 5]],
        ),
        (
            "cross_entropy",
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.cross_entropy(v[0], &[Some(1), None, Some(3)])),
            vec![vec![3, 5]],
        ),
        ("sum", Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sum(v[0])), vec![vec![3, 4]]),
    ];
    let mut rng = rng(seed);
    cases
        .into_iter()
        .map(|(name, build, shapes)| {
            let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
                .iter()
                .map(|s| (s.clone(), uniform(s.iter().product(), &mut rng)))
                .collect();
            let w = uniform(512, &mut rng);
            (name, gradient_check(build.as_ref(), &inputs, &w, 1e-6).unwrap().max_rel_error)
        })
        .collect()
}

fn caption_loss(model: &KittModel, store: &ParamStore<f64>, batch: &DataBatch<f64>, prompts: &[usize], targets: &[Option<usize>], width: usize, grads: bool) -> (f64, Vec<(usize, Vec<f64>)>) {
    let mut tape = Tape::new();
    let enc = model.net.encode(&mut tape, store, batch, &mut Mode::Eval).unwrap();
    let logits = model.net.decode(&mut tape, store, enc, prompts, width, &mut Mode::Eval).unwrap();
    let loss = tape.cross_entropy(logits, targets).unwrap();
    let value = tape.value(loss)[0];
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let mut acc = store.clone();
    acc.zero_grad();
    tape.accumulate_param_grads(&mut acc);
    let g = acc.iter().enumerate().map(|(i, p)| (i, p.grad.clone())).collect();
    (value, g)
}

/// Max relative error of the full captioner loss gradient (tiny encoder and
/// decoder, double precision) against central differences, over every
/// parameter element. Also returns the number of elements checked.
pub fn tiny_model_gradient_error(seed: u64) -> (f64, usize) {
    let arch = ArchitectureConfig {
        dropout_rate: 0.0,
        ..tiny_arch()
    };
    let vocab = build_vocabulary(&[Primitive::Rbf, Primitive::Linear], SelfProductRule::ExcludeAll).unwrap();
    let model = KittModel::new(&arch, ModelKind::Captioner, vocab.clone(), seed).unwrap();
    let mut store = model.params.cast::<f64>();
    let mut r = rng(seed);
    let (b, n, d) = (2, 6, 2);
    let x: Vec<f64> = (0..b * n * d).map(|_| r.random_range(-2.5..2.5)).collect();
    let y: Vec<f64> = (0..b * n).map(|_| r.random_range(-1.5..1.5)).collect();
    let batch = DataBatch::new(b, n, d, x, y).unwrap();
    let width = arch.max_caption_len + 1;
    let stop = vocab.stop_id();
    let labels = [vec![0, 2, stop, stop], vec![1, stop, stop, stop]];
    let mut prompts = Vec::new();
    let mut targets = Vec::new();
    for l in &labels {
        prompts.push(model.net.start_id());
        prompts.extend_from_slice(&l[..width - 1]);
        let end = l.iter().position(|&t| t == stop).unwrap();
        targets.extend(l.iter().enumerate().map(|(t, &id)| (t <= end).then_some(id)));
    }
    let (_, grads) = caption_loss(&model, &store, &batch, &prompts, &targets, width, true);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let ids: Vec<_> = store.iter().map(|p| store.id(&p.name).unwrap()).collect();
    for (k, id) in ids.iter().enumerate() {
        let len = store.get(*id).value.len();
        for i in 0..len {
            let orig = store.get(*id).value[i];
            store.get_mut(*id).value[i] = orig + h;
            let fp = caption_loss(&model, &store, &batch, &prompts, &targets, width, false).0;
            store.get_mut(*id).value[i] = orig - h;
            let fm = caption_loss(&model, &store, &batch, &prompts, &targets, width, false).0;
            store.get_mut(*id).value[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = grads[k].1[i];
            worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Every product token the kernels support: the default vocabulary plus the
/// non-reducible self-products.
pub fn full_vocabulary() -> Vocabulary {
    build_vocabulary(&Primitive::ALL, SelfProductRule::NonReducible).unwrap()
}

/// (token, max relative error) of the analytic LML gradient against central
/// differences, over `draws` prior draws per token.
pub fn lml_gradient_errors(vocab: &Vocabulary, draws: usize, seed: u64) -> Vec<(String, f64)> {
    let priors = PriorSet {
        cauchy_clamp: 5.0,
        ..Default::default()
    };
    let mut r = rng(seed);
    let d = 2;
    vocab
        .kernel_tokens()
        .iter()
        .map(|token| {
            let mut worst = 0.0f64;
            let mut done = 0;
            while done < draws {
                let data = random_dataset(10, d, &mut r);
                let expr = KernelExpression::new(vec![sample_hyperparameters(token, &priors, d, &mut r)]);
                let model = GpModel::new(expr, 0.1);
                let Ok((_, g)) = log_marginal_likelihood(&data.x, &data.y, &model) else {
                    continue;
                };
                let theta = model.to_unconstrained();
                let h = 1e-5;
                let mut ok = true;
                let mut errs = Vec::new();
                for i in 0..theta.len() {
                    let at = |delta: f64| {
                        let mut m = model.clone();
                        let mut t = theta.clone();
                        t[i] += delta;
                        m.set_unconstrained(&t).ok()?;
                        log_marginal_likelihood(&data.x, &data.y, &m).ok().map(|v| v.0)
                    };
                    // five-point stencil, truncation error O(h^4)
                    match (at(h), at(-h), at(2.0 * h), at(-2.0 * h)) {
                        (Some(f1), Some(fm1), Some(f2), Some(fm2)) => {
                            let fd = (8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * h);
                            errs.push((g[i] - fd).abs() / 1f64.max(g[i].abs()).max(fd.abs()));
                        }
                        _ => ok = false,
                    }
                }
                if ok {
                    worst = errs.into_iter().fold(worst, f64::max);
                    done += 1;
                }
            }
            (token.to_string(), worst)
        })
        .collect()
}

fn random_expression(vocab: &Vocabulary, d: usize, rng: &mut impl Rng) -> KernelExpression {
    let n_terms = rng.random_range(1..=3);
    let priors = PriorSet {
        cauchy_clamp: 3.0,
        ..Default::default()
    };
    KernelExpression::new(
        (0..n_terms)
            .map(|_| {
                let t = &vocab.kernel_tokens()[rng.random_range(0..vocab.num_kernels())];
                sample_hyperparameters(t, &priors, d, rng)
            })
            .collect(),
    )
}

/// Max relative discrepancy between the library's LML / predictive moments
/// and a dense-inverse computation, over `problems` random 5-point problems.
pub fn dense_oracle_error(problems: usize, seed: u64) -> f64 {
    let vocab = default_vocabulary();
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / 1f64.max(b.abs());
    let mut done = 0;
    while done < problems {
        let d = r.random_range(1..=3);
        let train = random_dataset(5, d, &mut r);
        let test = random_dataset(4, d, &mut r);
        let model = GpModel::new(random_expression(&vocab, d, &mut r), r.random_range(0.05..0.5));
        let Ok((lml, _)) = log_marginal_likelihood(&train.x, &train.y, &model) else {
            continue;
        };
        let pred = predict(&train.x, &train.y, &test.x, &model).unwrap();

        // the library adds its base jitter to the diagonal in both paths
        let mut k = model.expr.covariance(&train.x).unwrap();
        for i in 0..5 {
            k[(i, i)] += model.noise_variance + model.jitter;
        }
        let kinv = k.clone().try_inverse().unwrap();
        let det = k.determinant();
        let quad = (train.y.transpose() * &kinv * &train.y)[(0, 0)];
        let oracle_lml = -0.5 * quad - 0.5 * det.ln() - 2.5 * (2.0 * PI).ln();
        worst = worst.max(rel(lml, oracle_lml));

        let ks = model.expr.eval(&train.x, &test.x, kitt_core::kernels::Matching::Disjoint).unwrap();
        let kss = model.expr.diagonal(&test.x).unwrap();
        let mean = ks.transpose() * &kinv * &train.y;
        let cov = ks.transpose() * &kinv * &ks;
        for j in 0..4 {
            worst = worst.max(rel(pred.mean[j], mean[j]));
            worst = worst.max(rel(pred.variance[j], kss[j] - cov[(j, j)] + model.noise_variance));
        }
        done += 1;
    }
    worst
}

/// Max |K_RBF(ℓ) ⊙ K_RBF(ℓ) − K_RBF(ℓ/√2)| on random inputs.
pub fn rbf_square_identity_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let d = r.random_range(1..=4);
        let x = DMatrix::from_fn(15, d, |_, _| r.random_range(-2.5..2.5));
        let ls: Vec<f64> = (0..d).map(|_| r.random_range(0.2..3.0)).collect();
        let rbf = |l: Vec<f64>| KernelExpression::new(vec![ProductKernel::new(1.0, vec![Factor::Rbf { lengthscales: l }]).unwrap()]);
        let k = rbf(ls.clone()).covariance(&x).unwrap();
        let half = rbf(ls.iter().map(|l| l / 2f64.sqrt()).collect()).covariance(&x).unwrap();
        worst = worst.max((k.component_mul(&k) - half).amax());
    }
    worst
}

/// Median implied lengthscale of a two-factor product under the corrected
/// prior, relative to the base prior's median.
pub fn corrected_prior_median_ratio(draws: usize, seed: u64) -> f64 {
    let base = LogNormal::STANDARD;
    let corrected: HyperPrior = shrinkage_correction(2, base).unwrap().into();
    let mut r = rng(seed);
    let mut v: Vec<f64> = (0..draws)
        .map(|_| implied_lengthscale(&[corrected.sample(&mut r), corrected.sample(&mut r)]))
        .collect();
    v.sort_by(f64::total_cmp);
    v[draws / 2] / base.median()
}

/// Mean and variance of a 1-D Gaussian mixture by trapezoidal integration of
/// its density on a fine grid.
pub fn brute_force_mixture_moments(means: &[f64], vars: &[f64], weights: &[f64]) -> (f64, f64) {
    let sd_max = vars.iter().map(|v| v.sqrt()).fold(0.0, f64::max);
    let sd_min = vars.iter().map(|v| v.sqrt()).fold(f64::INFINITY, f64::min);
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min) - 14.0 * sd_max;
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 14.0 * sd_max;
    let steps = (((hi - lo) / (sd_min / 40.0)).ceil() as usize).max(20_000);
    let h = (hi - lo) / steps as f64;
    let density = |x: f64| -> f64 {
        means
            .iter()
            .zip(vars)
            .zip(weights)
            .map(|((m, v), w)| w * (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
            .sum()
    };
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=steps {
        let x = lo + i as f64 * h;
        let c = if i == 0 || i == steps { 0.5 } else { 1.0 };
        let p = c * density(x) * h;
        m0 += p;
        m1 += p * x;
        m2 += p * x * x;
    }
    let mean = m1 / m0;
    (mean, m2 / m0 - mean * mean)
}

/// Max discrepancy between the library mixture and the brute-force oracle
/// over random two-component problems, plus whether the single-component
/// case is bit-exact.
pub fn mixture_oracle_error(problems: usize, seed: u64) -> (f64, bool) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..problems {
        let comps: Vec<PredictiveDistribution> = (0..2)
            .map(|_| PredictiveDistribution {
                mean: vec![r.random_range(-2.0..2.0)],
                variance: vec![r.random_range(0.05..2.0)],
            })
            .collect();
        let w0 = r.random_range(0.05..0.95);
        let weights = [w0, 1.0 - w0];
        let mix = kitt_core::inference::mixture(&comps, &weights).unwrap();
        let (m, v) = brute_force_mixture_moments(&[comps[0].mean[0], comps[1].mean[0]], &[comps[0].variance[0], comps[1].variance[0]], &weights);
        worst = worst.max((mix.mean[0] - m).abs()).max((mix.variance[0] - v).abs());
        let single = kitt_core::inference::mixture(&comps[..1], &[1.0]).unwrap();
        exact &= single == comps[0];
    }
    (worst, exact)
}

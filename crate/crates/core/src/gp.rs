//! Exact Gaussian-process regression with a zero mean function.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelExpression, Matching};

/// Upper bound for jitter escalation.
pub const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub expr: KernelExpression,
    /// Homoscedastic likelihood noise σ_n².
    pub noise_variance: f64,
    pub jitter: f64,
}

impl GpModel {
    pub fn new(expr: KernelExpression, noise_variance: f64) -> Self {
        GpModel {
            expr,
            noise_variance,
            jitter: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_variance > 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "likelihood noise must be positive, got {}",
                self.noise_variance
            )));
        }
        if !(self.jitter > 0.0) {
            return Err(Error::InvalidHyperparameter("jitter must be positive".into()));
        }
        self.expr.validate()
    }

    /// Kernel hyperparameters followed by `ln σ_n²`.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut theta = self.expr.to_unconstrained();
        theta.push(self.noise_variance.ln());
        theta
    }

    pub fn set_unconstrained(&mut self, theta: &[f64]) -> Result<()> {
        let (last, rest) = theta
            .split_last()
            .ok_or_else(|| Error::DimensionMismatch("empty parameter vector".into()))?;
        self.expr.set_unconstrained(rest)?;
        self.noise_variance = last.exp();
        Ok(())
    }

    /// Number of free hyperparameters including the likelihood noise.
    pub fn num_params(&self) -> usize {
        self.expr.num_params() + 1
    }

    fn covariance(&self, x: &DMatrix<f64>, extra: f64) -> Result<DMatrix<f64>> {
        let mut k = if self.expr.is_empty() {
            DMatrix::zeros(x.nrows(), x.nrows())
        } else {
            self.expr.covariance(x)?
        };
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise_variance + extra;
        }
        Ok(k)
    }

    fn not_pd(&self, detail: impl Into<String>) -> Error {
        Error::NotPositiveDefinite {
            kernel: self.expr.to_text(),
            detail: format!(
                "{}; hyperparameters {:?}, noise {:e}",
                detail.into(),
                self.expr.export_params(),
                self.noise_variance
            ),
        }
    }

    /// Cholesky factor of `K + (σ_n² + jitter) I`, multiplying the jitter by
    /// ten on failure up to [`MAX_JITTER`].
    pub fn factorize(&self, x: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
        let base = self.covariance(x, 0.0)?;
        let mut jitter = self.jitter;
        loop {
            let mut k = base.clone();
            for i in 0..k.nrows() {
                k[(i, i)] += jitter;
            }
            if let Some(c) = Cholesky::new(k) {
                return Ok((c, jitter));
            }
            jitter *= 10.0;
            if jitter > MAX_JITTER * (1.0 + 1e-9) {
                return Err(self.not_pd(format!("jitter escalated to {MAX_JITTER:e}")));
            }
        }
    }

    /// Cholesky factor with the base jitter only.
    fn factorize_strict(&self, x: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        let k = self.covariance(x, self.jitter)?;
        if k.iter().any(|v| !v.is_finite()) {
            return Err(self.not_pd("non-finite covariance"));
        }
        Cholesky::new(k).ok_or_else(|| self.not_pd("cholesky failed"))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    /// Predictive variance of new observations, including likelihood noise.
    pub variance: Vec<f64>,
}

impl PredictiveDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean negative log predictive density per point.
    pub nlpd: f64,
    pub rmse: f64,
}

/// Draws `y ~ N(0, K + σ_n² I + jitter I)` at the rows of `x`.
pub fn sample_gp<R: Rng + ?Sized>(x: &DMatrix<f64>, model: &GpModel, rng: &mut R) -> Result<DVector<f64>> {
    model.validate()?;
    let (chol, _) = model.factorize(x)?;
    let z = DVector::from_fn(x.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z)
}

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} input rows but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    Ok(())
}

/// `log N(y; 0, K + σ_n² I)` without gradients.
pub fn log_marginal_likelihood_value(x: &DMatrix<f64>, y: &DVector<f64>, model: &GpModel) -> Result<f64> {
    check_data(x, y)?;
    model.validate()?;
    let chol = model.factorize_strict(x)?;
    let alpha = chol.solve(y);
    Ok(lml_from_parts(y, &alpha, &chol))
}

fn lml_from_parts(y: &DVector<f64>, alpha: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let n = y.len() as f64;
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * y.dot(alpha) - log_det_half - 0.5 * n * (2.0 * PI).ln()
}

/// Log marginal likelihood and its gradient with respect to
/// [`GpModel::to_unconstrained`].
///
/// Uses `∂L/∂θ = ½ tr((ααᵀ − K⁻¹) ∂K/∂θ)` with `α = K⁻¹ y`. A failed
/// factorisation is returned as [`Error::NotPositiveDefinite`] so optimisers
/// can reject the step.
pub fn log_marginal_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    model: &GpModel,
) -> Result<(f64, Vec<f64>)> {
    check_data(x, y)?;
    model.validate()?;
    let chol = model.factorize_strict(x)?;
    let alpha = chol.solve(y);
    let value = lml_from_parts(y, &alpha, &chol);
    let mut w = chol.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);
    let mut grad = if model.expr.is_empty() {
        Vec::new()
    } else {
        model.expr.contract_gradient(x, &w)?
    };
    grad.iter_mut().for_each(|g| *g *= 0.5);
    grad.push(0.5 * model.noise_variance * w.trace());
    Ok((value, grad))
}

/// Standard GP posterior at `x_test`; the variance includes σ_n².
pub fn predict(
    x_train: &DMatrix<f64>,
    y_train: &DVector<f64>,
    x_test: &DMatrix<f64>,
    model: &GpModel,
) -> Result<PredictiveDistribution> {
    check_data(x_train, y_train)?;
    model.validate()?;
    if x_test.nrows() == 0 {
        return Ok(PredictiveDistribution::default());
    }
    if x_test.ncols() != x_train.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "train has {} columns, test has {}",
            x_train.ncols(),
            x_test.ncols()
        )));
    }
    let prior_var = if model.expr.is_empty() {
        vec![0.0; x_test.nrows()]
    } else {
        model.expr.diagonal(x_test)?
    };
    if x_train.nrows() == 0 {
        return Ok(PredictiveDistribution {
            mean: vec![0.0; x_test.nrows()],
            variance: prior_var.iter().map(|v| v + model.noise_variance).collect(),
        });
    }
    let (chol, _) = model.factorize(x_train)?;
    let alpha = chol.solve(y_train);
    let k_star = if model.expr.is_empty() {
        DMatrix::zeros(x_train.nrows(), x_test.nrows())
    } else {
        model.expr.eval(x_train, x_test, Matching::Disjoint)?
    };
    let mean = k_star.tr_mul(&alpha);
    let mut v = k_star;
    chol.l_dirty()
        .solve_lower_triangular_mut(&mut v);
    let variance = prior_var
        .iter()
        .zip(v.column_iter())
        .map(|(p, col)| (p - col.norm_squared()).max(0.0) + model.noise_variance)
        .collect();
    Ok(PredictiveDistribution {
        mean: mean.iter().copied().collect(),
        variance,
    })
}

/// Mean negative log predictive density and root-mean-square error.
pub fn metrics(pred: &PredictiveDistribution, y_true: &[f64]) -> Result<Metrics> {
    if pred.mean.len() != y_true.len() || pred.variance.len() != y_true.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            pred.mean.len(),
            y_true.len()
        )));
    }
    if let Some(v) = pred.variance.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidHyperparameter(format!(
            "predictive variance must be positive, got {v}"
        )));
    }
    let n = y_true.len() as f64;
    let mut nlpd = 0.0;
    let mut sse = 0.0;
    for ((m, v), y) in pred.mean.iter().zip(&pred.variance).zip(y_true) {
        let r = y - m;
        nlpd += 0.5 * ((2.0 * PI * v).ln() + r * r / v);
        sse += r * r;
    }
    Ok(Metrics {
        nlpd: nlpd / n,
        rmse: (sse / n).sqrt(),
    })
}

/// Bayesian information criterion; lower is better.
pub fn bic(log_likelihood: f64, n_params: usize, n_points: usize) -> f64 {
    n_params as f64 * (n_points as f64).ln() - 2.0 * log_likelihood
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Factor, ProductKernel};
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rbf(variance: f64, l: f64) -> KernelExpression {
        KernelExpression::new(vec![
            ProductKernel::new(variance, vec![Factor::Rbf { lengthscales: vec![l] }]).unwrap(),
        ])
    }

    #[test]
    fn one_point_lml() {
        let mut m = GpModel::new(rbf(1.0, 1.0), 0.1);
        m.jitter = 1e-300;
        let v = log_marginal_likelihood_value(&dmatrix![0.3], &dvector![0.5], &m).unwrap();
        let expected = -0.5 * ((2.0 * PI * 1.1).ln() + 0.25 / 1.1);
        assert!((v - expected).abs() < 1e-12);
        assert!((v + 1.0803).abs() < 1e-4);
    }

    #[test]
    fn interpolates_without_noise() {
        let x = dmatrix![-1.0; 0.0; 0.7; 1.5];
        let y = dvector![0.3, -0.2, 1.0, 0.1];
        let mut m = GpModel::new(rbf(1.0, 0.8), 1e-10);
        m.jitter = 1e-10;
        let p = predict(&x, &y, &x, &m).unwrap();
        for (a, b) in p.mean.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let x = dmatrix![-1.0; 0.0; 0.7];
        let y = dvector![0.3, -0.2, 1.0];
        let m = GpModel::new(rbf(2.0, 0.5), 0.1);
        let p = predict(&x, &y, &dmatrix![100.0], &m).unwrap();
        assert!(p.mean[0].abs() < 1e-6);
        assert!((p.variance[0] - 2.1).abs() < 1e-6);
    }

    #[test]
    fn empty_test_set() {
        let m = GpModel::new(rbf(1.0, 1.0), 0.1);
        let p = predict(&dmatrix![0.0], &dvector![1.0], &DMatrix::zeros(0, 1), &m).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn metric_values() {
        let p = PredictiveDistribution {
            mean: vec![0.2, -1.0],
            variance: vec![1.0 / (2.0 * PI); 2],
        };
        let m = metrics(&p, &[0.2, -1.0]).unwrap();
        assert!(m.nlpd.abs() < 1e-14);
        assert_eq!(m.rmse, 0.0);
        let p = PredictiveDistribution {
            mean: vec![0.0],
            variance: vec![1.0],
        };
        let m = metrics(&p, &[1.0]).unwrap();
        assert!((m.nlpd - 1.418_938_533_204_672_7).abs() < 1e-12);
        let bad = PredictiveDistribution {
            mean: vec![0.0],
            variance: vec![0.0],
        };
        assert!(metrics(&bad, &[1.0]).is_err());
    }

    #[test]
    fn bic_values() {
        assert!((bic(-50.0, 2, 100) - 109.210_340_371_976_2).abs() < 1e-9);
        assert_eq!(bic(0.0, 0, 10), 0.0);
    }

    #[test]
    fn white_noise_samples_are_uncorrelated() {
        let noise = KernelExpression::new(vec![ProductKernel::new(1.0, vec![Factor::WhiteNoise]).unwrap()]);
        let model = GpModel::new(noise, 1e-6);
        let x = DMatrix::from_fn(200, 1, |i, _| i as f64 * 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 50;
        let mut acc = 0.0;
        let mut count = 0.0;
        for _ in 0..draws {
            let y = sample_gp(&x, &model, &mut rng).unwrap();
            for i in 1..y.len() {
                acc += y[i] * y[i - 1];
                count += 1.0;
            }
        }
        let corr = acc / count;
        // standard error of a product of independent unit normals is 1/sqrt(count)
        assert!(corr.abs() < 4.0 / count.sqrt(), "lag-1 correlation {corr}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = GpModel::new(rbf(1.0, 1.0), 0.1);
        assert!(log_marginal_likelihood(&dmatrix![0.0; 1.0], &dvector![1.0], &m).is_err());
        let mut bad = m.clone();
        bad.noise_variance = 0.0;
        assert!(log_marginal_likelihood(&dmatrix![0.0], &dvector![1.0], &bad).is_err());
    }
}

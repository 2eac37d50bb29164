//! Hyperparameter priors and the lengthscale shrinkage correction for product
//! kernels.
//!
//! Multiplying stationary kernels shortens the effective lengthscale: two RBF
//! factors with lengthscales `l1, l2` form an RBF with
//! `1/l² = 1/l1² + 1/l2²`. If every factor drew its lengthscale from the base
//! prior, products would be recognisable purely by their shorter lengthscales.
//! [`shrinkage_correction`] rescales the per-factor prior so that the log of
//! the implied product lengthscale has the same mean and variance as under the
//! base prior.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_distr::{Cauchy, Distribution, LogNormal as LogNormalDist, Normal};
use serde::{Deserialize, Serialize};

use super::{Factor, Primitive, ProductKernel, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormal {
    /// Mean of `ln θ`.
    pub mu: f64,
    /// Standard deviation of `ln θ`.
    pub sigma: f64,
}

impl LogNormal {
    pub const STANDARD: LogNormal = LogNormal { mu: 0.0, sigma: 1.0 };

    pub fn median(&self) -> f64 {
        self.mu.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum HyperPrior {
    LogNormal { mu: f64, sigma: f64 },
    Cauchy { loc: f64, scale: f64 },
    Gaussian { mu: f64, sigma: f64 },
}

impl HyperPrior {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            HyperPrior::LogNormal { mu, sigma } => LogNormalDist::new(mu, sigma)
                .expect("lognormal sigma must be finite and non-negative")
                .sample(rng),
            HyperPrior::Cauchy { loc, scale } => Cauchy::new(loc, scale)
                .expect("cauchy scale must be positive")
                .sample(rng),
            HyperPrior::Gaussian { mu, sigma } => Normal::new(mu, sigma)
                .expect("gaussian sigma must be finite and non-negative")
                .sample(rng),
        }
    }
}

impl From<LogNormal> for HyperPrior {
    fn from(l: LogNormal) -> Self {
        HyperPrior::LogNormal {
            mu: l.mu,
            sigma: l.sigma,
        }
    }
}

/// Priors for every hyperparameter role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub variance: HyperPrior,
    /// Base prior for positive lengthscales; product factors receive a
    /// shrinkage-corrected version of it.
    pub lengthscale: LogNormal,
    pub period: HyperPrior,
    pub linear_variance: HyperPrior,
    pub shift: HyperPrior,
    pub cosine_lengthscale: HyperPrior,
    /// Likelihood noise variance, used when initialising fits.
    pub noise: HyperPrior,
    /// Heavy-tailed (Cauchy) draws are clamped to this magnitude.
    pub cauchy_clamp: f64,
    pub shrinkage: bool,
}

impl Default for PriorSet {
    fn default() -> Self {
        let std_lognormal = HyperPrior::LogNormal { mu: 0.0, sigma: 1.0 };
        let cauchy = HyperPrior::Cauchy { loc: 0.0, scale: 5.0 };
        PriorSet {
            variance: std_lognormal,
            lengthscale: LogNormal::STANDARD,
            period: std_lognormal,
            linear_variance: std_lognormal,
            shift: cauchy,
            cosine_lengthscale: cauchy,
            noise: std_lognormal,
            cauchy_clamp: 1e3,
            shrinkage: true,
        }
    }
}

impl PriorSet {
    fn draw<R: Rng + ?Sized>(&self, prior: &HyperPrior, rng: &mut R) -> f64 {
        let v = prior.sample(rng);
        match prior {
            HyperPrior::Cauchy { .. } => v.clamp(-self.cauchy_clamp, self.cauchy_clamp),
            _ => v,
        }
    }

    fn draw_nonzero<R: Rng + ?Sized>(&self, prior: &HyperPrior, rng: &mut R) -> f64 {
        loop {
            let v = self.draw(prior, rng);
            if v != 0.0 {
                return v;
            }
        }
    }

    /// Lengthscale prior for the factors of `token`, corrected for shrinkage
    /// when two or more factors carry lognormal lengthscales.
    pub fn lengthscale_prior_for(&self, token: &Token) -> LogNormal {
        let n = token
            .factors()
            .iter()
            .filter(|p| p.has_positive_lengthscale())
            .count();
        if self.shrinkage && (2..=3).contains(&n) {
            shrinkage_correction(n, self.lengthscale).unwrap_or(self.lengthscale)
        } else {
            self.lengthscale
        }
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.draw(&self.noise, rng)
    }
}

/// Draws every hyperparameter of `token` (in `dims` input dimensions) from its
/// prior.
pub fn sample_hyperparameters<R: Rng + ?Sized>(
    token: &Token,
    priors: &PriorSet,
    dims: usize,
    rng: &mut R,
) -> ProductKernel {
    let ls_prior: HyperPrior = priors.lengthscale_prior_for(token).into();
    let variance = priors.draw(&priors.variance, rng);
    let many = |prior: &HyperPrior, rng: &mut R| -> Vec<f64> {
        (0..dims).map(|_| priors.draw(prior, rng)).collect()
    };
    let factors = token
        .factors()
        .iter()
        .map(|&p| match p {
            Primitive::Rbf => Factor::Rbf {
                lengthscales: many(&ls_prior, rng),
            },
            Primitive::Matern12 => Factor::Matern12 {
                lengthscales: many(&ls_prior, rng),
            },
            Primitive::Matern32 => Factor::Matern32 {
                lengthscales: many(&ls_prior, rng),
            },
            Primitive::Matern52 => Factor::Matern52 {
                lengthscales: many(&ls_prior, rng),
            },
            Primitive::Periodic => Factor::Periodic {
                lengthscales: many(&ls_prior, rng),
                periods: many(&priors.period, rng),
            },
            Primitive::Cosine => Factor::Cosine {
                lengthscales: (0..dims)
                    .map(|_| priors.draw_nonzero(&priors.cosine_lengthscale, rng))
                    .collect(),
            },
            Primitive::Linear => Factor::Linear {
                variances: many(&priors.linear_variance, rng),
                shifts: many(&priors.shift, rng),
            },
            Primitive::WhiteNoise => Factor::WhiteNoise,
        })
        .collect();
    ProductKernel::new(variance, factors).expect("prior draws satisfy hyperparameter constraints")
}

/// Lengthscale of the RBF kernel equal to the product of RBF kernels with the
/// given lengthscales: `1/l² = Σ 1/l_i²`.
pub fn implied_lengthscale(lengthscales: &[f64]) -> f64 {
    lengthscales.iter().map(|l| 1.0 / (l * l)).sum::<f64>().powf(-0.5)
}

/// Gauss–Hermite nodes and weights for `∫ e^{-t²} f(t) dt`.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = z;
        nodes[n - 1 - i] = -z;
        weights[i] = 2.0 / (pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    (nodes, weights)
}

/// Mean and variance of `ln l_prod` when each of `n` factors draws its
/// lengthscale independently from `LN(0, s²)`, by tensor-product
/// Gauss–Hermite quadrature.
fn implied_log_moments(n: usize, s: f64) -> (f64, f64) {
    const NODES: usize = 32;
    let (t, w) = gauss_hermite(NODES);
    let scale = std::f64::consts::SQRT_2 * s;
    let norm = std::f64::consts::PI.powf(-(n as f64) / 2.0);
    let (mut m1, mut m2) = (0.0, 0.0);
    let mut idx = vec![0usize; n];
    let mut logs = vec![0.0; n];
    loop {
        let mut weight = norm;
        for (k, &i) in idx.iter().enumerate() {
            logs[k] = scale * t[i];
            weight *= w[i];
        }
        // ln(Σ l_i^-2)^(-1/2), evaluated stably
        let max = logs.iter().map(|a| -2.0 * a).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logs.iter().map(|a| (-2.0 * a - max).exp()).sum::<f64>().ln();
        let v = -0.5 * lse;
        m1 += weight * v;
        m2 += weight * v * v;
        // odometer over the grid
        let mut k = 0;
        loop {
            if k == n {
                return (m1, (m2 - m1 * m1).max(0.0));
            }
            idx[k] += 1;
            if idx[k] < NODES {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

fn correction_cache() -> &'static Mutex<HashMap<(usize, u64, u64), LogNormal>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64, u64), LogNormal>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Per-factor lengthscale prior for an `n_factors`-way product such that the
/// implied product lengthscale approximately follows `base`.
pub fn shrinkage_correction(n_factors: usize, base: LogNormal) -> Result<LogNormal> {
    if !(2..=3).contains(&n_factors) {
        return Err(Error::UnsupportedProductOrder(n_factors));
    }
    let key = (n_factors, base.mu.to_bits(), base.sigma.to_bits());
    if let Some(hit) = correction_cache().lock().ok().and_then(|c| c.get(&key).copied()) {
        return Ok(hit);
    }
    let target_var = base.sigma * base.sigma;
    let (mut lo, mut hi) = (0.0, 1.0);
    while implied_log_moments(n_factors, hi).1 < target_var {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::InvalidHyperparameter(format!(
                "cannot match lengthscale prior spread {}",
                base.sigma
            )));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if implied_log_moments(n_factors, mid).1 < target_var {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    // the implied log-mean is `mu + offset(s)`
    let offset = implied_log_moments(n_factors, s).0;
    let corrected = LogNormal {
        mu: base.mu - offset,
        sigma: s,
    };
    if let Ok(mut c) = correction_cache().lock() {
        c.insert(key, corrected);
    }
    Ok(corrected)
}

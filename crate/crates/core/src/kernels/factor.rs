use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Primitive;
use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

/// Shape parameters of one primitive factor inside a product term. The term
/// variance lives on [`super::ProductKernel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Factor {
    Rbf { lengthscales: Vec<f64> },
    Matern12 { lengthscales: Vec<f64> },
    Matern32 { lengthscales: Vec<f64> },
    Matern52 { lengthscales: Vec<f64> },
    /// Product over dimensions of the MacKay periodic kernel.
    Periodic { lengthscales: Vec<f64>, periods: Vec<f64> },
    /// Plane wave `cos(Σ_d (x_d - x'_d) / ℓ_d)`; the sign pattern of the
    /// lengthscales sets the propagation direction.
    Cosine { lengthscales: Vec<f64> },
    /// `Σ_d σ_d² (x_d - c_d)(x'_d - c_d)`.
    Linear { variances: Vec<f64>, shifts: Vec<f64> },
    /// One on pairs that are the same observation, zero elsewhere.
    WhiteNoise,
}

impl Factor {
    pub fn kind(&self) -> Primitive {
        match self {
            Factor::Rbf { .. } => Primitive::Rbf,
            Factor::Matern12 { .. } => Primitive::Matern12,
            Factor::Matern32 { .. } => Primitive::Matern32,
            Factor::Matern52 { .. } => Primitive::Matern52,
            Factor::Periodic { .. } => Primitive::Periodic,
            Factor::Cosine { .. } => Primitive::Cosine,
            Factor::Linear { .. } => Primitive::Linear,
            Factor::WhiteNoise => Primitive::WhiteNoise,
        }
    }

    pub fn default_for(kind: Primitive, dims: usize) -> Self {
        let ones = vec![1.0; dims];
        match kind {
            Primitive::Rbf => Factor::Rbf { lengthscales: ones },
            Primitive::Matern12 => Factor::Matern12 { lengthscales: ones },
            Primitive::Matern32 => Factor::Matern32 { lengthscales: ones },
            Primitive::Matern52 => Factor::Matern52 { lengthscales: ones },
            Primitive::Periodic => Factor::Periodic {
                lengthscales: ones.clone(),
                periods: ones,
            },
            Primitive::Cosine => Factor::Cosine { lengthscales: ones },
            Primitive::Linear => Factor::Linear {
                variances: ones,
                shifts: vec![0.0; dims],
            },
            Primitive::WhiteNoise => Factor::WhiteNoise,
        }
    }

    pub fn dims(&self) -> Option<usize> {
        match self {
            Factor::Rbf { lengthscales }
            | Factor::Matern12 { lengthscales }
            | Factor::Matern32 { lengthscales }
            | Factor::Matern52 { lengthscales }
            | Factor::Periodic { lengthscales, .. }
            | Factor::Cosine { lengthscales } => Some(lengthscales.len()),
            Factor::Linear { variances, .. } => Some(variances.len()),
            Factor::WhiteNoise => None,
        }
    }

    pub fn lengthscales_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            Factor::Rbf { lengthscales }
            | Factor::Matern12 { lengthscales }
            | Factor::Matern32 { lengthscales }
            | Factor::Matern52 { lengthscales }
            | Factor::Periodic { lengthscales, .. }
            | Factor::Cosine { lengthscales } => Some(lengthscales),
            _ => None,
        }
    }

    pub fn lengthscales(&self) -> Option<&[f64]> {
        match self {
            Factor::Rbf { lengthscales }
            | Factor::Matern12 { lengthscales }
            | Factor::Matern32 { lengthscales }
            | Factor::Matern52 { lengthscales }
            | Factor::Periodic { lengthscales, .. }
            | Factor::Cosine { lengthscales } => Some(lengthscales),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: &[f64]| {
            if v.iter().all(|&x| x > 0.0 && x.is_finite()) {
                Ok(())
            } else {
                Err(Error::InvalidHyperparameter(format!(
                    "{} {what} must be positive, got {v:?}",
                    self.kind()
                )))
            }
        };
        match self {
            Factor::Rbf { lengthscales }
            | Factor::Matern12 { lengthscales }
            | Factor::Matern32 { lengthscales }
            | Factor::Matern52 { lengthscales } => positive("lengthscales", lengthscales),
            Factor::Periodic { lengthscales, periods } => {
                positive("lengthscales", lengthscales)?;
                positive("periods", periods)?;
                same_len(lengthscales, periods)
            }
            Factor::Cosine { lengthscales } => {
                if lengthscales.iter().all(|&l| l != 0.0 && l.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::InvalidHyperparameter(format!(
                        "COS lengthscales must be finite and nonzero, got {lengthscales:?}"
                    )))
                }
            }
            Factor::Linear { variances, shifts } => {
                positive("variances", variances)?;
                if !shifts.iter().all(|c| c.is_finite()) {
                    return Err(Error::InvalidHyperparameter(format!(
                        "LIN shifts must be finite, got {shifts:?}"
                    )));
                }
                same_len(variances, shifts)
            }
            Factor::WhiteNoise => Ok(()),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Factor::Periodic { lengthscales, .. } => 2 * lengthscales.len(),
            Factor::Linear { variances, .. } => 2 * variances.len(),
            Factor::WhiteNoise => 0,
            _ => self.dims().unwrap_or(0),
        }
    }

    pub(crate) fn push_unconstrained(&self, out: &mut Vec<f64>) {
        match self {
            Factor::Cosine { lengthscales } => out.extend(lengthscales),
            Factor::Periodic { lengthscales, periods } => {
                out.extend(lengthscales.iter().map(|l| l.ln()));
                out.extend(periods.iter().map(|p| p.ln()));
            }
            Factor::Linear { variances, shifts } => {
                out.extend(variances.iter().map(|v| v.ln()));
                out.extend(shifts);
            }
            Factor::WhiteNoise => {}
            other => out.extend(other.lengthscales().unwrap_or(&[]).iter().map(|l| l.ln())),
        }
    }

    pub(crate) fn read_unconstrained(&mut self, it: &mut impl Iterator<Item = f64>) {
        let mut fill = |v: &mut Vec<f64>, exp: bool| {
            for x in v.iter_mut() {
                let t = it.next().unwrap_or_default();
                *x = if exp { t.exp() } else { t };
            }
        };
        match self {
            Factor::Cosine { lengthscales } => fill(lengthscales, false),
            Factor::Periodic { lengthscales, periods } => {
                fill(lengthscales, true);
                fill(periods, true);
            }
            Factor::Linear { variances, shifts } => {
                fill(variances, true);
                fill(shifts, false);
            }
            Factor::WhiteNoise => {}
            Factor::Rbf { lengthscales }
            | Factor::Matern12 { lengthscales }
            | Factor::Matern32 { lengthscales }
            | Factor::Matern52 { lengthscales } => fill(lengthscales, true),
        }
    }

    pub(crate) fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        let mut push = |what: &str, n: usize| {
            out.extend((0..n).map(|d| format!("{prefix}.{what}[{d}]")));
        };
        let d = self.dims().unwrap_or(0);
        match self {
            Factor::Periodic { .. } => {
                push("lengthscale", d);
                push("period", d);
            }
            Factor::Linear { .. } => {
                push("variance", d);
                push("shift", d);
            }
            Factor::WhiteNoise => {}
            _ => push("lengthscale", d),
        }
    }

    /// Writes named hyperparameters (constrained values) into `out`.
    pub(crate) fn export(&self, prefix: &str, out: &mut Vec<(String, f64)>) {
        let mut names = Vec::new();
        self.push_names(prefix, &mut names);
        let values: Vec<f64> = match self {
            Factor::Periodic { lengthscales, periods } => {
                lengthscales.iter().chain(periods).copied().collect()
            }
            Factor::Linear { variances, shifts } => variances.iter().chain(shifts).copied().collect(),
            Factor::WhiteNoise => Vec::new(),
            other => other.lengthscales().unwrap_or(&[]).to_vec(),
        };
        out.extend(names.into_iter().zip(values));
    }

    /// Ordering used to sort factors inside a product: by kind, then by
    /// parameter values so that self-products sort deterministically.
    pub(crate) fn canonical_cmp(a: &Factor, b: &Factor) -> Ordering {
        a.kind().cmp(&b.kind()).then_with(|| {
            let (mut pa, mut pb) = (Vec::new(), Vec::new());
            a.push_unconstrained(&mut pa);
            b.push_unconstrained(&mut pb);
            pa.iter()
                .zip(&pb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    }

    #[inline]
    pub(crate) fn value(&self, a: &[f64], b: &[f64], same: bool) -> f64 {
        match self {
            Factor::Rbf { lengthscales } => (-0.5 * scaled_sq_dist(a, b, lengthscales)).exp(),
            Factor::Matern12 { lengthscales } => (-scaled_sq_dist(a, b, lengthscales).sqrt()).exp(),
            Factor::Matern32 { lengthscales } => {
                let r = SQRT3 * scaled_sq_dist(a, b, lengthscales).sqrt();
                (1.0 + r) * (-r).exp()
            }
            Factor::Matern52 { lengthscales } => {
                let r2 = scaled_sq_dist(a, b, lengthscales);
                let r = SQRT5 * r2.sqrt();
                (1.0 + r + 5.0 / 3.0 * r2) * (-r).exp()
            }
            Factor::Periodic { lengthscales, periods } => {
                let mut s = 0.0;
                for d in 0..a.len() {
                    let u = (PI * (a[d] - b[d]) / periods[d]).sin();
                    s += u * u / (lengthscales[d] * lengthscales[d]);
                }
                (-2.0 * s).exp()
            }
            Factor::Cosine { lengthscales } => {
                let phase: f64 = (0..a.len()).map(|d| (a[d] - b[d]) / lengthscales[d]).sum();
                phase.cos()
            }
            Factor::Linear { variances, shifts } => (0..a.len())
                .map(|d| variances[d] * (a[d] - shifts[d]) * (b[d] - shifts[d]))
                .sum(),
            Factor::WhiteNoise => {
                if same {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Returns the factor value and writes its derivatives with respect to the
    /// unconstrained parameters into `grad[..num_params()]`.
    pub(crate) fn value_and_grad(&self, a: &[f64], b: &[f64], same: bool, grad: &mut [f64]) -> f64 {
        let dims = a.len();
        match self {
            Factor::Rbf { lengthscales } => {
                let mut s = 0.0;
                for d in 0..dims {
                    let q = sq((a[d] - b[d]) / lengthscales[d]);
                    grad[d] = q;
                    s += q;
                }
                let k = (-0.5 * s).exp();
                grad[..dims].iter_mut().for_each(|g| *g *= k);
                k
            }
            Factor::Matern12 { lengthscales } => {
                let s = fill_scaled_sq(a, b, lengthscales, grad);
                let r = s.sqrt();
                let k = (-r).exp();
                let c = if r > 0.0 { k / r } else { 0.0 };
                grad[..dims].iter_mut().for_each(|g| *g *= c);
                k
            }
            Factor::Matern32 { lengthscales } => {
                let s = fill_scaled_sq(a, b, lengthscales, grad);
                let r = SQRT3 * s.sqrt();
                let e = (-r).exp();
                grad[..dims].iter_mut().for_each(|g| *g *= 3.0 * e);
                (1.0 + r) * e
            }
            Factor::Matern52 { lengthscales } => {
                let s = fill_scaled_sq(a, b, lengthscales, grad);
                let r = SQRT5 * s.sqrt();
                let e = (-r).exp();
                let c = 5.0 / 3.0 * (1.0 + r) * e;
                grad[..dims].iter_mut().for_each(|g| *g *= c);
                (1.0 + r + 5.0 / 3.0 * s) * e
            }
            Factor::Periodic { lengthscales, periods } => {
                let mut s = 0.0;
                for d in 0..dims {
                    let delta = a[d] - b[d];
                    let u = PI * delta / periods[d];
                    let l2 = lengthscales[d] * lengthscales[d];
                    let sin = u.sin();
                    s += sin * sin / l2;
                    grad[d] = 4.0 * sin * sin / l2;
                    grad[dims + d] = 2.0 * PI * delta * (2.0 * u).sin() / (periods[d] * l2);
                }
                let k = (-2.0 * s).exp();
                grad[..2 * dims].iter_mut().for_each(|g| *g *= k);
                k
            }
            Factor::Cosine { lengthscales } => {
                let phase: f64 = (0..dims).map(|d| (a[d] - b[d]) / lengthscales[d]).sum();
                let sin = phase.sin();
                for d in 0..dims {
                    grad[d] = sin * (a[d] - b[d]) / sq(lengthscales[d]);
                }
                phase.cos()
            }
            Factor::Linear { variances, shifts } => {
                let mut k = 0.0;
                for d in 0..dims {
                    let (u, v) = (a[d] - shifts[d], b[d] - shifts[d]);
                    let t = variances[d] * u * v;
                    k += t;
                    grad[d] = t;
                    grad[dims + d] = -variances[d] * (u + v);
                }
                k
            }
            Factor::WhiteNoise => self.value(a, b, same),
        }
    }
}

#[inline]
fn sq(x: f64) -> f64 {
    x * x
}

#[inline]
fn scaled_sq_dist(a: &[f64], b: &[f64], l: &[f64]) -> f64 {
    (0..a.len()).map(|d| sq((a[d] - b[d]) / l[d])).sum()
}

#[inline]
fn fill_scaled_sq(a: &[f64], b: &[f64], l: &[f64], out: &mut [f64]) -> f64 {
    let mut s = 0.0;
    for d in 0..a.len() {
        let q = sq((a[d] - b[d]) / l[d]);
        out[d] = q;
        s += q;
    }
    s
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "per-dimension parameter lists differ in length ({} vs {})",
            a.len(),
            b.len()
        )))
    }
}

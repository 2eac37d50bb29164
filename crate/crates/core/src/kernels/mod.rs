//! Kernel algebra: primitive covariance functions, product tokens, and sums of
//! products.
//!
//! A [`KernelExpression`] is a sum of [`ProductKernel`] terms. Each term owns a
//! single variance and the shape parameters of its one or two factors. The
//! product structure is encoded by a canonical [`Token`], so `RBF*LIN` and
//! `LIN*RBF` are the same object.

mod factor;
pub mod priors;
mod text;

use std::cmp::Ordering;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use factor::Factor;
pub use priors::{shrinkage_correction, HyperPrior, LogNormal, PriorSet};
pub use text::ParamMap;

/// The eight base covariance functions.
///
/// Variants are declared in alphabetical order of their short names so that
/// the derived `Ord` matches the canonical text ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Primitive {
    Cosine,
    Linear,
    Matern12,
    Matern32,
    Matern52,
    WhiteNoise,
    Periodic,
    Rbf,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::Cosine,
        Primitive::Linear,
        Primitive::Matern12,
        Primitive::Matern32,
        Primitive::Matern52,
        Primitive::WhiteNoise,
        Primitive::Periodic,
        Primitive::Rbf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Cosine => "COS",
            Primitive::Linear => "LIN",
            Primitive::Matern12 => "M12",
            Primitive::Matern32 => "M32",
            Primitive::Matern52 => "M52",
            Primitive::WhiteNoise => "NOISE",
            Primitive::Periodic => "PER",
            Primitive::Rbf => "RBF",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::UnknownToken(name.to_string()))
    }

    /// Every primitive except the linear kernel depends only on `x - x'`.
    pub fn is_stationary(self) -> bool {
        self != Primitive::Linear
    }

    /// Kernels whose lengthscale prior is lognormal and therefore subject to
    /// product shrinkage.
    pub(crate) fn has_positive_lengthscale(self) -> bool {
        matches!(
            self,
            Primitive::Rbf
                | Primitive::Matern12
                | Primitive::Matern32
                | Primitive::Matern52
                | Primitive::Periodic
        )
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A vocabulary word: one primitive, or a canonically sorted product of two.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Token(Vec<Primitive>);

impl Token {
    pub fn single(p: Primitive) -> Self {
        Token(vec![p])
    }

    /// Builds a product token from any number of factors, sorting them.
    /// Redundancy is not checked here; see [`reduce_product`].
    pub fn product(factors: impl IntoIterator<Item = Primitive>) -> Self {
        let mut f: Vec<Primitive> = factors.into_iter().collect();
        f.sort();
        Token(f)
    }

    pub fn factors(&self) -> &[Primitive] {
        &self.0
    }

    pub fn parse(s: &str) -> Result<Self> {
        let factors = s
            .split('*')
            .map(|p| Primitive::from_name(p.trim()))
            .collect::<Result<Vec<_>>>()?;
        if factors.is_empty() {
            return Err(Error::UnknownToken(s.to_string()));
        }
        Ok(Token::product(factors))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("*")?;
            }
            f.write_str(p.name())?;
        }
        Ok(())
    }
}

/// Outcome of multiplying two primitives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reduction {
    Product(Token),
    /// The product collapses onto a kernel family already in the vocabulary.
    Redundant,
}

/// Canonicalises the product `a * b`.
///
/// Noise times any stationary kernel is again white noise, and the RBF and
/// white-noise families are closed under self-multiplication; those products
/// are reported as redundant. Every other pair is returned sorted.
pub fn reduce_product(a: Primitive, b: Primitive) -> Reduction {
    use Primitive::*;
    let noise_stationary = |n: Primitive, s: Primitive| n == WhiteNoise && s.is_stationary();
    if noise_stationary(a, b) || noise_stationary(b, a) {
        return Reduction::Redundant;
    }
    if a == b && a == Rbf {
        return Reduction::Redundant;
    }
    Reduction::Product(Token::product([a, b]))
}

/// Which row pairs of `(X, X2)` refer to the same observation. White noise only
/// contributes on those pairs.
#[derive(Debug, Clone, Copy)]
pub enum Matching<'a> {
    /// No shared observations (cross-covariance between disjoint sets).
    Disjoint,
    /// Row `i` of `X` and row `i` of `X2` are the same observation.
    Diagonal,
    /// Explicit list of `(row in X, row in X2)` pairs.
    Pairs(&'a [(usize, usize)]),
}

/// One additive term: a variance times the product of its factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductKernel {
    pub variance: f64,
    factors: Vec<Factor>,
}

impl ProductKernel {
    pub fn new(variance: f64, mut factors: Vec<Factor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidHyperparameter(
                "product kernel needs at least one factor".into(),
            ));
        }
        factors.sort_by(Factor::canonical_cmp);
        let term = ProductKernel { variance, factors };
        term.validate()?;
        Ok(term)
    }

    /// Unit-scale hyperparameters for `token` in `dims` input dimensions.
    pub fn with_defaults(token: &Token, dims: usize) -> Self {
        let factors = token
            .factors()
            .iter()
            .map(|&p| Factor::default_for(p, dims))
            .collect();
        ProductKernel {
            variance: 1.0,
            factors,
        }
    }

    pub fn token(&self) -> Token {
        Token::product(self.factors.iter().map(Factor::kind))
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [Factor] {
        &mut self.factors
    }

    pub fn dims(&self) -> Option<usize> {
        self.factors.iter().find_map(Factor::dims)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!(
                "variance of `{}` must be positive, got {}",
                self.token(),
                self.variance
            )));
        }
        let mut dims = None;
        for f in &self.factors {
            f.validate()?;
            if let Some(d) = f.dims() {
                if *dims.get_or_insert(d) != d {
                    return Err(Error::DimensionMismatch(format!(
                        "factors of `{}` disagree on input dimension",
                        self.token()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        1 + self.factors.iter().map(Factor::num_params).sum::<usize>()
    }

    fn value(&self, a: &[f64], b: &[f64], same: bool) -> f64 {
        let mut v = self.variance;
        for f in &self.factors {
            v *= f.value(a, b, same);
            if v == 0.0 {
                break;
            }
        }
        v
    }

    /// Adds `weight * dk/dθ` for every unconstrained parameter of this term
    /// into `out`, returning k itself.
    fn accumulate_grad(
        &self,
        a: &[f64],
        b: &[f64],
        same: bool,
        weight: f64,
        scratch: &mut [Vec<f64>],
        values: &mut [f64],
        out: &mut [f64],
    ) -> f64 {
        for (i, f) in self.factors.iter().enumerate() {
            values[i] = f.value_and_grad(a, b, same, &mut scratch[i]);
        }
        let prod: f64 = values[..self.factors.len()].iter().product();
        let k = self.variance * prod;
        out[0] += weight * k;
        let mut offset = 1;
        for (i, f) in self.factors.iter().enumerate() {
            let n = f.num_params();
            if n > 0 {
                let others: f64 = values[..self.factors.len()]
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, v)| v)
                    .product();
                let c = weight * self.variance * others;
                if c != 0.0 {
                    for (o, g) in out[offset..offset + n].iter_mut().zip(&scratch[i]) {
                        *o += c * g;
                    }
                }
            }
            offset += n;
        }
        k
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        other
            .variance
            .total_cmp(&self.variance)
            .then_with(|| self.token().to_string().cmp(&other.token().to_string()))
    }
}

/// A sum of product terms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelExpression {
    pub terms: Vec<ProductKernel>,
}

impl KernelExpression {
    pub fn new(terms: Vec<ProductKernel>) -> Self {
        KernelExpression { terms }
    }

    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a Token>, dims: usize) -> Self {
        KernelExpression {
            terms: tokens
                .into_iter()
                .map(|t| ProductKernel::with_defaults(t, dims))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.terms.iter().map(ProductKernel::token).collect()
    }

    /// Sorted token list; identifies the structure regardless of term order.
    pub fn structure_key(&self) -> Vec<Token> {
        let mut t = self.tokens();
        t.sort();
        t
    }

    pub fn contains(&self, token: &Token) -> bool {
        self.terms.iter().any(|t| &t.token() == token)
    }

    /// Sorts terms by variance, descending, ties broken by token name.
    pub fn canonicalize(&mut self) {
        self.terms.sort_by(ProductKernel::canonical_cmp);
    }

    pub fn canonical(mut self) -> Self {
        self.canonicalize();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.terms.iter().try_for_each(ProductKernel::validate)
    }

    pub fn num_params(&self) -> usize {
        self.terms.iter().map(ProductKernel::num_params).sum()
    }

    /// Unconstrained parameter vector: log for positive quantities, identity
    /// for cosine lengthscales and linear shifts.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in &self.terms {
            out.push(t.variance.ln());
            for f in &t.factors {
                f.push_unconstrained(&mut out);
            }
        }
        out
    }

    pub fn set_unconstrained(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                theta.len()
            )));
        }
        let mut it = theta.iter().copied();
        for t in &mut self.terms {
            t.variance = it.next().unwrap_or_default().exp();
            for f in &mut t.factors {
                f.read_unconstrained(&mut it);
            }
        }
        Ok(())
    }

    /// Human-readable names, aligned with [`Self::to_unconstrained`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_params());
        for (i, t) in self.terms.iter().enumerate() {
            names.push(format!("t{i}.variance"));
            for (j, f) in t.factors.iter().enumerate() {
                f.push_names(&format!("t{i}.f{j}"), &mut names);
            }
        }
        names
    }

    /// Flags marking which unconstrained parameters are linear shifts.
    pub fn shift_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_params());
        for t in &self.terms {
            mask.push(false);
            for f in &t.factors {
                let n = f.num_params();
                let shift = matches!(f, Factor::Linear { .. });
                // shifts follow the per-dimension variances
                mask.extend((0..n).map(|k| shift && k >= n / 2));
            }
        }
        mask
    }

    fn check_dims(&self, d: usize) -> Result<()> {
        self.validate()?;
        for t in &self.terms {
            if let Some(td) = t.dims() {
                if td != d {
                    return Err(Error::DimensionMismatch(format!(
                        "`{}` expects {td} input dimensions, data has {d}",
                        t.token()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Covariance between the rows of `x1` and `x2`.
    pub fn eval(&self, x1: &DMatrix<f64>, x2: &DMatrix<f64>, matching: Matching) -> Result<DMatrix<f64>> {
        let d = x1.ncols();
        if x2.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "X has {} columns, X2 has {}",
                d,
                x2.ncols()
            )));
        }
        self.check_dims(d)?;
        if let Matching::Diagonal = matching {
            if x1.nrows() != x2.nrows() {
                return Err(Error::DimensionMismatch(
                    "diagonal matching needs equally many rows".into(),
                ));
            }
        }
        let a = RowMajor::new(x1);
        let b = RowMajor::new(x2);
        let (n, m) = (x1.nrows(), x2.nrows());
        let same = SameObservation::new(matching, n, m);
        let symmetric = matches!(matching, Matching::Diagonal) && x1 == x2;
        let mut k = DMatrix::zeros(n, m);
        for i in 0..n {
            let start = if symmetric { i } else { 0 };
            for j in start..m {
                let s = same.get(i, j);
                let v: f64 = self
                    .terms
                    .iter()
                    .map(|t| t.value(a.row(i), b.row(j), s))
                    .sum();
                k[(i, j)] = v;
                if symmetric {
                    k[(j, i)] = v;
                }
            }
        }
        Ok(k)
    }

    /// Covariance of a set with itself, white noise on the diagonal.
    pub fn covariance(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.eval(x, x, Matching::Diagonal)
    }

    /// Prior variance at each row of `x` (the diagonal of [`Self::covariance`]).
    pub fn diagonal(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_dims(x.ncols())?;
        let a = RowMajor::new(x);
        Ok((0..x.nrows())
            .map(|i| self.terms.iter().map(|t| t.value(a.row(i), a.row(i), true)).sum())
            .collect())
    }

    /// Computes `Σ_ij w_ij · dK_ij/dθ_p` for every unconstrained parameter,
    /// where `K` is the self-covariance of `x` and `w` is symmetric.
    pub fn contract_gradient(&self, x: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<Vec<f64>> {
        let n = x.nrows();
        if w.nrows() != n || w.ncols() != n {
            return Err(Error::DimensionMismatch("weight matrix must be N×N".into()));
        }
        self.check_dims(x.ncols())?;
        let a = RowMajor::new(x);
        let mut out = vec![0.0; self.num_params()];
        let max_factor_params = self
            .terms
            .iter()
            .flat_map(|t| t.factors.iter().map(Factor::num_params))
            .max()
            .unwrap_or(0);
        let mut scratch = vec![vec![0.0; max_factor_params]; 3];
        let mut values = [0.0; 3];
        for i in 0..n {
            for j in i..n {
                let weight = if i == j { w[(i, j)] } else { 2.0 * w[(i, j)] };
                if weight == 0.0 {
                    continue;
                }
                let mut offset = 0;
                for t in &self.terms {
                    let np = t.num_params();
                    t.accumulate_grad(
                        a.row(i),
                        a.row(j),
                        i == j,
                        weight,
                        &mut scratch,
                        &mut values,
                        &mut out[offset..offset + np],
                    );
                    offset += np;
                }
            }
        }
        Ok(out)
    }
}

impl fmt::Display for KernelExpression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("(empty)");
        }
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{}", t.token())?;
        }
        Ok(())
    }
}

/// Row-major copy of a column-major matrix, so that rows are contiguous.
pub(crate) struct RowMajor {
    data: Vec<f64>,
    cols: usize,
}

impl RowMajor {
    pub(crate) fn new(m: &DMatrix<f64>) -> Self {
        let cols = m.ncols();
        let mut data = Vec::with_capacity(m.len());
        for r in m.row_iter() {
            data.extend(r.iter());
        }
        RowMajor { data, cols }
    }

    #[inline]
    pub(crate) fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

struct SameObservation<'a> {
    matching: Matching<'a>,
    pairs: Vec<(usize, usize)>,
}

impl<'a> SameObservation<'a> {
    fn new(matching: Matching<'a>, _n: usize, _m: usize) -> Self {
        let mut pairs = match matching {
            Matching::Pairs(p) => p.to_vec(),
            _ => Vec::new(),
        };
        pairs.sort_unstable();
        SameObservation { matching, pairs }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> bool {
        match self.matching {
            Matching::Disjoint => false,
            Matching::Diagonal => i == j,
            Matching::Pairs(_) => self.pairs.binary_search(&(i, j)).is_ok(),
        }
    }
}

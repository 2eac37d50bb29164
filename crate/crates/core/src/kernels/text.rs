//! Canonical text form of kernel expressions, e.g. `LIN*NOISE + RBF + PER`,
//! with hyperparameters carried in a separate key-value map.

use std::collections::BTreeMap;

use super::{Factor, KernelExpression, ProductKernel, Token};
use crate::error::{Error, Result};

pub type ParamMap = BTreeMap<String, f64>;

impl KernelExpression {
    /// Text form with terms in canonical order (variance descending).
    pub fn to_text(&self) -> String {
        self.clone().canonical().to_string()
    }

    /// Named hyperparameters of the canonical ordering, matching
    /// [`Self::to_text`].
    pub fn export_params(&self) -> ParamMap {
        let canonical = self.clone().canonical();
        let mut pairs = Vec::new();
        for (i, t) in canonical.terms.iter().enumerate() {
            pairs.push((format!("t{i}.variance"), t.variance));
            for (j, f) in t.factors().iter().enumerate() {
                f.export(&format!("t{i}.f{j}"), &mut pairs);
            }
        }
        pairs.into_iter().collect()
    }

    /// Parses the text form, filling hyperparameters from `params`.
    pub fn from_text(text: &str, params: &ParamMap, dims: usize) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() || text == "(empty)" {
            return Ok(KernelExpression::default());
        }
        let mut terms = Vec::new();
        for (i, word) in text.split('+').enumerate() {
            let token = Token::parse(word)?;
            let mut term = ProductKernel::with_defaults(&token, dims);
            let mut missing = |key: String| {
                params.get(&key).copied().ok_or_else(|| Error::Format {
                    what: "kernel parameters",
                    detail: format!("missing `{key}`"),
                })
            };
            term.variance = missing(format!("t{i}.variance"))?;
            for (j, f) in term.factors_mut().iter_mut().enumerate() {
                let mut names = Vec::new();
                f.push_names(&format!("t{i}.f{j}"), &mut names);
                let values = names.into_iter().map(&mut missing).collect::<Result<Vec<_>>>()?;
                fill_factor(f, &values);
            }
            terms.push(ProductKernel::new(term.variance, term.factors().to_vec())?);
        }
        Ok(KernelExpression::new(terms))
    }
}

fn fill_factor(f: &mut Factor, values: &[f64]) {
    let d = f.dims().unwrap_or(0);
    match f {
        Factor::Periodic { lengthscales, periods } => {
            lengthscales.copy_from_slice(&values[..d]);
            periods.copy_from_slice(&values[d..]);
        }
        Factor::Linear { variances, shifts } => {
            variances.copy_from_slice(&values[..d]);
            shifts.copy_from_slice(&values[d..]);
        }
        Factor::WhiteNoise => {}
        other => {
            if let Some(l) = other.lengthscales_mut() {
                l.copy_from_slice(values);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::priors::sample_hyperparameters;
    use crate::kernels::{PriorSet, Primitive};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn canonical_text_orders_by_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = PriorSet::default();
        let mut a = sample_hyperparameters(&Token::single(Primitive::Periodic), &p, 2, &mut rng);
        let mut b = sample_hyperparameters(
            &Token::product([Primitive::WhiteNoise, Primitive::Linear]),
            &p,
            2,
            &mut rng,
        );
        a.variance = 0.5;
        b.variance = 2.0;
        let e = KernelExpression::new(vec![a, b]);
        assert_eq!(e.to_text(), "LIN*NOISE + PER");
    }

    proptest! {
        #[test]
        fn text_round_trip_is_lossless(seed in 0u64..10_000, dims in 1usize..4, n in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PriorSet::default();
            let mut terms = Vec::new();
            for k in 0..n {
                let a = Primitive::ALL[(seed as usize + 3 * k) % 8];
                let b = Primitive::ALL[(seed as usize / 7 + k) % 8];
                let token = if k % 2 == 0 { Token::single(a) } else { Token::product([a, b]) };
                terms.push(sample_hyperparameters(&token, &p, dims, &mut rng));
            }
            let e = KernelExpression::new(terms).canonical();
            let back = KernelExpression::from_text(&e.to_text(), &e.export_params(), dims).unwrap();
            prop_assert_eq!(back, e);
        }
    }
}

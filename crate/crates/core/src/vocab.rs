//! Token vocabulary and caption encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{reduce_product, KernelExpression, Primitive, Reduction, Token};

pub const STOP: &str = "<STOP>";

/// How products of a primitive with itself are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfProductRule {
    /// Only products of two distinct primitives.
    #[default]
    ExcludeAll,
    /// Also include self-products that do not reduce to their own family.
    NonReducible,
}

/// Ordered kernel tokens followed by STOP.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    index: HashMap<Token, usize>,
    hash: String,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list, rejecting duplicates.
    pub fn from_tokens(tokens: Vec<Token>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format {
                    what: "vocabulary",
                    detail: format!("duplicate token `{t}`"),
                });
            }
        }
        let mut hasher = Sha256::new();
        for name in tokens.iter().map(Token::to_string).chain([STOP.to_string()]) {
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
        }
        let hash = hasher
            .finalize()
            .iter()
            .take(16)
            .map(|b| format!("{b:02x}"))
            .collect();
        Ok(Vocabulary { tokens, index, hash })
    }

    /// Number of entries including STOP.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_kernels(&self) -> usize {
        self.tokens.len()
    }

    pub fn stop_id(&self) -> usize {
        self.tokens.len()
    }

    pub fn kernel_tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn id(&self, token: &Token) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Token for `id`, or `None` for STOP.
    pub fn token(&self, id: usize) -> Result<Option<&Token>> {
        match id.cmp(&self.tokens.len()) {
            std::cmp::Ordering::Less => Ok(Some(&self.tokens[id])),
            std::cmp::Ordering::Equal => Ok(None),
            std::cmp::Ordering::Greater => Err(Error::InvalidCaption(format!(
                "token id {id} outside vocabulary of {}",
                self.len()
            ))),
        }
    }

    pub fn name(&self, id: usize) -> Result<String> {
        Ok(self.token(id)?.map_or_else(|| STOP.to_string(), Token::to_string))
    }

    /// Stable digest of the token list.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn names(&self) -> Vec<String> {
        self.tokens
            .iter()
            .map(Token::to_string)
            .chain([STOP.to_string()])
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.names()).expect("token names serialise")
    }

    pub fn from_names(names: &[String]) -> Result<Self> {
        match names.split_last() {
            Some((last, rest)) if last == STOP => {
                Vocabulary::from_tokens(rest.iter().map(|n| Token::parse(n)).collect::<Result<_>>()?)
            }
            _ => Err(Error::Format {
                what: "vocabulary",
                detail: format!("last entry must be {STOP}"),
            }),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let names: Vec<String> = serde_json::from_str(s)?;
        Vocabulary::from_names(&names)
    }

    pub fn check_hash(&self, found: &str) -> Result<()> {
        if self.hash == found {
            Ok(())
        } else {
            Err(Error::VocabMismatch {
                expected: self.hash.clone(),
                found: found.to_string(),
            })
        }
    }
}

/// All primitives in `primitives` plus every canonical, non-redundant product
/// of two of them, followed by STOP. Order: singles, then pairs, each sorted.
pub fn build_vocabulary(primitives: &[Primitive], rule: SelfProductRule) -> Result<Vocabulary> {
    if primitives.is_empty() {
        return Err(Error::Config("vocabulary needs at least one primitive".into()));
    }
    let mut prims = primitives.to_vec();
    prims.sort();
    prims.dedup();
    let mut tokens: Vec<Token> = prims.iter().map(|&p| Token::single(p)).collect();
    let mut pairs = Vec::new();
    for (i, &a) in prims.iter().enumerate() {
        for &b in &prims[i..] {
            if a == b && rule == SelfProductRule::ExcludeAll {
                continue;
            }
            if let Reduction::Product(t) = reduce_product(a, b) {
                pairs.push(t);
            }
        }
    }
    pairs.sort();
    tokens.extend(pairs);
    Vocabulary::from_tokens(tokens)
}

/// The default eight-primitive vocabulary.
pub fn default_vocabulary() -> Vocabulary {
    build_vocabulary(&Primitive::ALL, SelfProductRule::ExcludeAll).expect("non-empty primitive set")
}

/// Token ids terminated by STOP.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Caption {
    pub ids: Vec<usize>,
}

impl Caption {
    /// Kernel token ids, without the trailing STOP.
    pub fn kernel_ids(&self) -> &[usize] {
        match self.ids.split_last() {
            Some((_, rest)) => rest,
            None => &[],
        }
    }

    pub fn to_text(&self, vocab: &Vocabulary) -> Result<String> {
        Ok(self
            .ids
            .iter()
            .map(|&i| vocab.name(i))
            .collect::<Result<Vec<_>>>()?
            .join(" "))
    }

    /// Fixed-width label: ids followed by STOP padding up to `width`.
    pub fn padded(&self, vocab: &Vocabulary, width: usize) -> Vec<usize> {
        let mut out = self.ids.clone();
        out.resize(width.max(out.len()), vocab.stop_id());
        out
    }

    /// Inverse of [`Caption::padded`]: truncates after the first STOP.
    pub fn from_padded(ids: &[usize], vocab: &Vocabulary) -> Result<Self> {
        let stop = vocab.stop_id();
        let end = ids
            .iter()
            .position(|&i| i == stop)
            .ok_or_else(|| Error::InvalidCaption("missing STOP".into()))?;
        for &i in &ids[..end] {
            vocab.token(i)?;
        }
        Ok(Caption {
            ids: ids[..=end].to_vec(),
        })
    }
}

/// Encodes `expr` as a caption with terms ordered by variance (descending),
/// ties broken by token name.
pub fn expression_to_caption(expr: &KernelExpression, vocab: &Vocabulary, max_len: usize) -> Result<Caption> {
    if expr.terms.len() > max_len {
        return Err(Error::InvalidCaption(format!(
            "{} terms exceed maximum caption length {max_len}",
            expr.terms.len()
        )));
    }
    let canonical = expr.clone().canonical();
    let mut ids = canonical
        .terms
        .iter()
        .map(|t| {
            let token = t.token();
            vocab.id(&token).ok_or_else(|| Error::UnknownToken(token.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    ids.push(vocab.stop_id());
    Ok(Caption { ids })
}

/// Decodes a caption into an expression with unit-scale hyperparameters.
pub fn caption_to_expression(
    caption: &Caption,
    vocab: &Vocabulary,
    max_len: usize,
    dims: usize,
) -> Result<KernelExpression> {
    let (last, body) = caption
        .ids
        .split_last()
        .ok_or_else(|| Error::InvalidCaption("empty caption".into()))?;
    if *last != vocab.stop_id() {
        return Err(Error::InvalidCaption("caption must end with STOP".into()));
    }
    if body.len() > max_len {
        return Err(Error::InvalidCaption(format!(
            "caption has {} tokens, maximum is {max_len}",
            body.len()
        )));
    }
    let mut tokens = Vec::with_capacity(body.len());
    for &id in body {
        match vocab.token(id)? {
            Some(t) => tokens.push(t.clone()),
            None => return Err(Error::InvalidCaption("STOP before end of caption".into())),
        }
    }
    Ok(KernelExpression::from_tokens(&tokens, dims))
}

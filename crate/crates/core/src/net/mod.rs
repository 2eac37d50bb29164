//! The captioning network.
//!
//! A dataset of `N` points in `D` dimensions is reshaped into `D` sets of
//! `(x_j, y)` pairs. The sequence encoder embeds each pair, runs set
//! attention over the `N` axis and mean-pools, giving one vector per input
//! dimension. The dimension encoder then attends over the `D` axis. The
//! decoder reads a token prompt (no positional encoding) and attends to the
//! `D` encodings; the classifier head instead mean-pools them over `D`.

mod checkpoint;
mod layers;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tape, TensorResult, Var};
use crate::vocab::Vocabulary;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layers::{causal_mask, DecoderBlock, LayerNorm, Linear, Mode, MultiheadAttention, RowFf, Sab, MASK_VALUE};
use layers::Init;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub rff_hidden: usize,
    pub n_sab_seq: usize,
    pub n_sab_dim: usize,
    pub n_decoder_blocks: usize,
    pub dropout_rate: f64,
    /// Kernel tokens per caption, excluding STOP.
    pub max_caption_len: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            embed_dim: 64,
            n_heads: 4,
            rff_hidden: 128,
            n_sab_seq: 6,
            n_sab_dim: 6,
            n_decoder_blocks: 2,
            dropout_rate: 0.1,
            max_caption_len: 3,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("rff_hidden", self.rff_hidden),
            ("n_sab_seq", self.n_sab_seq),
            ("n_sab_dim", self.n_sab_dim),
            ("n_decoder_blocks", self.n_decoder_blocks),
            ("max_caption_len", self.max_caption_len),
        ];
        if let Some((name, _)) = counts.iter().find(|c| c.1 == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Autoregressive caption decoder over the full vocabulary.
    Captioner,
    /// Single-step softmax over the vocabulary's kernel tokens.
    Classifier,
}

/// A batch of equally sized datasets: `x` is `B×N×D`, `y` is `B×N`, both
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch<T> {
    pub b: usize,
    pub n: usize,
    pub d: usize,
    pub x: Vec<T>,
    pub y: Vec<T>,
}

impl<T: Real> DataBatch<T> {
    pub fn new(b: usize, n: usize, d: usize, x: Vec<T>, y: Vec<T>) -> Result<Self> {
        if b == 0 || n == 0 || d == 0 {
            return Err(Error::DimensionMismatch(format!("empty batch B={b} N={n} D={d}")));
        }
        if x.len() != b * n * d || y.len() != b * n {
            return Err(Error::DimensionMismatch(format!(
                "batch B={b} N={n} D={d} with {} inputs and {} outputs",
                x.len(),
                y.len()
            )));
        }
        Ok(DataBatch { b, n, d, x, y })
    }

    pub fn from_dataset(x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        let (n, d) = x.shape();
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!("{n} inputs but {} outputs", y.len())));
        }
        let xs = (0..n).flat_map(|i| (0..d).map(move |j| T::c(x[(i, j)]))).collect();
        let ys = y.iter().map(|v| T::c(*v)).collect();
        DataBatch::new(1, n, d, xs, ys)
    }

    /// Dataset `i` of the batch.
    pub fn item(&self, i: usize) -> DataBatch<T> {
        let (n, d) = (self.n, self.d);
        DataBatch {
            b: 1,
            n,
            d,
            x: self.x[i * n * d..(i + 1) * n * d].to_vec(),
            y: self.y[i * n..(i + 1) * n].to_vec(),
        }
    }

    /// The `[B·D, N, 2]` tensor of `(x_j, y)` pairs.
    pub fn pairs(&self) -> Vec<T> {
        let (n, d) = (self.n, self.d);
        let mut out = vec![T::zero(); self.b * d * n * 2];
        for bi in 0..self.b {
            for i in 0..n {
                let y = self.y[bi * n + i];
                for j in 0..d {
                    let at = ((bi * d + j) * n + i) * 2;
                    out[at] = self.x[(bi * n + i) * d + j];
                    out[at + 1] = y;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Head {
    Captioner {
        embed: ParamId,
        blocks: Vec<DecoderBlock>,
        out: Linear,
    },
    Classifier {
        out: Linear,
    },
}

/// Layer structure and parameter handles. The same network runs against a
/// single- or double-precision copy of its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    config: ArchitectureConfig,
    n_out: usize,
    input: RowFf,
    seq_sabs: Vec<Sab>,
    dim_sabs: Vec<Sab>,
    dim_ff: RowFf,
    head: Head,
}

impl Network {
    /// Builds the network and its freshly initialised parameters.
    pub fn build(config: &ArchitectureConfig, kind: ModelKind, n_out: usize, seed: u64) -> Result<(Network, ParamStore<f32>)> {
        config.validate()?;
        if n_out == 0 {
            return Err(Error::Config("network needs at least one output".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = config;
        let (e, h, hid, p) = (c.embed_dim, c.n_heads, c.rff_hidden, c.dropout_rate);
        let input = RowFf::new(&mut init, "seq.input", 2, hid, e)?;
        let seq_sabs = (0..c.n_sab_seq)
            .map(|i| Sab::new(&mut init, &format!("seq.sab{i}"), e, h, hid, p))
            .collect::<TensorResult<_>>()?;
        let dim_sabs = (0..c.n_sab_dim)
            .map(|i| Sab::new(&mut init, &format!("dim.sab{i}"), e, h, hid, p))
            .collect::<TensorResult<_>>()?;
        let dim_ff = RowFf::new(&mut init, "dim.ff", e, e, e)?;
        let head = match kind {
            ModelKind::Captioner => Head::Captioner {
                // one extra row for the START symbol
                embed: init.uniform("dec.embed", &[n_out + 1, e], 1.0)?,
                blocks: (0..c.n_decoder_blocks)
                    .map(|i| DecoderBlock::new(&mut init, &format!("dec.block{i}"), e, h, hid, p))
                    .collect::<TensorResult<_>>()?,
                out: Linear::new(&mut init, "dec.out", e, n_out, true)?,
            },
            ModelKind::Classifier => Head::Classifier {
                out: Linear::new(&mut init, "cls.out", e, n_out, true)?,
            },
        };
        let net = Network {
            config: config.clone(),
            n_out,
            input,
            seq_sabs,
            dim_sabs,
            dim_ff,
            head,
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        match self.head {
            Head::Captioner { .. } => ModelKind::Captioner,
            Head::Classifier { .. } => ModelKind::Classifier,
        }
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// Embedding row used as the first prompt symbol.
    pub fn start_id(&self) -> usize {
        self.n_out
    }

    /// Sequence encoder on the tape: `[B·D, N, 2]` pairs → `[B, D, E]`.
    pub fn seq_enc<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &DataBatch<T>,
        mode: &mut Mode,
    ) -> Result<Var> {
        let (b, n, d) = (batch.b, batch.n, batch.d);
        let pairs = tape.constant(&[b * d, n, 2], batch.pairs())?;
        let mut z = self.input.forward(tape, store, pairs)?;
        for sab in &self.seq_sabs {
            z = sab.forward(tape, store, z, mode)?;
        }
        let g = tape.mean_pool(z, 1)?;
        Ok(tape.reshape(g, &[b, d, self.config.embed_dim])?)
    }

    /// Dimension encoder on the tape: `[B, D, E]` → `[B, D, E]`.
    pub fn dim_enc<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, g: Var, mode: &mut Mode) -> Result<Var> {
        let mut z = g;
        for sab in &self.dim_sabs {
            z = sab.forward(tape, store, z, mode)?;
        }
        Ok(self.dim_ff.forward(tape, store, z)?)
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &DataBatch<T>, mode: &mut Mode) -> Result<Var> {
        let g = self.seq_enc(tape, store, batch, mode)?;
        self.dim_enc(tape, store, g, mode)
    }

    /// Sequence-encoder values (`B×D×E`) computed one set at a time with a
    /// fresh tape per layer, keeping memory flat in `N`.
    pub fn seq_enc_values<T: Real>(&self, store: &ParamStore<T>, batch: &DataBatch<T>) -> Result<Vec<T>> {
        let (n, e) = (batch.n, self.config.embed_dim);
        let pairs = batch.pairs();
        let mut out = Vec::with_capacity(batch.b * batch.d * e);
        for set in pairs.chunks(n * 2) {
            let mut tape = Tape::new();
            let p = tape.constant(&[1, n, 2], set.to_vec())?;
            let z = self.input.forward(&mut tape, store, p)?;
            let mut values = tape.value(z).to_vec();
            for sab in &self.seq_sabs {
                let mut tape = Tape::new();
                let z = tape.constant(&[1, n, e], values)?;
                let z = sab.forward(&mut tape, store, z, &mut Mode::Eval)?;
                values = tape.value(z).to_vec();
            }
            let scale = T::c(1.0 / n as f64);
            for k in 0..e {
                out.push((0..n).map(|i| values[i * e + k]).sum::<T>() * scale);
            }
        }
        Ok(out)
    }

    /// Full encoder values in evaluation mode, `B×D×E`.
    pub fn encode_values<T: Real>(&self, store: &ParamStore<T>, batch: &DataBatch<T>) -> Result<Vec<T>> {
        let g = self.seq_enc_values(store, batch)?;
        let mut tape = Tape::new();
        let g = tape.constant(&[batch.b, batch.d, self.config.embed_dim], g)?;
        let h = self.dim_enc(&mut tape, store, g, &mut Mode::Eval)?;
        Ok(tape.value(h).to_vec())
    }

    /// Decoder logits `[B, L, n_out]` for prompts given as a flat `B×L` id
    /// array that already starts with [`Network::start_id`].
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encodings: Var,
        prompts: &[usize],
        len: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        let Head::Captioner { embed, blocks, out } = &self.head else {
            return Err(Error::Config("decode called on a classifier".into()));
        };
        let b = tape.shape(encodings)[0];
        if len == 0 || prompts.len() != b * len {
            return Err(Error::DimensionMismatch(format!(
                "{} prompt ids for batch {b} and length {len}",
                prompts.len()
            )));
        }
        let table = tape.param(store, *embed);
        let p = tape.embed(table, prompts)?;
        let mut h = tape.reshape(p, &[b, len, self.config.embed_dim])?;
        let mask = causal_mask(len);
        for block in blocks {
            h = block.forward(tape, store, h, encodings, &mask, mode)?;
        }
        Ok(out.forward(tape, store, h)?)
    }

    /// Next-token distribution after `prompt` (kernel/STOP ids, without the
    /// start symbol) given encoder values for one dataset (`D×E`).
    pub fn next_token_probs<T: Real>(&self, store: &ParamStore<T>, encodings: &[T], d: usize, prompt: &[usize]) -> Result<Vec<f64>> {
        if let Some(&bad) = prompt.iter().find(|&&t| t >= self.n_out) {
            return Err(Error::UnknownToken(format!("token id {bad}")));
        }
        let mut tape = Tape::new();
        let enc = tape.constant(&[1, d, self.config.embed_dim], encodings.to_vec())?;
        let mut ids = vec![self.start_id()];
        ids.extend_from_slice(prompt);
        let len = ids.len();
        let logits = self.decode(&mut tape, store, enc, &ids, len, &mut Mode::Eval)?;
        let last = &tape.value(logits)[(len - 1) * self.n_out..];
        Ok(softmax_f64(last))
    }

    /// Classifier logits `[B, n_out]` from encodings `[B, D, E]`.
    pub fn classify_logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, encodings: Var) -> Result<Var> {
        let Head::Classifier { out } = &self.head else {
            return Err(Error::Config("classify called on a captioner".into()));
        };
        let pooled = tape.mean_pool(encodings, 1)?;
        Ok(out.forward(tape, store, pooled)?)
    }

    /// Class probabilities for each dataset in the batch.
    pub fn classify_probs<T: Real>(&self, store: &ParamStore<T>, batch: &DataBatch<T>) -> Result<Vec<Vec<f64>>> {
        let enc = self.encode_values(store, batch)?;
        let mut tape = Tape::new();
        let enc = tape.constant(&[batch.b, batch.d, self.config.embed_dim], enc)?;
        let logits = self.classify_logits(&mut tape, store, enc)?;
        Ok(tape.value(logits).chunks(self.n_out).map(softmax_f64).collect())
    }
}

pub(crate) fn softmax_f64<T: Real>(logits: &[T]) -> Vec<f64> {
    let v: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Network weights plus everything needed to use them.
#[derive(Debug, Clone)]
pub struct KittModel {
    pub net: Network,
    pub params: ParamStore<f32>,
    /// Output vocabulary. For a classifier the kernel tokens are the classes.
    pub vocab: Vocabulary,
    /// Optimiser steps taken so far.
    pub step: u64,
}

impl KittModel {
    pub fn new(config: &ArchitectureConfig, kind: ModelKind, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let n_out = match kind {
            ModelKind::Captioner => vocab.len(),
            ModelKind::Classifier => vocab.num_kernels(),
        };
        let (net, params) = Network::build(config, kind, n_out, seed)?;
        Ok(KittModel {
            net,
            params,
            vocab,
            step: 0,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        self.net.config()
    }

    pub fn kind(&self) -> ModelKind {
        self.net.kind()
    }

    pub fn check_vocab(&self, hash: &str) -> Result<()> {
        self.vocab.check_hash(hash)
    }

    /// Encoder output (`D×E`) for one dataset.
    pub fn encode_dataset(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f32>> {
        let batch = DataBatch::from_dataset(x, y)?;
        self.net.encode_values(&self.params, &batch)
    }

    /// Distribution over the vocabulary for the token following `prompt`.
    pub fn decode_step(&self, x: &DMatrix<f64>, y: &[f64], prompt: &[usize]) -> Result<Vec<f64>> {
        let enc = self.encode_dataset(x, y)?;
        self.net.next_token_probs(&self.params, &enc, x.ncols(), prompt)
    }

    /// Class distribution for one dataset.
    pub fn classify(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<Vec<f64>> {
        let batch = DataBatch::from_dataset(x, y)?;
        Ok(self.net.classify_probs(&self.params, &batch)?.remove(0))
    }

    /// Digest of all parameter names and values.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params.iter() {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

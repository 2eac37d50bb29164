use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Real, Tape, TensorResult, Var};

/// Forward-pass mode. Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub(crate) fn dropout<T: Real>(&mut self, tape: &mut Tape<T>, x: Var, rate: f64) -> TensorResult<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, rate, true, &mut **rng),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Adds freshly initialised parameters under a name prefix.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> TensorResult<ParamId> {
        let n = shape.iter().product();
        let v = (0..n)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        self.store.add(name, shape, v)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], c: f32) -> TensorResult<ParamId> {
        self.store.add(name, shape, vec![c; shape.iter().product()])
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    /// Weights uniform on ±1/√fan_in, zero bias.
    pub(crate) fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> TensorResult<Self> {
        let w = init.uniform(&format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
        let b = if bias {
            Some(init.constant(&format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> TensorResult<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(init: &mut Init, name: &str, dim: usize) -> TensorResult<Self> {
        Ok(LayerNorm {
            gain: init.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: init.constant(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    /// Normalises over the last axis.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> TensorResult<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let axis = tape.shape(x).len() - 1;
        tape.layernorm(x, g, b, axis)
    }
}

/// Row-wise feed-forward: Linear, ReLU, Linear.
#[derive(Debug, Clone)]
pub struct RowFf {
    l1: Linear,
    l2: Linear,
}

impl RowFf {
    pub(crate) fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> TensorResult<Self> {
        Ok(RowFf {
            l1: Linear::new(init, &format!("{name}.0"), d_in, hidden, true)?,
            l2: Linear::new(init, &format!("{name}.1"), hidden, d_out, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> TensorResult<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.l2.forward(tape, store, h)
    }
}

/// Multi-head attention without projection biases.
#[derive(Debug, Clone)]
pub struct MultiheadAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    heads: usize,
    dim: usize,
}

impl MultiheadAttention {
    pub(crate) fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> TensorResult<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(MultiheadAttention {
            wq: init.uniform(&format!("{name}.wq"), &[dim, dim], bound)?,
            wk: init.uniform(&format!("{name}.wk"), &[dim, dim], bound)?,
            wv: init.uniform(&format!("{name}.wv"), &[dim, dim], bound)?,
            wo: init.uniform(&format!("{name}.wo"), &[dim, dim], bound)?,
            heads,
            dim,
        })
    }

    fn split_heads<T: Real>(&self, tape: &mut Tape<T>, x: Var, b: usize, l: usize) -> TensorResult<Var> {
        let (h, dh) = (self.heads, self.dim / self.heads);
        if h == 1 {
            return Ok(x);
        }
        let x = tape.reshape(x, &[b, l, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * h, l, dh])
    }

    fn merge_heads<T: Real>(&self, tape: &mut Tape<T>, x: Var, b: usize, l: usize) -> TensorResult<Var> {
        let (h, dh) = (self.heads, self.dim / self.heads);
        if h == 1 {
            return Ok(x);
        }
        let x = tape.reshape(x, &[b, h, l, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b, l, h * dh])
    }

    /// `queries [B, Lq, E]` attend over `keys_values [B, Lk, E]`. `mask`
    /// (length Lq·Lk, row-major) hides the positions where it is set.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys_values: Var,
        mask: Option<&[bool]>,
    ) -> TensorResult<Var> {
        let (b, lq) = (tape.shape(queries)[0], tape.shape(queries)[1]);
        let lk = tape.shape(keys_values)[1];
        let dh = self.dim / self.heads;
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(keys_values, wk)?;
        let v = tape.matmul(keys_values, wv)?;
        // scaling the queries is cheaper than scaling the Lq×Lk scores
        let q = tape.scale(q, T::c(1.0 / (dh as f64).sqrt()))?;
        let q = self.split_heads(tape, q, b, lq)?;
        let k = self.split_heads(tape, k, b, lk)?;
        let v = self.split_heads(tape, v, b, lk)?;
        let mut s = tape.bmm(q, k, true)?;
        if let Some(mask) = mask {
            s = tape.mask_fill(s, mask, T::c(MASK_VALUE))?;
        }
        let p = tape.softmax(s, 2)?;
        let a = tape.bmm(p, v, false)?;
        let a = self.merge_heads(tape, a, b, lq)?;
        let wo = tape.param(store, self.wo);
        tape.matmul(a, wo)
    }
}

pub const MASK_VALUE: f64 = -1e9;

/// Set attention block: `LayerNorm(Z + Dropout(rFF(MHA(Z, Z, Z))))`.
#[derive(Debug, Clone)]
pub struct Sab {
    mha: MultiheadAttention,
    ff: RowFf,
    norm: LayerNorm,
    dropout: f64,
}

impl Sab {
    pub(crate) fn new(init: &mut Init, name: &str, dim: usize, heads: usize, hidden: usize, dropout: f64) -> TensorResult<Self> {
        Ok(Sab {
            mha: MultiheadAttention::new(init, &format!("{name}.mha"), dim, heads)?,
            ff: RowFf::new(init, &format!("{name}.ff"), dim, hidden, dim)?,
            norm: LayerNorm::new(init, &format!("{name}.norm"), dim)?,
            dropout,
        })
    }

    /// `z [B, L, E]` → same shape.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var, mode: &mut Mode) -> TensorResult<Var> {
        let a = self.mha.forward(tape, store, z, z, None)?;
        let c = self.ff.forward(tape, store, a)?;
        let c = mode.dropout(tape, c, self.dropout)?;
        let r = tape.add(c, z)?;
        self.norm.forward(tape, store, r)
    }
}

/// Decoder block: causal self-attention over the prompt, attention from the
/// prompt to the dataset encodings, then a row-wise feed-forward layer; each
/// with dropout, residual and layer norm.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    self_attn: MultiheadAttention,
    cross_attn: MultiheadAttention,
    ff: RowFf,
    norms: [LayerNorm; 3],
    dropout: f64,
}

impl DecoderBlock {
    pub(crate) fn new(init: &mut Init, name: &str, dim: usize, heads: usize, hidden: usize, dropout: f64) -> TensorResult<Self> {
        Ok(DecoderBlock {
            self_attn: MultiheadAttention::new(init, &format!("{name}.self"), dim, heads)?,
            cross_attn: MultiheadAttention::new(init, &format!("{name}.cross"), dim, heads)?,
            ff: RowFf::new(init, &format!("{name}.ff"), dim, hidden, dim)?,
            norms: [
                LayerNorm::new(init, &format!("{name}.norm0"), dim)?,
                LayerNorm::new(init, &format!("{name}.norm1"), dim)?,
                LayerNorm::new(init, &format!("{name}.norm2"), dim)?,
            ],
            dropout,
        })
    }

    /// `prompt [B, L, E]`, `encodings [B, D, E]`; `causal` has length L².
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prompt: Var,
        encodings: Var,
        causal: &[bool],
        mode: &mut Mode,
    ) -> TensorResult<Var> {
        let a = self.self_attn.forward(tape, store, prompt, prompt, Some(causal))?;
        let a = mode.dropout(tape, a, self.dropout)?;
        let h = tape.add(prompt, a)?;
        let h = self.norms[0].forward(tape, store, h)?;
        let c = self.cross_attn.forward(tape, store, h, encodings, None)?;
        let c = mode.dropout(tape, c, self.dropout)?;
        let h2 = tape.add(h, c)?;
        let h2 = self.norms[1].forward(tape, store, h2)?;
        let f = self.ff.forward(tape, store, h2)?;
        let f = mode.dropout(tape, f, self.dropout)?;
        let h3 = tape.add(h2, f)?;
        self.norms[2].forward(tape, store, h3)
    }
}

/// `mask[i·L + j]` is set when position `j` lies after `i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|k| k % len > k / len).collect()
}

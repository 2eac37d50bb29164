use rand::Rng;

use super::{gemm, ParamId, Real, Tape, TapeTensor, TensorError, TensorResult, Var};

pub(crate) enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul {
        x: Var,
        w: Var,
        rows: usize,
        k: usize,
        m: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Permute {
        x: Var,
        inverse: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        outer: usize,
        len: usize,
        inner: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MeanPool {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Dropout { .. } => "dropout",
            Op::MeanPool { .. } => "mean_pool",
            Op::Embed { .. } => "embed",
            Op::Concat { .. } => "concat",
            Op::MaskFill { .. } => "mask_fill",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn check_finite<T: Real>(op: &'static str, v: &[T]) -> TensorResult<()> {
    if cfg!(debug_assertions) && v.iter().any(|x| !x.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, len, inner) element counts.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> TensorResult<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], out_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for j in 0..inner_len {
            out.push(src[base + j * inner_stride]);
        }
        // advance the odometer over all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn grad_mut<T: Real>(nodes: &mut [TapeTensor<T>], v: Var) -> Option<&mut [T]> {
    let n = &mut nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(nodes: &mut [TapeTensor<T>], v: Var, src: &[T]) {
    if let Some(g) = grad_mut(nodes, v) {
        for (a, b) in g.iter_mut().zip(src) {
            *a += *b;
        }
    }
}

/// Runs `f` on the gradient buffer of `g` and the values of `v`.
fn with_grad_and_value<T: Real>(
    nodes: &mut [TapeTensor<T>],
    g: Var,
    v: Var,
    f: impl FnOnce(&mut [T], &[T]),
) {
    if !nodes[g.0].needs_grad {
        return;
    }
    if g == v {
        let val = nodes[v.0].value.clone();
        f(grad_mut(nodes, g).expect("needs grad"), &val);
        return;
    }
    grad_mut(nodes, g);
    let (gi, vi) = (g.0, v.0);
    if gi < vi {
        let (lo, hi) = nodes.split_at_mut(vi);
        f(lo[gi].grad.as_mut().expect("allocated"), &hi[0].value);
    } else {
        let (lo, hi) = nodes.split_at_mut(gi);
        f(hi[0].grad.as_mut().expect("allocated"), &lo[vi].value);
    }
}

impl<T: Real> Tape<T> {
    fn check(&self, v: Var) -> TensorResult<&TapeTensor<T>> {
        self.node(v)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> TensorResult<Var> {
        check_finite(op_name, &value)?;
        let needs = self.needs(inputs);
        Ok(self.push(shape, value, op, needs))
    }

    /// `x [.., K] · w [K, M] → [.., M]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> TensorResult<Var> {
        let xs = self.check(x)?.shape.clone();
        let ws = self.check(w)?.shape.clone();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err("matmul", format!("{xs:?} · {ws:?}")));
        }
        let k = ws[0];
        let m = ws[1];
        let rows = self.nodes[x.0].value.len() / k.max(1);
        let mut out = vec![T::zero(); rows * m];
        gemm(rows, k, m, &self.nodes[x.0].value, false, &self.nodes[w.0].value, false, &mut out, T::zero());
        let mut shape = xs;
        *shape.last_mut().expect("rank ≥ 1") = m;
        self.record("matmul", shape, out, Op::MatMul { x, w, rows, k, m }, &[x, w])
    }

    /// Batched `a [.., M, K] · b [.., K, N]`, or `a · bᵀ` for `b [.., N, K]`
    /// when `trans_b` is set. Leading dimensions must agree.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> TensorResult<Var> {
        let as_ = self.check(a)?.shape.clone();
        let bs = self.check(b)?.shape.clone();
        let err = || shape_err("bmm", format!("{as_:?} · {bs:?} (trans_b = {trans_b})"));
        if as_.len() < 2 || as_.len() != bs.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return Err(err());
        }
        let r = as_.len();
        let (m, k) = (as_[r - 2], as_[r - 1]);
        let (bk, n) = if trans_b { (bs[r - 1], bs[r - 2]) } else { (bs[r - 2], bs[r - 1]) };
        if bk != k {
            return Err(err());
        }
        let batch: usize = as_[..r - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    T::zero(),
                );
            }
        }
        let mut shape = as_.clone();
        shape[r - 1] = n;
        self.record("bmm", shape, out, Op::Bmm { a, b, batch, m, k, n, trans_b }, &[a, b])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> TensorResult<Var> {
        let xs = self.check(x)?.shape.clone();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", format!("axes {axes:?} for shape {xs:?}")));
        }
        let out = permute_data(&self.nodes[x.0].value, &xs, axes);
        let shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.record("permute", shape, out, Op::Permute { x, inverse }, &[x])
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, i: usize, j: usize) -> TensorResult<Var> {
        let rank = self.check(x)?.shape.len();
        if i >= rank || j >= rank {
            return Err(shape_err("transpose", format!("axes {i}, {j} for rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(i, j);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let n = self.check(x)?.value.len();
        if shape.iter().product::<usize>() != n {
            return Err(shape_err(
                "reshape",
                format!("{:?} → {shape:?}", self.nodes[x.0].shape),
            ));
        }
        let value = self.nodes[x.0].value.clone();
        self.record("reshape", shape.to_vec(), value, Op::Reshape { x }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        let (sa, sb) = (&self.check(a)?.shape, &self.check(b)?.shape);
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("add", a, b)?;
        let value: Vec<T> = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| *x + *y).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.record("add", shape, value, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.same_shape("mul", a, b)?;
        let value: Vec<T> = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| *x * *y).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.record("mul", shape, value, Op::Mul { a, b }, &[a, b])
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let xs = self.check(x)?.shape.clone();
        let bs = self.check(bias)?.shape.clone();
        let last = xs.last().copied().unwrap_or(0);
        if bs.len() != 1 || bs[0] != last {
            return Err(shape_err("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let bv = &self.nodes[bias.0].value;
        let value: Vec<T> = self.nodes[x.0]
            .value
            .chunks(last.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| *a + *b))
            .collect();
        self.record("add_bias", xs, value, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> TensorResult<Var> {
        let n = self.check(x)?;
        let value: Vec<T> = n.value.iter().map(|v| *v * c).collect();
        let shape = n.shape.clone();
        self.record("scale", shape, value, Op::Scale { x, c }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> TensorResult<Var> {
        let n = self.check(x)?;
        let value: Vec<T> = n.value.iter().map(|v| v.max(T::zero())).collect();
        let shape = n.shape.clone();
        self.record("relu", shape, value, Op::Relu { x }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        let shape = self.check(x)?.shape.clone();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xv.len()];
        if inner == 1 {
            for (src, dst) in xv.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = (*v - mx).exp();
                    s += *d;
                }
                let inv = T::one() / s;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            return self.record("softmax", shape, out, Op::Softmax { x, outer, len, inner }, &[x]);
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mx = (0..len).map(|l| xv[at(l)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for l in 0..len {
                    let e = (xv[at(l)] - mx).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / s;
                }
            }
        }
        self.record("softmax", shape, out, Op::Softmax { x, outer, len, inner }, &[x])
    }

    /// Normalises along `axis` to zero mean and unit variance, then applies
    /// an elementwise gain and bias of that axis's length.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> TensorResult<Var> {
        let shape = self.check(x)?.shape.clone();
        let (outer, len, inner) = split_axis("layernorm", &shape, axis)?;
        for p in [gain, bias] {
            if self.check(p)?.shape != [len] {
                return Err(shape_err(
                    "layernorm",
                    format!("parameter shape {:?} for axis length {len}", self.nodes[p.0].shape),
                ));
            }
        }
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "layernorm" });
        }
        let xv = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let n = T::c(len as f64);
        let eps = T::c(LAYERNORM_EPS);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mean = (0..len).map(|l| xv[at(l)]).sum::<T>() / n;
                let var = (0..len).map(|l| (xv[at(l)] - mean).powi(2)).sum::<T>() / n;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for l in 0..len {
                    let h = (xv[at(l)] - mean) * is;
                    xhat[at(l)] = h;
                    out[at(l)] = h * g[l] + b[l];
                }
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            outer,
            len,
            inner,
            xhat,
            inv_std,
        };
        self.record("layernorm", shape, out, op, &[x, gain, bias])
    }

    /// Inverted dropout; the identity when `train` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> TensorResult<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(shape_err("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let value: Vec<T> = self.nodes[x.0].value.iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.record("dropout", shape, value, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        let mut shape = self.check(x)?.shape.clone();
        let (outer, len, inner) = split_axis("mean_pool", &shape, axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_pool" });
        }
        let xv = &self.nodes[x.0].value;
        let n = T::c(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v / n);
        shape.remove(axis);
        self.record("mean_pool", shape, out, Op::MeanPool { x, outer, len, inner }, &[x])
    }

    /// Rows of `table [V, E]` selected by `ids`, giving `[ids.len(), E]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> TensorResult<Var> {
        let ts = self.check(table)?.shape.clone();
        if ts.len() != 2 {
            return Err(shape_err("embed", format!("table shape {ts:?}")));
        }
        let (v, e) = (ts[0], ts[1]);
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embed",
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(&tv[id * e..(id + 1) * e]);
        }
        let op = Op::Embed {
            table,
            ids: ids.to_vec(),
        };
        self.record("embed", vec![ids.len(), e], out, op, &[table])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> TensorResult<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.check(*first)?.shape.clone();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut recs = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = &self.check(p)?.shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            recs.push((p, s[axis]));
        }
        let total: usize = recs.iter().map(|r| r.1).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &recs {
                out.extend_from_slice(&self.nodes[p.0].value[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.record("concat", shape, out, Op::Concat { parts: recs, outer, inner }, parts)
    }

    /// Replaces entries where `mask` is set by `fill`. The mask is broadcast
    /// over leading elements: its length must divide the tensor's.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], fill: T) -> TensorResult<Var> {
        let n = self.check(x)?.value.len();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(shape_err(
                "mask_fill",
                format!("mask of {} for {n} elements", mask.len()),
            ));
        }
        let full: Vec<bool> = (0..n).map(|i| mask[i % mask.len()]).collect();
        let value: Vec<T> = self.nodes[x.0]
            .value
            .iter()
            .zip(&full)
            .map(|(v, m)| if *m { fill } else { *v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.record("mask_fill", shape, value, Op::MaskFill { x, mask: full }, &[x])
    }

    /// Mean negative log-softmax over the rows of `logits [.., C]` whose
    /// target is present; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> TensorResult<Var> {
        let shape = self.check(logits)?.shape.clone();
        let c = shape.last().copied().unwrap_or(0);
        if c == 0 {
            return Err(TensorError::EmptyAxis { op: "cross_entropy" });
        }
        let lv = &self.nodes[logits.0].value;
        let rows = lv.len() / c;
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|v| (*v - mx).exp()).sum();
            let lse = mx + s.ln();
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (*v - lse).exp();
            }
            if let Some(t) = *t {
                if t >= c {
                    return Err(TensorError::Index {
                        op: "cross_entropy",
                        index: t,
                        extent: c,
                    });
                }
                total += lse - row[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::EmptyAxis { op: "cross_entropy" });
        }
        let loss = total / T::c(count as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        self.record("cross_entropy", vec![1], vec![loss], op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> TensorResult<Var> {
        let s: T = self.check(x)?.value.iter().copied().sum();
        self.record("sum", vec![1], vec![s], Op::Sum { x }, &[x])
    }
}

/// Applies the backward rule of `node` given its output gradient `dy`,
/// accumulating into the gradients of earlier nodes.
pub(crate) fn backward<T: Real>(node: &TapeTensor<T>, dy: &[T], nodes: &mut [TapeTensor<T>]) {
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul { x, w, rows, k, m } => {
            with_grad_and_value(nodes, x, w, |gx, wv| gemm(rows, m, k, dy, false, wv, true, gx, T::one()));
            with_grad_and_value(nodes, w, x, |gw, xv| gemm(k, rows, m, xv, true, dy, false, gw, T::one()));
        }
        &Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            with_grad_and_value(nodes, a, b, |ga, bv| {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &dy[i * m * n..(i + 1) * m * n],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        T::one(),
                    );
                }
            });
            with_grad_and_value(nodes, b, a, |gb, av| {
                for i in 0..batch {
                    let (dyi, avi) = (&dy[i * m * n..(i + 1) * m * n], &av[i * m * k..(i + 1) * m * k]);
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(n, m, k, dyi, true, avi, false, gbi, T::one());
                    } else {
                        gemm(k, m, n, avi, true, dyi, false, gbi, T::one());
                    }
                }
            });
        }
        Op::Permute { x, inverse } => {
            let back = permute_data(dy, &node.shape, inverse);
            add_into(nodes, *x, &back);
        }
        &Op::Reshape { x } => add_into(nodes, x, dy),
        &Op::Add { a, b } => {
            add_into(nodes, a, dy);
            add_into(nodes, b, dy);
        }
        &Op::AddBias { x, bias } => {
            add_into(nodes, x, dy);
            if let Some(gb) = grad_mut(nodes, bias) {
                let e = gb.len();
                for row in dy.chunks(e.max(1)) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += *d;
                    }
                }
            }
        }
        &Op::Mul { a, b } => {
            with_grad_and_value(nodes, a, b, |ga, bv| {
                for ((g, d), v) in ga.iter_mut().zip(dy).zip(bv) {
                    *g += *d * *v;
                }
            });
            with_grad_and_value(nodes, b, a, |gb, av| {
                for ((g, d), v) in gb.iter_mut().zip(dy).zip(av) {
                    *g += *d * *v;
                }
            });
        }
        &Op::Scale { x, c } => {
            if let Some(g) = grad_mut(nodes, x) {
                for (g, d) in g.iter_mut().zip(dy) {
                    *g += *d * c;
                }
            }
        }
        &Op::Relu { x } => {
            if let Some(g) = grad_mut(nodes, x) {
                for ((g, d), y) in g.iter_mut().zip(dy).zip(&node.value) {
                    if *y > T::zero() {
                        *g += *d;
                    }
                }
            }
        }
        &Op::Softmax { x, outer, len, inner } => {
            if let Some(g) = grad_mut(nodes, x) {
                let y = &node.value;
                if inner == 1 {
                    for ((g, d), y) in g.chunks_exact_mut(len).zip(dy.chunks_exact(len)).zip(y.chunks_exact(len)) {
                        let dot: T = d.iter().zip(y).map(|(a, b)| *a * *b).sum();
                        for ((g, d), y) in g.iter_mut().zip(d).zip(y) {
                            *g += *y * (*d - dot);
                        }
                    }
                    return;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let dot: T = (0..len).map(|l| dy[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            g[at(l)] += y[at(l)] * (dy[at(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            outer,
            len,
            inner,
            xhat,
            inv_std,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            let at = |o: usize, l: usize, i: usize| o * len * inner + l * inner + i;
            if let Some(gb) = grad_mut(nodes, *bias) {
                for o in 0..outer {
                    for (l, g) in gb.iter_mut().enumerate() {
                        for i in 0..inner {
                            *g += dy[at(o, l, i)];
                        }
                    }
                }
            }
            if let Some(gg) = grad_mut(nodes, *gain) {
                for o in 0..outer {
                    for (l, g) in gg.iter_mut().enumerate() {
                        for i in 0..inner {
                            *g += dy[at(o, l, i)] * xhat[at(o, l, i)];
                        }
                    }
                }
            }
            let gain_v = nodes[gain.0].value.clone();
            if let Some(gx) = grad_mut(nodes, *x) {
                let n = T::c(len as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let dh = |l: usize| dy[at(o, l, i)] * gain_v[l];
                        let m1 = (0..len).map(dh).sum::<T>() / n;
                        let m2 = (0..len).map(|l| dh(l) * xhat[at(o, l, i)]).sum::<T>() / n;
                        let is = inv_std[o * inner + i];
                        for l in 0..len {
                            gx[at(o, l, i)] += is * (dh(l) - m1 - xhat[at(o, l, i)] * m2);
                        }
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(g) = grad_mut(nodes, *x) {
                for ((g, d), m) in g.iter_mut().zip(dy).zip(mask) {
                    *g += *d * *m;
                }
            }
        }
        &Op::MeanPool { x, outer, len, inner } => {
            if let Some(g) = grad_mut(nodes, x) {
                let n = T::c(len as f64);
                for o in 0..outer {
                    let src = &dy[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s / n;
                        }
                    }
                }
            }
        }
        Op::Embed { table, ids } => {
            let e = node.shape[1];
            if let Some(g) = grad_mut(nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for (g, d) in g[id * e..(id + 1) * e].iter_mut().zip(&dy[r * e..(r + 1) * e]) {
                        *g += *d;
                    }
                }
            }
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, len) in parts {
                if let Some(g) = grad_mut(nodes, p) {
                    for o in 0..*outer {
                        let src = &dy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (g, d) in g[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *g += *d;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::MaskFill { x, mask } => {
            if let Some(g) = grad_mut(nodes, *x) {
                for ((g, d), m) in g.iter_mut().zip(dy).zip(mask) {
                    if !*m {
                        *g += *d;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
        } => {
            let scale = dy[0] / T::c(*count as f64);
            let c = probs.len() / targets.len().max(1);
            if let Some(g) = grad_mut(nodes, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        g[r * c + j] += (probs[r * c + j] - onehot) * scale;
                    }
                }
            }
        }
        &Op::Sum { x } => {
            if let Some(g) = grad_mut(nodes, x) {
                g.iter_mut().for_each(|v| *v += dy[0]);
            }
        }
    }
}

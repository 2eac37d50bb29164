//! Central finite-difference checks of tape gradients in double precision.

use super::{Tape, TensorResult, Var};

/// Builds a graph from the input handles and returns its output.
pub type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> TensorResult<Var> + 'a;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// (input, element) where it occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// `Σ w ⊙ f(inputs)` and its gradient with respect to every input.
fn probe(build: &Graph, inputs: &[(Vec<usize>, Vec<f64>)], weights: &[f64], grads: bool) -> TensorResult<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|(s, v)| tape.variable(s, v.clone()))
        .collect::<TensorResult<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| weights[i % weights.len()]).collect();
    let w = tape.constant(&shape, w)?;
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    let f = tape.value(loss)[0];
    if !grads {
        return Ok((f, Vec::new()));
    }
    tape.backward(loss)?;
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(v, (_, val))| tape.grad(*v).map_or(vec![0.0; val.len()], <[f64]>::to_vec))
        .collect();
    Ok((f, g))
}

/// Compares reverse-mode gradients of `Σ w ⊙ build(inputs)` against central
/// differences with step `h`. `weights` are cycled over the output.
pub fn gradient_check(build: &Graph, inputs: &[(Vec<usize>, Vec<f64>)], weights: &[f64], h: f64) -> TensorResult<GradCheckReport> {
    let (_, analytic) = probe(build, inputs, weights, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (k, (_, val)) in inputs.iter().enumerate() {
        for i in 0..val.len() {
            work[k].1[i] = val[i] + h;
            let fp = probe(build, &work, weights, false)?.0;
            work[k].1[i] = val[i] - h;
            let fm = probe(build, &work, weights, false)?.0;
            work[k].1[i] = val[i];
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[k][i];
            let rel = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (k, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

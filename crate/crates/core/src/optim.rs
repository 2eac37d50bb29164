//! Dense BFGS with a strong-Wolfe line search.
//!
//! Objectives return `None` to reject a point (for example when a covariance
//! matrix fails to factorise); the line search treats that as `+∞`.

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged once the gradient 2-norm falls below this.
    pub gtol: f64,
    /// Stop (unconverged) when the relative objective change is below this.
    pub ftol: f64,
    pub max_line_search: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 200,
            gtol: 1e-5,
            ftol: 1e-14,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

impl BfgsResult {
    pub fn grad_norm(&self) -> f64 {
        norm(&self.grad)
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Point {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

struct Search<'a, F> {
    f: &'a mut F,
    evaluations: usize,
}

impl<F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>> Search<'_, F> {
    fn eval(&mut self, x: &[f64], p: &[f64], alpha: f64) -> Option<Point> {
        let xn: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + alpha * b).collect();
        self.evaluations += 1;
        let (f, g) = (self.f)(&xn)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Point { alpha, x: xn, f, g })
    }

    /// Returns a point satisfying the strong Wolfe conditions, or failing that
    /// the best point with sufficient decrease.
    fn line_search(&mut self, x: &[f64], f0: f64, g0: &[f64], p: &[f64], alpha0: f64, max: usize) -> Option<Point> {
        let d0 = dot(g0, p);
        if d0 >= 0.0 {
            return None;
        }
        let mut prev = Point {
            alpha: 0.0,
            x: x.to_vec(),
            f: f0,
            g: g0.to_vec(),
        };
        let mut alpha = alpha0;
        for i in 0..max {
            let pt = self.eval(x, p, alpha);
            match pt {
                Some(pt) if !(pt.f > f0 + C1 * alpha * d0 || (i > 0 && pt.f >= prev.f)) => {
                    let d = dot(&pt.g, p);
                    if d.abs() <= -C2 * d0 {
                        return Some(pt);
                    }
                    if d >= 0.0 {
                        return self.zoom(x, f0, d0, p, pt, prev.alpha, max);
                    }
                    alpha = (2.0 * alpha).min(alpha * 1e3);
                    prev = pt;
                }
                _ => {
                    let hi = pt.map_or(alpha, |p| p.alpha);
                    return self.zoom(x, f0, d0, p, prev, hi, max);
                }
            }
        }
        (prev.alpha > 0.0).then_some(prev)
    }

    #[allow(clippy::too_many_arguments)]
    fn zoom(
        &mut self,
        x: &[f64],
        f0: f64,
        d0: f64,
        p: &[f64],
        mut lo: Point,
        mut hi: f64,
        max: usize,
    ) -> Option<Point> {
        for _ in 0..max {
            let alpha = 0.5 * (lo.alpha + hi);
            if (hi - lo.alpha).abs() < 1e-16 * alpha.abs().max(1e-300) {
                break;
            }
            match self.eval(x, p, alpha) {
                Some(pt) if !(pt.f > f0 + C1 * alpha * d0 || pt.f >= lo.f) => {
                    let d = dot(&pt.g, p);
                    if d.abs() <= -C2 * d0 {
                        return Some(pt);
                    }
                    if d * (hi - lo.alpha) >= 0.0 {
                        hi = lo.alpha;
                    }
                    lo = pt;
                }
                _ => hi = alpha,
            }
        }
        (lo.alpha > 0.0).then_some(lo)
    }
}

/// Minimises `f` from `x0`. Returns `None` if `f` rejects the starting point.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut gx) = f(&x0)?;
    if !fx.is_finite() {
        return None;
    }
    let mut x = x0;
    let mut search = Search {
        f: &mut f,
        evaluations: 1,
    };
    let identity = |n: usize| {
        let mut h = vec![0.0; n * n];
        (0..n).for_each(|i| h[i * n + i] = 1.0);
        h
    };
    let mut h = identity(n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = norm(&gx) < opts.gtol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let p: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &gx)).collect();
        let alpha0 = if fresh { (1.0 / norm(&gx)).min(1.0) } else { 1.0 };
        let step = search.line_search(&x, fx, &gx, &p, alpha0, opts.max_line_search);
        let Some(pt) = step else {
            if fresh {
                break;
            }
            h = identity(n);
            fresh = true;
            continue;
        };
        let s: Vec<f64> = pt.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = pt.g.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let f_prev = fx;
        x = pt.x;
        fx = pt.f;
        gx = pt.g;
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if fresh {
                let scale = sy / dot(&y, &y);
                h = identity(n);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }
        converged = norm(&gx) < opts.gtol;
        if !converged && (f_prev - fx).abs() <= opts.ftol * fx.abs().max(1.0) {
            break;
        }
    }
    Some(BfgsResult {
        x,
        f: fx,
        grad: gx,
        iterations,
        evaluations: search.evaluations,
        converged,
    })
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` with `ρ = 1/(sᵀy)`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    let c = rho * rho * yhy + rho;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += c * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Some((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(rosenbrock, vec![-1.2, 1.0], &BfgsOptions::default()).unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn respects_rejected_region() {
        // minimum at 3 but everything beyond 2 is rejected
        let f = |x: &[f64]| {
            if x[0] > 2.0 {
                None
            } else {
                Some(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]))
            }
        };
        let r = minimize(f, vec![0.0], &BfgsOptions::default()).unwrap();
        assert!(r.x[0] <= 2.0 && r.x[0] > 1.9, "{:?}", r.x);
        assert!(!r.converged);
    }

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| {
            let v = 3.0 * x[0] * x[0] + x[1] * x[1] + x[0] * x[1] - x[0];
            Some((v, vec![6.0 * x[0] + x[1] - 1.0, 2.0 * x[1] + x[0]]))
        };
        let r = minimize(f, vec![5.0, -4.0], &BfgsOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.grad_norm() < 1e-5);
        assert!((r.x[0] - 2.0 / 11.0).abs() < 1e-6);
    }

    #[test]
    fn rejected_start_is_none() {
        assert!(minimize(|_: &[f64]| None, vec![0.0], &BfgsOptions::default()).is_none());
    }
}

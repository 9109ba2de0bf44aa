//! Dense BFGS with a strong-Wolfe line search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub tol_grad: f64,
    pub tol_step: f64,
    pub max_iters: usize,
    pub c1: f64,
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_trials: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            tol_grad: 1e-7,
            tol_step: 1e-7,
            max_iters: 200,
            c1: 1e-4,
            c2: 0.9,
            max_trials: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub value: f64,
    pub grad_inf: f64,
    /// Euclidean length of the accepted step; zero for the starting point.
    pub step: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Gradient,
    Step,
    MaxIters,
    /// The line search found no acceptable point; the best iterate is kept.
    Stall,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub history: Vec<IterRecord>,
    pub stop: StopReason,
}

impl BfgsResult {
    pub fn iterations(&self) -> usize {
        self.history.len().saturating_sub(1)
    }
}

/// Slope ratio above which an accepted step is refined once.
const SECANT_RATIO: f64 = 0.5;

struct Point {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
    slope: f64,
}

enum Search {
    Wolfe(Point),
    /// Trial budget spent; carries the best point with sufficient decrease.
    Exhausted(Option<Point>),
}

struct LineSearch<'a, F> {
    obj: &'a mut F,
    x: &'a DVector<f64>,
    d: &'a DVector<f64>,
    f0: f64,
    slope0: f64,
    opts: &'a BfgsOptions,
    trials: usize,
    best: Option<Point>,
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Point {
        self.trials += 1;
        let xt = self.x + self.d * alpha;
        let (f, g) = match (self.obj)(xt.as_slice()) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => (f, DVector::from_vec(g)),
            // Failed evaluations behave like an infinitely bad point.
            _ => (f64::INFINITY, DVector::zeros(self.x.len())),
        };
        let slope = if f.is_finite() { g.dot(self.d) } else { f64::NAN };
        let p = Point { alpha, f, g, slope };
        if self.armijo(&p) && self.best.as_ref().is_none_or(|b| p.f < b.f) {
            self.best = Some(Point {
                alpha,
                f,
                g: p.g.clone(),
                slope,
            });
        }
        p
    }

    fn armijo(&self, p: &Point) -> bool {
        p.f <= self.f0 + self.opts.c1 * p.alpha * self.slope0
    }

    fn curvature(&self, p: &Point) -> bool {
        p.slope.abs() <= -self.opts.c2 * self.slope0
    }

    /// One extra trial at the secant minimizer when an accepted point still
    /// has a large slope; kept only if it also satisfies the Wolfe conditions.
    fn secant(&mut self, p: Point) -> Point {
        if self.exhausted() || p.slope.abs() <= SECANT_RATIO * -self.slope0 {
            return p;
        }
        let a = p.alpha * self.slope0 / (self.slope0 - p.slope);
        if !(a.is_finite() && a > 0.0) {
            return p;
        }
        let q = self.eval(a);
        if self.armijo(&q) && self.curvature(&q) && q.f < p.f {
            q
        } else {
            p
        }
    }

    fn exhausted(&self) -> bool {
        self.trials >= self.opts.max_trials
    }

    fn run(mut self, alpha0: f64) -> (Search, usize) {
        let mut prev = Point {
            alpha: 0.0,
            f: self.f0,
            g: DVector::zeros(0),
            slope: self.slope0,
        };
        let mut alpha = alpha0;
        let mut first = true;
        while !self.exhausted() {
            let p = self.eval(alpha);
            if !self.armijo(&p) || (!first && p.f >= prev.f) {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                let p = self.secant(p);
                let t = self.trials;
                return (Search::Wolfe(p), t);
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev);
            }
            alpha = 2.0 * p.alpha;
            prev = p;
            first = false;
        }
        let t = self.trials;
        (Search::Exhausted(self.best), t)
    }

    fn zoom(mut self, mut lo: Point, mut hi: Point) -> (Search, usize) {
        while !self.exhausted() {
            let width = hi.alpha - lo.alpha;
            if width.abs() <= 1e-16 * lo.alpha.abs().max(1e-300) {
                break;
            }
            let mut a = if hi.f.is_finite() {
                // Minimizer of the quadratic through f(lo), f'(lo), f(hi).
                let denom = 2.0 * (hi.f - lo.f - lo.slope * width);
                if denom > 0.0 {
                    lo.alpha - lo.slope * width * width / denom
                } else {
                    lo.alpha + 0.5 * width
                }
            } else {
                lo.alpha + 0.5 * width
            };
            let (a_min, a_max) = if width > 0.0 {
                (lo.alpha + 0.1 * width, hi.alpha - 0.1 * width)
            } else {
                (hi.alpha - 0.1 * width, lo.alpha + 0.1 * width)
            };
            if !(a >= a_min && a <= a_max) {
                a = lo.alpha + 0.5 * width;
            }
            let p = self.eval(a);
            if !self.armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature(&p) {
                    let p = self.secant(p);
                    let t = self.trials;
                    return (Search::Wolfe(p), t);
                }
                if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        let t = self.trials;
        (Search::Exhausted(self.best), t)
    }
}

fn norm_inf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `obj` from `x0`.
///
/// `obj` returns the value and gradient; evaluation errors during the line
/// search count as `+inf`. An error at `x0` is returned as is. When the line
/// search runs out of trials without any decrease, the result is
/// [`Error::LineSearchStall`] carrying the current (best) iterate.
pub fn bfgs_minimize<F>(mut obj: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (f0, g0) = obj(x0)?;
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    if g0.len() != n {
        return Err(Error::Dimension { expected: n, got: g0.len() });
    }
    let mut x = DVector::from_column_slice(x0);
    let mut f = f0;
    let mut g = DVector::from_vec(g0);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut history = vec![IterRecord {
        iter: 0,
        value: f,
        grad_inf: norm_inf(&g),
        step: 0.0,
    }];
    let finish = |x: DVector<f64>, f, g: DVector<f64>, history, stop| BfgsResult {
        x: x.as_slice().to_vec(),
        value: f,
        grad: g.as_slice().to_vec(),
        history,
        stop,
    };
    if norm_inf(&g) <= opts.tol_grad {
        return Ok(finish(x, f, g, history, StopReason::Gradient));
    }

    for iter in 1..=opts.max_iters {
        let mut d = -(&hinv * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            scaled = false;
            d = -g.clone();
            slope = g.dot(&d);
        }
        let alpha0 = if scaled { 1.0 } else { (1.0 / norm_inf(&g)).min(1.0) };
        let search = LineSearch {
            obj: &mut obj,
            x: &x,
            d: &d,
            f0: f,
            slope0: slope,
            opts,
            trials: 0,
            best: None,
        };
        let (outcome, trials) = search.run(alpha0);
        let p = match outcome {
            Search::Wolfe(p) => p,
            // Sufficient decrease without the curvature condition is still progress.
            Search::Exhausted(Some(p)) if p.f < f => p,
            Search::Exhausted(_) => {
                return Err(Error::LineSearchStall {
                    trials,
                    best_value: f,
                    best_x: x.as_slice().to_vec(),
                })
            }
        };
        let s = &d * p.alpha;
        let y = &p.g - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                hinv = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            hinv -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x += &s;
        f = p.f;
        g = p.g;
        let step = s.norm();
        let grad_inf = norm_inf(&g);
        history.push(IterRecord {
            iter,
            value: f,
            grad_inf,
            step,
        });
        log::trace!("bfgs {iter}: f = {f:.6e} |g| = {grad_inf:.3e} step = {step:.3e}");
        if grad_inf <= opts.tol_grad {
            return Ok(finish(x, f, g, history, StopReason::Gradient));
        }
        if step <= opts.tol_step {
            return Ok(finish(x, f, g, history, StopReason::Step));
        }
    }
    Ok(finish(x, f, g, history, StopReason::MaxIters))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn convex_quadratic_terminates_quickly() {
        let diag = [1.0, 3.0, 10.0, 0.5, 7.0];
        let target = [1.0, -2.0, 0.5, 3.0, -1.0];
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut f = 0.0;
            let mut g = vec![0.0; 5];
            for i in 0..5 {
                // Coupling between neighbours keeps the Hessian non-diagonal.
                let r = x[i] - target[i];
                f += 0.5 * diag[i] * r * r;
                g[i] += diag[i] * r;
            }
            let c = x[0] - target[0] - (x[1] - target[1]);
            f += 0.5 * c * c;
            g[0] += c;
            g[1] -= c;
            Ok((f, g))
        };
        let opts = BfgsOptions {
            tol_grad: 1e-10,
            tol_step: 0.0,
            ..Default::default()
        };
        let r = bfgs_minimize(obj, &[0.0; 5], &opts).unwrap();
        assert_eq!(r.stop, StopReason::Gradient);
        assert!(r.iterations() <= 10, "{}", r.iterations());
        for (a, b) in r.x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let opts = BfgsOptions {
            tol_grad: 1e-9,
            tol_step: 0.0,
            max_iters: 200,
            ..Default::default()
        };
        let r = bfgs_minimize(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!(r.value <= 1e-10, "{} after {}", r.value, r.iterations());
        assert!(r.iterations() <= 200);
    }

    #[test]
    fn values_never_increase() {
        let opts = BfgsOptions {
            tol_grad: 1e-9,
            tol_step: 0.0,
            ..Default::default()
        };
        let r = bfgs_minimize(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1].value <= w[0].value);
        }
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let r = bfgs_minimize(rosenbrock, &[1.0, 1.0], &BfgsOptions::default()).unwrap();
        assert_eq!(r.iterations(), 0);
        assert_eq!(r.x, vec![1.0, 1.0]);
    }

    #[test]
    fn wrong_gradient_stalls_with_iterate() {
        // The reported gradient points uphill, so no step decreases f.
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((x[0] * x[0], vec![-2.0 * x[0] - 1.0])) };
        match bfgs_minimize(obj, &[1.0], &BfgsOptions::default()) {
            Err(Error::LineSearchStall { best_x, best_value, .. }) => {
                assert_eq!(best_x, vec![1.0]);
                assert_eq!(best_value, 1.0);
            }
            other => panic!("expected a stall, got {other:?}"),
        }
    }

    #[test]
    fn failed_evaluations_are_avoided() {
        // Undefined for x <= 0; the minimizer at x = 1 lies inside.
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            if x[0] <= 0.0 {
                return Err(Error::NonFinite);
            }
            Ok((x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]]))
        };
        let r = bfgs_minimize(obj, &[5.0], &BfgsOptions::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Limited-memory BFGS settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Absolute tolerance is this times `sqrt(dim)`.
    pub gradient_tolerance: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 30,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 || self.max_line_search == 0 {
            return Err(Error::Config("L-BFGS memory and line-search budget must be positive".into()));
        }
        if !(self.gradient_tolerance > 0.0 && 0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config(format!("invalid L-BFGS constants {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Gradient norm fell below the tolerance.
    Converged,
    IterationCap,
    /// No acceptable step was found; the best iterate is returned.
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective after each accepted iterate, starting with the initial one.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Minimiser of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`,
/// or the bisection when it is not usable.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    let mid = 0.5 * (a + b);
    if !disc.is_finite() || disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt().copysign(b - a);
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    // Keep away from the ends so the bracket always shrinks.
    let margin = 0.1 * (hi - lo);
    if t.is_finite() && t > lo + margin && t < hi - margin {
        t
    } else {
        mid
    }
}

/// Strong Wolfe line search (bracketing then zoom). Returns the accepted
/// point, or the best point seen if the conditions were never met.
fn line_search<F>(
    f: &mut F,
    cur: &Point,
    dir: &[f64],
    alpha0: f64,
    cfg: &LbfgsConfig,
    evals: &mut usize,
) -> (Option<Point>, Option<Point>)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let d0 = dot(&cur.g, dir);
    let mut eval = |alpha: f64| {
        let x: Vec<f64> = cur.x.iter().zip(dir).map(|(x, d)| x + alpha * d).collect();
        let (mut fv, g) = f(&x);
        *evals += 1;
        let mut dg = dot(&g, dir);
        if !fv.is_finite() || !dg.is_finite() {
            fv = f64::INFINITY;
            dg = f64::NAN;
        }
        (Point { x, f: fv, g }, dg)
    };
    let mut best: Option<Point> = None;
    let keep_best = |p: &Point, best: &mut Option<Point>| {
        if p.f < cur.f && best.as_ref().is_none_or(|b| p.f < b.f) {
            *best = Some(Point {
                x: p.x.clone(),
                f: p.f,
                g: p.g.clone(),
            });
        }
    };
    let wolfe_armijo = |alpha: f64, fv: f64| fv <= cur.f + cfg.c1 * alpha * d0;
    let curvature = |dg: f64| dg.abs() <= -cfg.c2 * d0;

    // Bracket phase.
    let (mut lo, mut f_lo, mut d_lo) = (0.0, cur.f, d0);
    let mut alpha = alpha0;
    let mut budget = cfg.max_line_search;
    let (mut hi, mut f_hi, mut d_hi);
    loop {
        if budget == 0 {
            return (None, best);
        }
        budget -= 1;
        let (p, dg) = eval(alpha);
        keep_best(&p, &mut best);
        if !p.f.is_finite() {
            // Overflow: retreat towards the last good step.
            hi = alpha;
            f_hi = f64::INFINITY;
            d_hi = f64::NAN;
            break;
        }
        if !wolfe_armijo(alpha, p.f) || (lo > 0.0 && p.f >= f_lo) {
            hi = alpha;
            f_hi = p.f;
            d_hi = dg;
            break;
        }
        if curvature(dg) {
            return (Some(p), best);
        }
        if dg >= 0.0 {
            hi = lo;
            f_hi = f_lo;
            d_hi = d_lo;
            lo = alpha;
            f_lo = p.f;
            d_lo = dg;
            break;
        }
        lo = alpha;
        f_lo = p.f;
        d_lo = dg;
        alpha *= 2.0;
    }

    // Zoom phase on [lo, hi] (either order).
    while budget > 0 {
        budget -= 1;
        let trial = if f_hi.is_finite() && d_hi.is_finite() {
            cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
        } else {
            0.5 * (lo + hi)
        };
        if (trial - lo).abs() < 1e-16 * lo.abs().max(1.0) {
            break;
        }
        let (p, dg) = eval(trial);
        keep_best(&p, &mut best);
        if !p.f.is_finite() || !wolfe_armijo(trial, p.f) || p.f >= f_lo {
            hi = trial;
            f_hi = p.f;
            d_hi = dg;
        } else {
            if curvature(dg) {
                return (Some(p), best);
            }
            if dg * (hi - lo) >= 0.0 {
                hi = lo;
                f_hi = f_lo;
                d_hi = d_lo;
            }
            lo = trial;
            f_lo = p.f;
            d_lo = dg;
        }
    }
    (None, best)
}

/// Minimises `f`, which returns the objective and its gradient, from `x0`
/// with the two-loop L-BFGS recursion and a strong Wolfe line search.
pub fn lbfgs_minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    cfg.validate()?;
    let n = x0.len();
    let tol = cfg.gradient_tolerance * (n as f64).sqrt();
    let (f0, g0) = f(x0);
    if !f0.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState("non-finite objective at the starting point".into()));
    }
    let mut cur = Point {
        x: x0.to_vec(),
        f: f0,
        g: g0,
    };
    let mut evals = 1;
    let mut history = vec![f0];
    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(cfg.memory);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(cfg.memory);
    let mut rho: Vec<f64> = Vec::with_capacity(cfg.memory);
    let mut iterations = 0;
    let termination = loop {
        let gnorm = norm(&cur.g);
        if gnorm < tol {
            break Termination::Converged;
        }
        if iterations >= cfg.max_iterations {
            break Termination::IterationCap;
        }
        // Two-loop recursion.
        let mut q = cur.g.clone();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = rho[i] * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = if m > 0 {
            dot(&s_hist[m - 1], &y_hist[m - 1]) / dot(&y_hist[m - 1], &y_hist[m - 1])
        } else {
            1.0
        };
        for qj in &mut q {
            *qj *= gamma;
        }
        for i in 0..m {
            let beta = rho[i] * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &cur.g) >= 0.0 {
            // Lost descent: restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            dir = cur.g.iter().map(|v| -v).collect();
        }
        let alpha0 = if s_hist.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let (accepted, best) = line_search(&mut f, &cur, &dir, alpha0, cfg, &mut evals);
        let failed = accepted.is_none();
        let Some(next) = accepted.or(best) else {
            break Termination::LineSearchFailed;
        };
        let s: Vec<f64> = next.x.iter().zip(&cur.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&cur.g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        cur = next;
        iterations += 1;
        history.push(cur.f);
        if failed {
            break Termination::LineSearchFailed;
        }
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho.push(1.0 / sy);
        }
    };
    Ok(LbfgsReport {
        gradient_norm: norm(&cur.g),
        x: cur.x,
        value: cur.f,
        iterations,
        evaluations: evals,
        termination,
        history,
    })
}

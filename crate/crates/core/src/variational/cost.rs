use super::lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsReport};
use super::models::ForecastModel;
use crate::diffcore::{evaluate_with_gradient, Graph, GradientResult, Var};
use crate::dynamics::NX;
use crate::error::{Error, Result};
use crate::kernels;
use crate::network::SurrogateModel;

fn check_window(model: &dyn ForecastModel, obs: &[Vec<f64>]) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::Config("assimilation window holds no observations".into()));
    }
    if obs.len() > model.max_window() {
        return Err(Error::HorizonExceeded {
            requested: obs.len() - 1,
            horizon: model.max_window() - 1,
        });
    }
    if let Some(y) = obs.iter().find(|y| y.len() != NX) {
        return Err(Error::Shape(format!("observation of length {}, expected {NX}", y.len())));
    }
    Ok(())
}

/// `0.5 ||x - xb||^2 / b^2` on the tape.
fn background_term(g: &mut Graph, x: Var, xb: &[f64], b: f64) -> Var {
    let c = g.constant(xb);
    let d = g.sub(x, c);
    let s = g.sum_squares(d);
    g.scale(s, 0.5 / (b * b))
}

/// Background spread of the fast block of a full two-scale control. The fast
/// variables are an order of magnitude smaller than the slow ones, and
/// sharing the slow `b` with them makes long windows fail to converge.
pub const FAST_CONTROL_SPREAD: f64 = 0.03;

/// Per-component control spread: `b` on the slow block, `FAST_CONTROL_SPREAD`
/// on any fast block.
pub fn control_spread(dim: usize, b: f64) -> Vec<f64> {
    (0..dim).map(|i| if i < NX { b } else { FAST_CONTROL_SPREAD }).collect()
}

/// State background term, with the fast block (if any) weighted by
/// `FAST_CONTROL_SPREAD`.
fn state_background_term(g: &mut Graph, x: Var, xb: &[f64], b: f64) -> Var {
    if xb.len() <= NX {
        return background_term(g, x, xb, b);
    }
    let xs = g.slice(x, 0, NX);
    let xf = g.slice(x, NX, xb.len() - NX);
    let js = background_term(g, xs, &xb[..NX], b);
    let jf = background_term(g, xf, &xb[NX..], FAST_CONTROL_SPREAD);
    g.add(js, jf)
}

/// `0.5 sum_l ||y_l - H M_l(x)||^2` on the tape.
fn observation_term(
    g: &mut Graph,
    model: &dyn ForecastModel,
    x: Var,
    params: Option<Var>,
    obs: &[Vec<f64>],
) -> Result<Var> {
    let traj = model.observed_trajectory_graph(g, x, params, obs.len())?;
    let mut total: Option<Var> = None;
    for (y, hx) in obs.iter().zip(traj) {
        let yc = g.constant(y);
        let d = g.sub(yc, hx);
        let s = g.sum_squares(d);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    let total = total.expect("window is non-empty");
    Ok(g.scale(total, 0.5))
}

/// Taped strong-constraint cost
/// `0.5 ||x - xb||^2 / b^2 + 0.5 sum_{l<L} ||y_l - H M_l(x)||^2`
/// (fast components of a two-scale control use `FAST_CONTROL_SPREAD`).
pub fn sc4dvar_cost_graph(
    g: &mut Graph,
    model: &dyn ForecastModel,
    x: Var,
    xb: &[f64],
    b: f64,
    obs: &[Vec<f64>],
) -> Result<Var> {
    let jb = state_background_term(g, x, xb, b);
    let jo = observation_term(g, model, x, None, obs)?;
    Ok(g.add(jb, jo))
}

/// Strong-constraint cost and its gradient with respect to `"state"`.
pub fn sc4dvar_gradient(
    model: &dyn ForecastModel,
    x: &[f64],
    xb: &[f64],
    b: f64,
    obs: &[Vec<f64>],
) -> Result<GradientResult> {
    check_window(model, obs)?;
    if x.len() != model.state_dim() || xb.len() != x.len() {
        return Err(Error::Shape(format!(
            "control of length {} and background of length {} for a model of dimension {}",
            x.len(),
            xb.len(),
            model.state_dim()
        )));
    }
    let mut err = None;
    let r = evaluate_with_gradient(&[("state", x)], |g, v| {
        sc4dvar_cost_graph(g, model, v[0], xb, b, obs).unwrap_or_else(|e| {
            err = Some(e);
            g.constant(&[0.0])
        })
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(r),
    }
}

pub fn sc4dvar_cost(model: &dyn ForecastModel, x: &[f64], xb: &[f64], b: f64, obs: &[Vec<f64>]) -> Result<f64> {
    Ok(sc4dvar_gradient(model, x, xb, b, obs)?.value)
}

/// Taped weak-constraint cost with network parameters in the control:
/// `0.5 ||p - pb||^2 / bp^2 + 0.5 ||x - xb||^2 / bx^2 + 0.5 sum_l ||y_l - M_l(p, x)||^2`.
#[allow(clippy::too_many_arguments)]
pub fn wc4dvar_cost_graph(
    g: &mut Graph,
    model: &SurrogateModel,
    p: Var,
    x: Var,
    pb: &[f64],
    xb: &[f64],
    bp: f64,
    bx: f64,
    obs: &[Vec<f64>],
) -> Result<Var> {
    let jp = background_term(g, p, pb, bp);
    let jx = background_term(g, x, xb, bx);
    let jo = observation_term(g, model, x, Some(p), obs)?;
    let jb = g.add(jp, jx);
    Ok(g.add(jb, jo))
}

/// Weak-constraint cost and its gradients with respect to `"params"` and
/// `"state"`.
#[allow(clippy::too_many_arguments)]
pub fn wc4dvar_gradient(
    model: &SurrogateModel,
    p: &[f64],
    x: &[f64],
    pb: &[f64],
    xb: &[f64],
    bp: f64,
    bx: f64,
    obs: &[Vec<f64>],
) -> Result<GradientResult> {
    check_window(model, obs)?;
    if p.len() != model.params.len() || pb.len() != p.len() || x.len() != NX || xb.len() != NX {
        return Err(Error::Shape("weak-constraint control does not match the surrogate".into()));
    }
    let mut err = None;
    let r = evaluate_with_gradient(&[("params", p), ("state", x)], |g, v| {
        wc4dvar_cost_graph(g, model, v[0], v[1], pb, xb, bp, bx, obs).unwrap_or_else(|e| {
            err = Some(e);
            g.constant(&[0.0])
        })
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(r),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn wc4dvar_cost(
    model: &SurrogateModel,
    p: &[f64],
    x: &[f64],
    pb: &[f64],
    xb: &[f64],
    bp: f64,
    bx: f64,
    obs: &[Vec<f64>],
) -> Result<f64> {
    Ok(wc4dvar_gradient(model, p, x, pb, xb, bp, bx, obs)?.value)
}

fn penalise_nonfinite(value: f64, grad: Vec<f64>, nonfinite: bool) -> (f64, Vec<f64>) {
    if nonfinite {
        (f64::INFINITY, grad)
    } else {
        (value, grad)
    }
}

/// Minimises the strong-constraint cost from the background, in the
/// preconditioned variable `v = (x - xb) / s` with `s = control_spread(b)`.
pub fn sc4dvar_analysis(
    model: &dyn ForecastModel,
    xb: &[f64],
    b: f64,
    obs: &[Vec<f64>],
    cfg: &LbfgsConfig,
) -> Result<(Vec<f64>, LbfgsReport)> {
    check_window(model, obs)?;
    let spread = control_spread(xb.len(), b);
    let unscale = |v: &[f64], x: &mut [f64]| {
        for (((x, xb), v), s) in x.iter_mut().zip(xb).zip(v).zip(&spread) {
            *x = xb + s * v;
        }
    };
    let mut x = vec![0.0; xb.len()];
    let objective = |v: &[f64]| {
        unscale(v, &mut x);
        match sc4dvar_gradient(model, &x, xb, b, obs) {
            Ok(r) => {
                let gv: Vec<f64> = r.grad("state").iter().zip(&spread).map(|(g, s)| s * g).collect();
                penalise_nonfinite(r.value, gv, r.nonfinite)
            }
            Err(_) => (f64::INFINITY, vec![f64::NAN; v.len()]),
        }
    };
    let report = lbfgs_minimize(objective, &vec![0.0; xb.len()], cfg)?;
    let mut xa = vec![0.0; xb.len()];
    unscale(&report.x, &mut xa);
    Ok((xa, report))
}

/// Joint analysis of parameters and state, preconditioned block-wise by
/// `bp` and `bx`. Returns `(pa, xa, report)`.
#[allow(clippy::too_many_arguments)]
pub fn wc4dvar_analysis(
    model: &SurrogateModel,
    pb: &[f64],
    xb: &[f64],
    bp: f64,
    bx: f64,
    obs: &[Vec<f64>],
    cfg: &LbfgsConfig,
) -> Result<(Vec<f64>, Vec<f64>, LbfgsReport)> {
    check_window(model, obs)?;
    let np = pb.len();
    let mut p = vec![0.0; np];
    let mut x = vec![0.0; xb.len()];
    let objective = |v: &[f64]| {
        kernels::axpy(pb, &v[..np], bp, &mut p);
        kernels::axpy(xb, &v[np..], bx, &mut x);
        match wc4dvar_gradient(model, &p, &x, pb, xb, bp, bx, obs) {
            Ok(r) => {
                let mut gv: Vec<f64> = r.grad("params").iter().map(|g| bp * g).collect();
                gv.extend(r.grad("state").iter().map(|g| bx * g));
                penalise_nonfinite(r.value, gv, r.nonfinite)
            }
            Err(_) => (f64::INFINITY, vec![f64::NAN; v.len()]),
        }
    };
    let report = lbfgs_minimize(objective, &vec![0.0; np + xb.len()], cfg)?;
    let mut pa = vec![0.0; np];
    let mut xa = vec![0.0; xb.len()];
    kernels::axpy(pb, &report.x[..np], bp, &mut pa);
    kernels::axpy(xb, &report.x[np..], bx, &mut xa);
    Ok((pa, xa, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{central_difference, max_relative_error};
    use crate::dynamics::{spin_up, ModelConfig};
    use crate::network::{init_params, SurrogateKind};
    use crate::seed;
    use crate::variational::models::{PhysicalModel, TrueModel};
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn attractor_state(s: u64) -> Vec<f64> {
        let full = spin_up(&ModelConfig::l96(), s, 10.0).unwrap();
        full.as_slice().to_vec()
    }

    fn noise(rng: &mut seed::Rng, n: usize, sd: f64) -> Vec<f64> {
        (0..n).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
    }

    fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    #[test]
    fn zero_at_consistent_point() {
        let m = PhysicalModel::default();
        let x = attractor_state(1);
        let obs: Vec<Vec<f64>> = (0..6).map(|l| m.forecast(&x, l).unwrap()).collect();
        assert_eq!(sc4dvar_cost(&m, &x, &x, 0.3, &obs).unwrap(), 0.0);
    }

    #[test]
    fn single_batch_unit_spread_minimiser_is_midpoint() {
        let m = PhysicalModel::default();
        let mut rng = seed::rng_from(2);
        let xb = attractor_state(2);
        let y = add(&xb, &noise(&mut rng, 36, 1.0));
        let (xa, rep) = sc4dvar_analysis(&m, &xb, 1.0, std::slice::from_ref(&y), &LbfgsConfig::default()).unwrap();
        for i in 0..36 {
            assert!((xa[i] - 0.5 * (xb[i] + y[i])).abs() < 1e-8);
        }
        assert!(rep.value <= rep.history[0]);
    }

    #[test]
    fn cost_matches_direct_summation() {
        let m = PhysicalModel::default();
        let mut rng = seed::rng_from(3);
        let x = attractor_state(3);
        let xb = add(&x, &noise(&mut rng, 36, 0.5));
        let obs: Vec<Vec<f64>> = (0..5).map(|_| noise(&mut rng, 36, 3.0)).collect();
        let b = 0.37;
        let mut expect = 0.0;
        for i in 0..36 {
            expect += 0.5 * (x[i] - xb[i]).powi(2) / (b * b);
        }
        for (l, y) in obs.iter().enumerate() {
            let hx = m.forecast(&x, l).unwrap();
            for i in 0..36 {
                expect += 0.5 * (y[i] - hx[i]).powi(2);
            }
        }
        let got = sc4dvar_cost(&m, &x, &xb, b, &obs).unwrap();
        assert!((got - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn sc_gradient_matches_finite_differences() {
        let mut rng = seed::rng_from(4);
        let m = PhysicalModel::default();
        for k in 0..3 {
            let x = attractor_state(10 + k);
            let xb = add(&x, &noise(&mut rng, 36, 0.5));
            let obs: Vec<Vec<f64>> = (0..6).map(|l| add(&m.forecast(&x, l).unwrap(), &noise(&mut rng, 36, 1.0))).collect();
            let x0 = add(&x, &noise(&mut rng, 36, 0.2));
            let r = sc4dvar_gradient(&m, &x0, &xb, 0.4, &obs).unwrap();
            let fd = central_difference(|q| sc4dvar_cost(&m, q, &xb, 0.4, &obs).unwrap(), &x0, 1e-5);
            let e = max_relative_error(r.grad("state"), &fd);
            assert!(e < 1e-6, "{e}");
        }
        let tm = TrueModel::default();
        let full = spin_up(&ModelConfig::l05iii(), 5, 5.0).unwrap().as_slice().to_vec();
        let obs: Vec<Vec<f64>> = (0..3).map(|_| add(&full[..36], &noise(&mut rng, 36, 1.0))).collect();
        let r = sc4dvar_gradient(&tm, &full, &full, 0.3, &obs).unwrap();
        let fd = central_difference(|q| sc4dvar_cost(&tm, q, &full, 0.3, &obs).unwrap(), &full, 1e-5);
        // Entries near zero are dominated by rounding; compare the slow block
        // and the overall scale.
        assert!(max_relative_error(&r.grad("state")[..36], &fd[..36]) < 1e-6);
    }

    fn perturbed_surrogate(kind: SurrogateKind, s: u64) -> SurrogateModel {
        let spec = kind.spec();
        let mut p = init_params(&spec, s);
        let mut rng = seed::rng_from(s);
        for v in p.as_mut_slice() {
            *v += rng.random_range(-0.05..0.05);
        }
        SurrogateModel::new(kind.mode(6), spec, p).unwrap()
    }

    #[test]
    fn wc_gradient_matches_finite_differences() {
        let mut rng = seed::rng_from(6);
        let m = perturbed_surrogate(SurrogateKind::TcCnnC, 6);
        let x = attractor_state(7);
        let xb = add(&x, &noise(&mut rng, 36, 0.3));
        let p = m.params.as_slice().to_vec();
        let pb = add(&p, &noise(&mut rng, p.len(), 0.01));
        let obs: Vec<Vec<f64>> = (0..6).map(|_| add(&x, &noise(&mut rng, 36, 1.0))).collect();
        let r = wc4dvar_gradient(&m, &p, &x, &pb, &xb, 0.05, 0.3, &obs).unwrap();
        let fdx = central_difference(|q| wc4dvar_cost(&m, &p, q, &pb, &xb, 0.05, 0.3, &obs).unwrap(), &x, 1e-5);
        let fdp = central_difference(|q| wc4dvar_cost(&m, q, &x, &pb, &xb, 0.05, 0.3, &obs).unwrap(), &p, 1e-5);
        assert!(max_relative_error(r.grad("state"), &fdx) < 1e-6);
        assert!(max_relative_error(r.grad("params"), &fdp) < 1e-6);
    }

    #[test]
    fn wc_zero_at_consistent_point_and_tight_prior_freezes_params() {
        let m = perturbed_surrogate(SurrogateKind::TcCnnB, 8);
        let x = attractor_state(8);
        let obs: Vec<Vec<f64>> = (0..6).map(|l| m.tc_resolvent(&x, l).unwrap()).collect();
        let p = m.params.as_slice().to_vec();
        assert_eq!(wc4dvar_cost(&m, &p, &x, &p, &x, 0.01, 0.3, &obs).unwrap(), 0.0);

        let mut rng = seed::rng_from(9);
        let noisy: Vec<Vec<f64>> = obs.iter().map(|y| add(y, &noise(&mut rng, 36, 1.0))).collect();
        let (pa, _, _) = wc4dvar_analysis(&m, &p, &x, 1e-8, 0.3, &noisy, &LbfgsConfig::default()).unwrap();
        let drift = pa.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "{drift}");
    }

    #[test]
    fn rc_window_beyond_horizon_is_rejected() {
        let m = SurrogateModel::zero(SurrogateKind::RcCnnA, 6).unwrap();
        let x = attractor_state(1);
        let obs = vec![x.clone(); 8];
        assert!(matches!(
            sc4dvar_cost(&m, &x, &x, 1.0, &obs),
            Err(Error::HorizonExceeded { .. })
        ));
        assert!(sc4dvar_cost(&m, &x, &x, 1.0, &obs[..7]).is_ok());
    }
}

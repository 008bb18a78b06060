use std::sync::Arc;

use crate::diffcore::{rk4_step_graph, Graph, Var};
use crate::dynamics::{ModelConfig, Rk4, Tendency, TwoScale, L96, NX, OBS_INTERVAL};
use crate::error::{Error, Result};
use crate::kernels::{self, TwoScaleCoeffs};
use crate::network::{CnnVars, SurrogateModel};

/// A forecast model usable inside 4D-Var. States may carry unobserved
/// components; the observed part is always the leading `NX` slow variables.
pub trait ForecastModel: Sync {
    fn name(&self) -> String;

    fn state_dim(&self) -> usize;

    /// Plain forecast over `obs_steps` observation intervals.
    fn forecast(&self, x: &[f64], obs_steps: usize) -> Result<Vec<f64>>;

    /// Taped observed (slow) states at observation steps `0..count`.
    /// `params`, when given, replaces the model's own network parameters.
    fn observed_trajectory_graph(
        &self,
        g: &mut Graph,
        x: Var,
        params: Option<Var>,
        count: usize,
    ) -> Result<Vec<Var>>;

    /// Forecasts at observation steps `0..count` from `x`.
    fn forecast_series(&self, x: &[f64], count: usize) -> Result<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
        for _ in 0..count {
            let next = match out.last() {
                Some(prev) => self.forecast(prev, 1)?,
                None => x.to_vec(),
            };
            out.push(next);
        }
        Ok(out)
    }

    /// Longest window the model can forecast over without chaining.
    fn max_window(&self) -> usize {
        usize::MAX
    }
}

fn steps_per_obs(dt: f64) -> usize {
    (OBS_INTERVAL / dt).round() as usize
}

fn observed_rk4<F>(g: &mut Graph, x: Var, dt: f64, per_obs: usize, count: usize, slow: bool, mut f: F) -> Vec<Var>
where
    F: FnMut(&mut Graph, Var) -> Var,
{
    let mut out = Vec::with_capacity(count);
    let mut cur = x;
    for l in 0..count {
        if l > 0 {
            for _ in 0..per_obs {
                cur = rk4_step_graph(g, cur, dt, &mut f);
            }
        }
        out.push(if slow { g.slice(cur, 0, NX) } else { cur });
    }
    out
}

fn check_dim(name: &str, x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::Shape(format!("{name} expects a state of length {dim}, got {}", x.len())));
    }
    Ok(())
}

/// The uncorrected physical L96 model.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalModel {
    pub cfg: ModelConfig,
}

impl Default for PhysicalModel {
    fn default() -> Self {
        Self { cfg: ModelConfig::l96() }
    }
}

impl PhysicalModel {
    fn tendency(&self) -> L96 {
        L96 {
            n: self.cfg.nx,
            forcing: self.cfg.forcing,
        }
    }
}

impl ForecastModel for PhysicalModel {
    fn name(&self) -> String {
        "physical".into()
    }
    fn state_dim(&self) -> usize {
        self.cfg.nx
    }
    fn forecast(&self, x: &[f64], obs_steps: usize) -> Result<Vec<f64>> {
        check_dim("physical model", x, self.cfg.nx)?;
        let mut out = x.to_vec();
        let n = obs_steps * steps_per_obs(self.cfg.dt);
        Rk4::new(x.len()).advance(&self.tendency(), &mut out, self.cfg.dt, n);
        Ok(out)
    }
    fn observed_trajectory_graph(&self, g: &mut Graph, x: Var, _: Option<Var>, count: usize) -> Result<Vec<Var>> {
        let (n, f) = (self.cfg.nx, self.cfg.forcing);
        Ok(observed_rk4(g, x, self.cfg.dt, steps_per_obs(self.cfg.dt), count, false, |g, s| {
            g.l96(s, n, f)
        }))
    }
}

/// Physical model with a shared fourth-order polynomial correction of the
/// tendency at every site.
#[derive(Debug, Clone, PartialEq)]
pub struct WilksModel {
    pub cfg: ModelConfig,
    /// Polynomial coefficients, constant term first.
    pub coeffs: [f64; 5],
}

impl WilksModel {
    pub fn new(coeffs: [f64; 5]) -> Self {
        Self {
            cfg: ModelConfig::l96(),
            coeffs,
        }
    }
}

/// `l96(x) + poly(x)`, elementwise.
#[derive(Debug, Clone, Copy)]
pub struct WilksTendency<'a> {
    pub n: usize,
    pub forcing: f64,
    pub coeffs: &'a [f64],
}

impl Tendency for WilksTendency<'_> {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval(&self, s: &[f64], out: &mut [f64]) {
        kernels::l96(s, self.n, self.forcing, out);
        for (o, &x) in out.iter_mut().zip(s) {
            *o += kernels::poly(self.coeffs, x);
        }
    }
}

impl ForecastModel for WilksModel {
    fn name(&self) -> String {
        "wilks".into()
    }
    fn state_dim(&self) -> usize {
        self.cfg.nx
    }
    fn forecast(&self, x: &[f64], obs_steps: usize) -> Result<Vec<f64>> {
        check_dim("polynomial model", x, self.cfg.nx)?;
        let f = WilksTendency {
            n: self.cfg.nx,
            forcing: self.cfg.forcing,
            coeffs: &self.coeffs,
        };
        let mut out = x.to_vec();
        Rk4::new(x.len()).advance(&f, &mut out, self.cfg.dt, obs_steps * steps_per_obs(self.cfg.dt));
        Ok(out)
    }
    fn observed_trajectory_graph(&self, g: &mut Graph, x: Var, _: Option<Var>, count: usize) -> Result<Vec<Var>> {
        let (n, f, c) = (self.cfg.nx, self.cfg.forcing, self.coeffs);
        Ok(observed_rk4(g, x, self.cfg.dt, steps_per_obs(self.cfg.dt), count, false, |g, s| {
            let p = g.l96(s, n, f);
            let q = g.poly(s, &c);
            g.add(p, q)
        }))
    }
}

/// The two-scale truth model; its control includes the fast variables.
#[derive(Debug, Clone)]
pub struct TrueModel {
    pub cfg: ModelConfig,
    coeffs: Arc<TwoScaleCoeffs>,
}

impl Default for TrueModel {
    fn default() -> Self {
        Self::new(ModelConfig::l05iii())
    }
}

impl TrueModel {
    pub fn new(cfg: ModelConfig) -> Self {
        let coeffs = Arc::new(TwoScale::new(&cfg).coeffs);
        Self { cfg, coeffs }
    }
}

impl ForecastModel for TrueModel {
    fn name(&self) -> String {
        "true".into()
    }
    fn state_dim(&self) -> usize {
        self.cfg.state_dim()
    }
    fn forecast(&self, x: &[f64], obs_steps: usize) -> Result<Vec<f64>> {
        check_dim("true model", x, self.state_dim())?;
        let f = TwoScale {
            coeffs: (*self.coeffs).clone(),
        };
        let mut out = x.to_vec();
        Rk4::new(x.len()).advance(&f, &mut out, self.cfg.dt, obs_steps * steps_per_obs(self.cfg.dt));
        Ok(out)
    }
    fn observed_trajectory_graph(&self, g: &mut Graph, x: Var, _: Option<Var>, count: usize) -> Result<Vec<Var>> {
        let c = Arc::clone(&self.coeffs);
        Ok(observed_rk4(g, x, self.cfg.dt, steps_per_obs(self.cfg.dt), count, true, |g, s| {
            g.two_scale(s, &c)
        }))
    }
}

impl ForecastModel for SurrogateModel {
    fn name(&self) -> String {
        self.spec.name.clone()
    }
    fn state_dim(&self) -> usize {
        self.dim()
    }
    fn forecast(&self, x: &[f64], obs_steps: usize) -> Result<Vec<f64>> {
        check_dim("surrogate", x, self.dim())?;
        SurrogateModel::forecast(self, x, obs_steps * steps_per_obs(self.physical.dt))
    }
    fn observed_trajectory_graph(&self, g: &mut Graph, x: Var, params: Option<Var>, count: usize) -> Result<Vec<Var>> {
        let p = match params {
            Some(p) => p,
            None => g.constant(self.params.as_slice()),
        };
        let vars = CnnVars::new(g, &self.spec, p);
        self.trajectory_graph(g, &vars, x, count)
    }
    fn forecast_series(&self, x: &[f64], count: usize) -> Result<Vec<Vec<f64>>> {
        check_dim("surrogate", x, self.dim())?;
        let per_obs = steps_per_obs(self.physical.dt);
        let crate::network::Mode::Rc { horizon } = self.mode else {
            let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
            for _ in 0..count {
                let next = match out.last() {
                    Some(prev) => SurrogateModel::forecast(self, prev, per_obs)?,
                    None => x.to_vec(),
                };
                out.push(next);
            }
            return Ok(out);
        };
        // Resolvent correction: restart from the last whole-horizon state.
        let mut anchor = x.to_vec();
        let mut anchor_steps = 0;
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let steps = k * per_obs;
            while steps - anchor_steps >= horizon {
                anchor = self.rc_resolvent(&anchor, horizon)?;
                anchor_steps += horizon;
            }
            let within = steps - anchor_steps;
            out.push(if within == 0 { anchor.clone() } else { self.rc_resolvent(&anchor, within)? });
        }
        Ok(out)
    }
    fn max_window(&self) -> usize {
        match self.mode {
            crate::network::Mode::Rc { horizon } => horizon + 1,
            crate::network::Mode::Tc => usize::MAX,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::vjp;
    use crate::dynamics::{resolvent, spin_up};

    fn taped_final(model: &dyn ForecastModel, x: &[f64], count: usize) -> Vec<f64> {
        vjp(&[("x", x)], &vec![0.0; NX], |g, v| {
            *model.observed_trajectory_graph(g, v[0], None, count).unwrap().last().unwrap()
        })
        .unwrap()
        .output
    }

    #[test]
    fn tapes_agree_with_plain_forecasts() {
        let truth = spin_up(&ModelConfig::l05iii(), 1, 5.0).unwrap();
        let full = truth.as_slice().to_vec();
        let slow = full[..NX].to_vec();
        let tm = TrueModel::default();
        assert_eq!(taped_final(&tm, &full, 4), tm.forecast(&full, 3).unwrap()[..NX].to_vec());
        let pm = PhysicalModel::default();
        assert_eq!(taped_final(&pm, &slow, 7), pm.forecast(&slow, 6).unwrap());
        assert_eq!(
            pm.forecast(&slow, 6).unwrap(),
            resolvent(&L96 { n: 36, forcing: 8.0 }, &slow, 0.05, 6)
        );
        let wm = WilksModel::new([0.3, -0.1, 0.01, 0.0, -0.0005]);
        assert_eq!(taped_final(&wm, &slow, 5), wm.forecast(&slow, 4).unwrap());
    }

    #[test]
    fn series_matches_direct_forecasts() {
        let full = spin_up(&ModelConfig::l05iii(), 2, 2.0).unwrap().as_slice().to_vec();
        let slow = full[..NX].to_vec();
        let spec = crate::network::SurrogateKind::RcCnnA.spec();
        let rc = SurrogateModel::new(
            crate::network::Mode::Rc { horizon: 4 },
            spec.clone(),
            crate::network::init_params(&spec, 1),
        )
        .unwrap();
        let mut p = rc.params.clone();
        for v in p.as_mut_slice() {
            *v += 0.01;
        }
        let rc = rc.with_params(p).unwrap();
        let models: Vec<(Box<dyn ForecastModel>, &[f64])> = vec![
            (Box::new(PhysicalModel::default()), &slow),
            (Box::new(WilksModel::new([0.1, 0.0, 0.01, 0.0, 0.0])), &slow),
            (Box::new(TrueModel::default()), &full),
            (Box::new(rc), &slow),
        ];
        for (m, x) in &models {
            let series = m.forecast_series(x, 11).unwrap();
            for (k, s) in series.iter().enumerate() {
                assert_eq!(s, &m.forecast(x, k).unwrap(), "{} at {k}", m.name());
            }
        }
    }

    #[test]
    fn zero_polynomial_is_the_physical_model() {
        let x: Vec<f64> = (0..36).map(|i| (i as f64 * 0.7).sin() * 4.0 + 2.0).collect();
        let wm = WilksModel::new([0.0; 5]);
        let pm = PhysicalModel::default();
        assert_eq!(wm.forecast(&x, 10).unwrap(), pm.forecast(&x, 10).unwrap());
    }

    #[test]
    fn wrong_state_length_is_rejected() {
        assert!(TrueModel::default().forecast(&[0.0; 36], 1).is_err());
        assert!(PhysicalModel::default().forecast(&[0.0; 35], 1).is_err());
    }
}

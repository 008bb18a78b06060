use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{cnn_apply, CnnSpec, CnnVars, ParamVector};
use crate::diffcore::{rk4_step_graph, Graph, Var};
use crate::dynamics::{ModelConfig, Rk4, Tendency, L96};
use crate::error::{Error, Result};
use crate::kernels;

/// How the network output enters the physical model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Mode {
    /// Added to the resolvent over `horizon` physical steps; sub-horizon
    /// forecasts scale the correction linearly in time.
    Rc { horizon: usize },
    /// Added to the tendencies and integrated with the physical scheme.
    Tc,
}

/// The three surrogate configurations studied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurrogateKind {
    #[serde(rename = "rc-cnn-a")]
    RcCnnA,
    #[serde(rename = "tc-cnn-b")]
    TcCnnB,
    #[serde(rename = "tc-cnn-c")]
    TcCnnC,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 3] = [Self::RcCnnA, Self::TcCnnB, Self::TcCnnC];

    pub fn spec(self) -> CnnSpec {
        match self {
            Self::RcCnnA => CnnSpec::cnn_a(),
            Self::TcCnnB => CnnSpec::cnn_b(),
            Self::TcCnnC => CnnSpec::cnn_c(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::RcCnnA => "rc-cnn-a",
            Self::TcCnnB => "tc-cnn-b",
            Self::TcCnnC => "tc-cnn-c",
        }
    }

    /// Mode for a correction trained over `horizon` physical steps.
    pub fn mode(self, horizon: usize) -> Mode {
        match self {
            Self::RcCnnA => Mode::Rc { horizon },
            Self::TcCnnB | Self::TcCnnC => Mode::Tc,
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SurrogateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown surrogate {s:?}")))
    }
}

/// Physical tendency plus network correction, row by row.
#[derive(Debug, Clone, Copy)]
pub struct TcTendency<'a> {
    pub n: usize,
    pub forcing: f64,
    pub spec: &'a CnnSpec,
    pub params: &'a [f64],
}

impl Tendency for TcTendency<'_> {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval(&self, s: &[f64], out: &mut [f64]) {
        let mut corr = vec![0.0; s.len()];
        kernels::l96(s, self.n, self.forcing, out);
        cnn_apply(self.spec, self.params, s, self.n, &mut corr);
        for (o, c) in out.iter_mut().zip(&corr) {
            *o += c;
        }
    }
}

/// Hybrid model: the physical L96 model corrected by a network.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub mode: Mode,
    pub physical: ModelConfig,
    pub spec: CnnSpec,
    pub params: ParamVector,
}

impl SurrogateModel {
    pub fn new(mode: Mode, spec: CnnSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} expects {} parameters, got {}",
                spec.name,
                spec.param_count(),
                params.len()
            )));
        }
        if let Mode::Rc { horizon: 0 } = mode {
            return Err(Error::Config("resolvent correction needs a horizon of at least one step".into()));
        }
        Ok(Self {
            mode,
            physical: ModelConfig::l96(),
            spec,
            params,
        })
    }

    /// Zero-parameter surrogate of the given kind.
    pub fn zero(kind: SurrogateKind, horizon: usize) -> Result<Self> {
        let spec = kind.spec();
        let params = ParamVector::zeros(&spec);
        Self::new(kind.mode(horizon), spec, params)
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::new(self.mode, self.spec.clone(), params)
    }

    pub fn dim(&self) -> usize {
        self.physical.nx
    }

    fn l96(&self) -> L96 {
        L96 {
            n: self.physical.nx,
            forcing: self.physical.forcing,
        }
    }

    fn tc(&self) -> TcTendency<'_> {
        TcTendency {
            n: self.physical.nx,
            forcing: self.physical.forcing,
            spec: &self.spec,
            params: self.params.as_slice(),
        }
    }

    fn check_rows(&self, x: &[f64]) -> Result<()> {
        let n = self.physical.nx;
        if x.is_empty() || !x.len().is_multiple_of(n) {
            return Err(Error::Shape(format!("state length {} is not a multiple of {n}", x.len())));
        }
        Ok(())
    }

    /// Network correction for each row of `x`.
    pub fn correction(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_rows(x)?;
        let mut out = vec![0.0; x.len()];
        cnn_apply(&self.spec, self.params.as_slice(), x, self.physical.nx, &mut out);
        Ok(out)
    }

    /// `M^p_l(x) + (l / horizon) F(x)`; fails beyond the horizon.
    pub fn rc_resolvent(&self, x: &[f64], l: usize) -> Result<Vec<f64>> {
        let Mode::Rc { horizon } = self.mode else {
            return Err(Error::Config("rc_resolvent called on a tendency-corrected model".into()));
        };
        if l > horizon {
            return Err(Error::HorizonExceeded { requested: l, horizon });
        }
        let corr = self.correction(x)?;
        let mut phys = x.to_vec();
        Rk4::new(x.len()).advance(&self.l96(), &mut phys, self.physical.dt, l);
        let mut out = vec![0.0; x.len()];
        kernels::axpy(&phys, &corr, l as f64 / horizon as f64, &mut out);
        Ok(out)
    }

    /// `l` RK4 steps of the corrected tendency.
    pub fn tc_resolvent(&self, x: &[f64], l: usize) -> Result<Vec<f64>> {
        if self.mode != Mode::Tc {
            return Err(Error::Config("tc_resolvent called on a resolvent-corrected model".into()));
        }
        self.check_rows(x)?;
        let mut out = x.to_vec();
        Rk4::new(x.len()).advance(&self.tc(), &mut out, self.physical.dt, l);
        Ok(out)
    }

    /// `l`-step prediction within one correction horizon.
    pub fn resolvent(&self, x: &[f64], l: usize) -> Result<Vec<f64>> {
        match self.mode {
            Mode::Rc { .. } => self.rc_resolvent(x, l),
            Mode::Tc => self.tc_resolvent(x, l),
        }
    }

    /// Forecast over any number of steps; resolvent-corrected models chain
    /// whole horizons and finish with a partial one.
    pub fn forecast(&self, x: &[f64], steps: usize) -> Result<Vec<f64>> {
        match self.mode {
            Mode::Tc => self.tc_resolvent(x, steps),
            Mode::Rc { horizon } => {
                let mut cur = x.to_vec();
                let mut left = steps;
                while left >= horizon {
                    cur = self.rc_resolvent(&cur, horizon)?;
                    left -= horizon;
                }
                if left > 0 {
                    cur = self.rc_resolvent(&cur, left)?;
                }
                Ok(cur)
            }
        }
    }

    /// States at steps `0..count` from `x`.
    pub fn trajectory(&self, x: &[f64], count: usize) -> Result<Vec<Vec<f64>>> {
        self.check_rows(x)?;
        let mut out = Vec::with_capacity(count);
        match self.mode {
            Mode::Tc => {
                let mut rk = Rk4::new(x.len());
                let mut cur = x.to_vec();
                for l in 0..count {
                    if l > 0 {
                        rk.step(&self.tc(), &mut cur, self.physical.dt);
                    }
                    out.push(cur.clone());
                }
            }
            Mode::Rc { horizon } => {
                if count > horizon + 1 {
                    return Err(Error::HorizonExceeded {
                        requested: count - 1,
                        horizon,
                    });
                }
                let corr = self.correction(x)?;
                let mut rk = Rk4::new(x.len());
                let mut phys = x.to_vec();
                for l in 0..count {
                    if l > 0 {
                        rk.step(&self.l96(), &mut phys, self.physical.dt);
                    }
                    let mut y = vec![0.0; x.len()];
                    kernels::axpy(&phys, &corr, l as f64 / horizon as f64, &mut y);
                    out.push(y);
                }
            }
        }
        Ok(out)
    }

    /// Taped states at steps `0..count` from the rows of `x`, with the
    /// network parameters taken from `vars`.
    pub fn trajectory_graph(&self, g: &mut Graph, vars: &CnnVars, x: Var, count: usize) -> Result<Vec<Var>> {
        let n = self.physical.nx;
        let f = self.physical.forcing;
        let dt = self.physical.dt;
        let mut out = Vec::with_capacity(count);
        match self.mode {
            Mode::Tc => {
                let spec = &self.spec;
                let mut cur = x;
                for l in 0..count {
                    if l > 0 {
                        cur = rk4_step_graph(g, cur, dt, |g, s| {
                            let p = g.l96(s, n, f);
                            let c = vars.apply(g, spec, s, n);
                            g.add(p, c)
                        });
                    }
                    out.push(cur);
                }
            }
            Mode::Rc { horizon } => {
                if count > horizon + 1 {
                    return Err(Error::HorizonExceeded {
                        requested: count - 1,
                        horizon,
                    });
                }
                let corr = vars.apply(g, &self.spec, x, n);
                let mut phys = x;
                for l in 0..count {
                    if l > 0 {
                        phys = rk4_step_graph(g, phys, dt, |g, s| g.l96(s, n, f));
                    }
                    out.push(g.axpy(phys, corr, l as f64 / horizon as f64));
                }
            }
        }
        Ok(out)
    }

    /// Taped `l`-step prediction.
    pub fn resolvent_graph(&self, g: &mut Graph, vars: &CnnVars, x: Var, l: usize) -> Result<Var> {
        let traj = self.trajectory_graph(g, vars, x, l + 1)?;
        Ok(traj[l])
    }
}

//! Lorenz models: the two-scale truth (L05III) and the one-scale physical
//! model (L96), RK4 integration, and climatological utilities.

mod climate;
mod integrate;

pub use climate::{
    benettin, climatological_ensemble, leading_lyapunov, model_variability, sample_trajectory,
    spin_up, LyapunovEstimate, SPIN_UP_DURATION,
};
pub use integrate::{resolvent, rk4_step, Rk4};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, TwoScaleCoeffs};

/// Number of slow variables.
pub const NX: usize = 36;
/// Fast variables per slow variable in the truth model.
pub const NU: usize = 10;
/// Observation interval, also the physical model's integration step.
pub const OBS_INTERVAL: f64 = 0.05;
/// Leading Lyapunov exponent of the truth model, used for the lead-time axis.
pub const LYAPUNOV_EXPONENT: f64 = 1.3775;
/// Climatological standard deviation of the truth model's slow variables.
pub const MODEL_VARIABILITY: f64 = 3.537;

/// Parameters of a Lorenz model. The physical model leaves the fast-scale
/// entries unused.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub nx: usize,
    pub nu: usize,
    pub forcing: f64,
    pub coupling: f64,
    pub time_ratio: f64,
    pub space_ratio: f64,
    pub dt: f64,
}

impl ModelConfig {
    pub fn l05iii() -> Self {
        Self {
            nx: NX,
            nu: NU,
            forcing: 10.0,
            coupling: 1.0,
            time_ratio: 10.0,
            space_ratio: 10.0,
            dt: 0.005,
        }
    }

    pub fn l96() -> Self {
        Self {
            nx: NX,
            nu: 0,
            forcing: 8.0,
            coupling: 0.0,
            time_ratio: 0.0,
            space_ratio: 0.0,
            dt: 0.05,
        }
    }

    pub fn is_two_scale(&self) -> bool {
        self.nu > 0
    }

    pub fn state_dim(&self) -> usize {
        self.nx * (1 + self.nu)
    }

    /// Integration steps per observation interval.
    pub fn steps_per_obs(&self) -> usize {
        (OBS_INTERVAL / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.nx < 4 {
            return Err(Error::Config(format!("need at least 4 slow variables, got {}", self.nx)));
        }
        if self.is_two_scale() && self.nx * self.nu < 4 {
            return Err(Error::Config("fast ring too short".into()));
        }
        Ok(())
    }

    /// The tendency field described by this configuration.
    pub fn tendency(&self) -> ModelTendency {
        if self.is_two_scale() {
            ModelTendency::TwoScale(TwoScale::new(self))
        } else {
            ModelTendency::L96(L96 {
                n: self.nx,
                forcing: self.forcing,
            })
        }
    }
}

/// Slow-variable state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowState(Vec<f64>);

impl SlowState {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.len() != NX {
            return Err(Error::InvalidState(format!("expected {NX} slow variables, got {}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite slow variable".into()));
        }
        Ok(Self(x))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Two-scale state stored contiguously as `[x; u]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    data: Vec<f64>,
    nx: usize,
}

impl FullState {
    pub fn new(x: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        if x.len() != NX || u.len() != NX * NU {
            return Err(Error::InvalidState(format!(
                "expected {} slow and {} fast variables, got {} and {}",
                NX,
                NX * NU,
                x.len(),
                u.len()
            )));
        }
        let mut data = x;
        data.extend_from_slice(&u);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite entry".into()));
        }
        Ok(Self { data, nx: NX })
    }

    pub(crate) fn from_raw(data: Vec<f64>, nx: usize) -> Self {
        Self { data, nx }
    }

    pub fn x(&self) -> &[f64] {
        &self.data[..self.nx]
    }

    pub fn u(&self) -> &[f64] {
        &self.data[self.nx..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `Π(x, u) = x`
pub fn project_slow(s: &FullState) -> SlowState {
    SlowState(s.x().to_vec())
}

/// `(x, 0)`
pub fn embed(x: &SlowState) -> FullState {
    let mut data = x.0.clone();
    data.resize(NX * (1 + NU), 0.0);
    FullState { data, nx: NX }
}

/// A time-derivative field `ds/dt = f(s)`.
pub trait Tendency: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, s: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L96 {
    pub n: usize,
    pub forcing: f64,
}

impl Tendency for L96 {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval(&self, s: &[f64], out: &mut [f64]) {
        kernels::l96(s, self.n, self.forcing, out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoScale {
    pub coeffs: TwoScaleCoeffs,
}

impl TwoScale {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            coeffs: TwoScaleCoeffs::new(
                cfg.nx,
                cfg.nu,
                cfg.forcing,
                cfg.coupling,
                cfg.time_ratio,
                cfg.space_ratio,
            ),
        }
    }
}

impl Tendency for TwoScale {
    fn dim(&self) -> usize {
        self.coeffs.dim()
    }
    fn eval(&self, s: &[f64], out: &mut [f64]) {
        kernels::two_scale(&self.coeffs, s, out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelTendency {
    L96(L96),
    TwoScale(TwoScale),
}

impl Tendency for ModelTendency {
    fn dim(&self) -> usize {
        match self {
            Self::L96(t) => t.dim(),
            Self::TwoScale(t) => t.dim(),
        }
    }
    fn eval(&self, s: &[f64], out: &mut [f64]) {
        match self {
            Self::L96(t) => t.eval(s, out),
            Self::TwoScale(t) => t.eval(s, out),
        }
    }
}

/// Adapter turning a closure into a [`Tendency`].
pub struct FnTendency<F> {
    dim: usize,
    f: F,
}

impl<F> FnTendency<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Tendency for FnTendency<F>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, s: &[f64], out: &mut [f64]) {
        (self.f)(s, out)
    }
}

/// Convenience wrapper: `dx/dt` of the physical model.
pub fn l96_tendency(x: &SlowState, forcing: f64) -> SlowState {
    let mut out = vec![0.0; x.0.len()];
    kernels::l96(&x.0, x.0.len(), forcing, &mut out);
    SlowState(out)
}

/// Convenience wrapper: `(dx/dt, du/dt)` of the truth model.
pub fn l05iii_tendency(s: &FullState, cfg: &ModelConfig) -> FullState {
    let t = TwoScale::new(cfg);
    let mut out = vec![0.0; s.data.len()];
    t.eval(&s.data, &mut out);
    FullState {
        data: out,
        nx: s.nx,
    }
}

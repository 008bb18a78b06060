use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cost::{sc4dvar_analysis, wc4dvar_analysis};
use super::lbfgs::{LbfgsConfig, Termination};
use super::models::{ForecastModel, PhysicalModel};
use super::schedule::Schedule;
use crate::dynamics::{sample_trajectory, spin_up, ModelConfig, MODEL_VARIABILITY, NX, SPIN_UP_DURATION};
use crate::error::{Error, Result};
use crate::network::{Mode, ParamVector, SurrogateModel};
use crate::seed;
use crate::training::{tmse, PairDataset};

/// Fast-variable spread of the initial background for full-state models.
pub const FAST_BACKGROUND_SPREAD: f64 = 0.1;
/// A run is declared divergent after this many consecutive bad cycles.
pub const DIVERGENCE_PATIENCE: usize = 10;
/// sRMSE threshold for divergence, in units of the model variability.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// A truth-model run: the full initial state and the slow variables at
/// every observation time.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRun {
    pub start: Vec<f64>,
    pub slow: Vec<Vec<f64>>,
}

impl TruthRun {
    pub fn len(&self) -> usize {
        self.slow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slow.is_empty()
    }
}

/// Spins up the truth model and records `n_obs` slow snapshots, one per
/// observation interval, the first being the spun-up state.
pub fn generate_truth(seed_value: u64, n_obs: usize) -> Result<TruthRun> {
    let cfg = ModelConfig::l05iii();
    let start = spin_up(&cfg, seed::child_seed(seed_value, "truth", 0), SPIN_UP_DURATION)?;
    let full = sample_trajectory(&cfg, start.as_slice(), cfg.steps_per_obs(), n_obs)?;
    Ok(TruthRun {
        start: start.as_slice().to_vec(),
        slow: full.into_iter().map(|s| s[..NX].to_vec()).collect(),
    })
}

fn gaussian(rng: &mut seed::Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// `y_k = x_k + v_k` with standard normal noise on every slow variable.
pub fn generate_observations(truth: &[Vec<f64>], seed_value: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::child_rng(seed_value, "obs", 0);
    truth
        .iter()
        .map(|x| {
            let v = gaussian(&mut rng, x.len(), 1.0);
            x.iter().zip(v).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// Perturbed truth at the first observation time. Slow variables get unit
/// Gaussian noise; fast variables, when the model carries them, get
/// `FAST_BACKGROUND_SPREAD`.
pub fn initial_background(truth: &TruthRun, state_dim: usize, seed_value: u64) -> Result<Vec<f64>> {
    if state_dim != NX && state_dim != truth.start.len() {
        return Err(Error::Shape(format!("no truth counterpart for a state of length {state_dim}")));
    }
    let mut rng = seed::child_rng(seed_value, "background", 0);
    let mut xb: Vec<f64> = truth.start[..state_dim].to_vec();
    let slow = gaussian(&mut rng, NX, 1.0);
    for (x, e) in xb.iter_mut().zip(slow) {
        *x += e;
    }
    if state_dim > NX {
        let fast = gaussian(&mut rng, state_dim - NX, FAST_BACKGROUND_SPREAD);
        for (x, e) in xb[NX..].iter_mut().zip(fast) {
            *x += e;
        }
    }
    Ok(xb)
}

/// Root-mean-square difference over the slow variables.
pub fn slow_rmse(x: &[f64], truth: &[f64]) -> f64 {
    let s: f64 = x[..NX].iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    (s / NX as f64).sqrt()
}

/// One assimilation cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    /// Observation index at the start of the window.
    pub start: usize,
    pub background: Vec<f64>,
    pub analysis: Vec<f64>,
    pub background_params: Option<Vec<f64>>,
    pub analysis_params: Option<Vec<f64>>,
    pub iterations: usize,
    pub termination: Termination,
    /// Analysis error at the window start.
    pub srmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged { cycle: usize },
    NonFinite { cycle: usize },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, Self::Completed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScConfig {
    /// Observations per window, `L`.
    pub window: usize,
    pub b: f64,
    #[serde(default)]
    pub lbfgs: LbfgsConfig,
}

#[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
impl ScConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.b > 0.0) {
            return Err(Error::Config(format!("window {} and spread {} must be positive", self.window, self.b)));
        }
        self.lbfgs.validate()
    }
}

/// Output of a cycled run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScRun {
    pub window: usize,
    pub records: Vec<CycleRecord>,
    pub status: RunStatus,
    /// Background for the cycle after the last one.
    pub next_background: Vec<f64>,
}

impl ScRun {
    /// Mean analysis error over cycles from `skip` onwards.
    pub fn srmse(&self, skip: usize) -> f64 {
        mean_srmse(&self.records, skip)
    }

    /// Slow part of the analysis at each window start.
    pub fn analysis_series(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.analysis[..NX].to_vec()).collect()
    }
}

pub(crate) fn mean_srmse(records: &[CycleRecord], skip: usize) -> f64 {
    let kept = &records[skip.min(records.len())..];
    if kept.is_empty() {
        return f64::NAN;
    }
    kept.iter().map(|r| r.srmse).sum::<f64>() / kept.len() as f64
}

fn check_streams(obs: &[Vec<f64>], truth: &[Vec<f64>], window: usize, n_cycles: usize) -> Result<()> {
    let needed = n_cycles * window;
    let got = obs.len().min(truth.len());
    if got < needed {
        return Err(Error::SeriesTooShort { needed, got });
    }
    Ok(())
}

/// Tracks consecutive cycles above the divergence threshold.
#[derive(Default)]
struct DivergenceWatch {
    run: usize,
}

impl DivergenceWatch {
    fn diverged(&mut self, srmse: f64) -> bool {
        if srmse > DIVERGENCE_FACTOR * MODEL_VARIABILITY {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= DIVERGENCE_PATIENCE
    }
}

/// Cycled strong-constraint 4D-Var over consecutive windows of `cfg.window`
/// observations. The next background is the model forecast of the
/// analysis over one window.
pub fn run_sc4dvar(
    model: &dyn ForecastModel,
    obs: &[Vec<f64>],
    truth: &[Vec<f64>],
    xb0: &[f64],
    cfg: &ScConfig,
    n_cycles: usize,
) -> Result<ScRun> {
    cfg.validate()?;
    check_streams(obs, truth, cfg.window, n_cycles)?;
    if xb0.len() != model.state_dim() {
        return Err(Error::Shape(format!(
            "{} expects a background of length {}, got {}",
            model.name(),
            model.state_dim(),
            xb0.len()
        )));
    }
    let l = cfg.window;
    let mut records = Vec::with_capacity(n_cycles);
    let mut xb = xb0.to_vec();
    let mut watch = DivergenceWatch::default();
    let mut status = RunStatus::Completed;
    for c in 0..n_cycles {
        let start = c * l;
        let (xa, report) = sc4dvar_analysis(model, &xb, cfg.b, &obs[start..start + l], &cfg.lbfgs)?;
        let next = model.forecast(&xa, l)?;
        let srmse = slow_rmse(&xa, &truth[start]);
        records.push(CycleRecord {
            start,
            background: std::mem::replace(&mut xb, next),
            analysis: xa,
            background_params: None,
            analysis_params: None,
            iterations: report.iterations,
            termination: report.termination,
            srmse,
        });
        if !srmse.is_finite() || xb.iter().any(|v| !v.is_finite()) {
            status = RunStatus::NonFinite { cycle: c };
            break;
        }
        if watch.diverged(srmse) {
            status = RunStatus::Diverged { cycle: c };
            break;
        }
    }
    Ok(ScRun {
        window: l,
        records,
        status,
        next_background: xb,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WcConfig {
    pub window: usize,
    pub schedule: Schedule,
    #[serde(default)]
    pub lbfgs: LbfgsConfig,
    /// Strong-constraint cycles with the physical model before switching.
    pub n_preliminary: usize,
    pub preliminary_b: f64,
    /// Cycles between test-MSE snapshots; zero disables them.
    pub tmse_every: usize,
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
impl WcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.preliminary_b > 0.0) {
            return Err(Error::Config("window and preliminary spread must be positive".into()));
        }
        self.schedule.validate()?;
        self.lbfgs.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WcRun {
    pub preliminary: ScRun,
    pub records: Vec<CycleRecord>,
    pub status: RunStatus,
    /// `(cycle, tMSE)` of the evolving model, the first entry before any
    /// joint cycle.
    pub tmse: Vec<(usize, f64)>,
    pub final_params: Vec<f64>,
}

impl WcRun {
    pub fn srmse(&self, skip: usize) -> f64 {
        mean_srmse(&self.records, skip)
    }

    /// Trailing moving average of the per-cycle sRMSE.
    pub fn moving_srmse(&self, width: usize) -> Vec<f64> {
        moving_average(&self.records.iter().map(|r| r.srmse).collect::<Vec<_>>(), width)
    }
}

/// Trailing moving average; entry `i` averages the last `min(i + 1, width)`
/// values.
pub fn moving_average(xs: &[f64], width: usize) -> Vec<f64> {
    let width = width.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= width {
            sum -= xs[i - width];
        }
        out.push(sum / (i + 1).min(width) as f64);
    }
    out
}

/// Online learning: `cfg.n_preliminary` strong-constraint cycles with the
/// physical model, then `n_cycles` joint state/parameter cycles with the
/// surrogate. Parameters are forecast by persistence, states by the
/// surrogate with the analysed parameters.
pub fn run_wc4dvar(
    surrogate: &SurrogateModel,
    obs: &[Vec<f64>],
    truth: &[Vec<f64>],
    xb0: &[f64],
    cfg: &WcConfig,
    n_cycles: usize,
    test: Option<&PairDataset>,
) -> Result<WcRun> {
    cfg.validate()?;
    if surrogate.mode != Mode::Tc {
        return Err(Error::Config("online learning needs a tendency-corrected surrogate".into()));
    }
    let l = cfg.window;
    check_streams(obs, truth, l, cfg.n_preliminary + n_cycles)?;
    let sc = ScConfig {
        window: l,
        b: cfg.preliminary_b,
        lbfgs: cfg.lbfgs,
    };
    let preliminary = run_sc4dvar(&PhysicalModel::default(), obs, truth, xb0, &sc, cfg.n_preliminary)?;
    let mut run = WcRun {
        status: preliminary.status,
        preliminary,
        records: Vec::with_capacity(n_cycles),
        tmse: Vec::new(),
        final_params: surrogate.params.as_slice().to_vec(),
    };
    if !run.status.is_completed() {
        return Ok(run);
    }
    let mut model = surrogate.clone();
    let mut xb = run.preliminary.next_background.clone();
    let mut pb = surrogate.params.as_slice().to_vec();
    let mut watch = DivergenceWatch::default();
    let snapshot = |m: &SurrogateModel, c: usize, out: &mut Vec<(usize, f64)>| -> Result<()> {
        if let Some(test) = test {
            if cfg.tmse_every > 0 && c.is_multiple_of(cfg.tmse_every) {
                out.push((c, tmse(m, test)?));
            }
        }
        Ok(())
    };
    snapshot(&model, 0, &mut run.tmse)?;
    for t in 0..n_cycles {
        let start = (cfg.n_preliminary + t) * l;
        let (pa, xa, report) = wc4dvar_analysis(
            &model,
            &pb,
            &xb,
            cfg.schedule.bp(t),
            cfg.schedule.bx(t),
            &obs[start..start + l],
            &cfg.lbfgs,
        )?;
        let srmse = slow_rmse(&xa, &truth[start]);
        let finite = srmse.is_finite() && pa.iter().all(|v| v.is_finite());
        if finite {
            model = model.with_params(ParamVector::from_vec(&model.spec, pa.clone())?)?;
        }
        let next = if finite { model.forecast(&xa, l)? } else { xa.clone() };
        run.records.push(CycleRecord {
            start,
            background: std::mem::replace(&mut xb, next),
            analysis: xa,
            background_params: Some(std::mem::replace(&mut pb, pa.clone())),
            analysis_params: Some(pa),
            iterations: report.iterations,
            termination: report.termination,
            srmse,
        });
        if !finite || xb.iter().any(|v| !v.is_finite()) {
            run.status = RunStatus::NonFinite { cycle: t };
            break;
        }
        if watch.diverged(srmse) {
            run.status = RunStatus::Diverged { cycle: t };
            break;
        }
        snapshot(&model, t + 1, &mut run.tmse)?;
    }
    run.final_params = model.params.into_vec();
    Ok(run)
}

/// Default grid for tuning the background spread.
pub fn default_b_grid() -> Vec<f64> {
    (1..=20).map(|k| 0.05 * k as f64).collect()
}

/// Pilot runs over `grid`; returns the spread with the lowest sRMSE after
/// `skip` cycles and the score of each candidate (infinite when a pilot
/// fails).
#[allow(clippy::too_many_arguments)]
pub fn tune_b(
    model: &dyn ForecastModel,
    obs: &[Vec<f64>],
    truth: &[Vec<f64>],
    xb0: &[f64],
    window: usize,
    grid: &[f64],
    n_cycles: usize,
    skip: usize,
    lbfgs: &LbfgsConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Config("empty spread grid".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &b in grid {
        let cfg = ScConfig { window, b, lbfgs: *lbfgs };
        let run = run_sc4dvar(model, obs, truth, xb0, &cfg, n_cycles)?;
        let s = if run.status.is_completed() { run.srmse(skip) } else { f64::INFINITY };
        scores.push((b, if s.is_finite() { s } else { f64::INFINITY }));
    }
    let best = scores
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("grid is non-empty")
        .0;
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, SurrogateKind};
    use crate::variational::models::TrueModel;

    fn physical_truth(s: u64, n: usize) -> Vec<Vec<f64>> {
        let cfg = ModelConfig::l96();
        let start = spin_up(&cfg, s, 10.0).unwrap();
        sample_trajectory(&cfg, start.as_slice(), 1, n).unwrap()
    }

    #[test]
    fn observation_noise_is_standard_normal() {
        let truth = vec![vec![0.0; NX]; 400];
        let y = generate_observations(&truth, 3);
        let all: Vec<f64> = y.concat();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / all.len() as f64;
        assert!(m.abs() < 0.03 && (v - 1.0).abs() < 0.03, "{m} {v}");
        assert_eq!(y, generate_observations(&truth, 3));
        assert_ne!(y, generate_observations(&truth, 4));
    }

    #[test]
    fn truth_run_is_seeded() {
        let a = generate_truth(1, 3).unwrap();
        assert_eq!(a, generate_truth(1, 3).unwrap());
        assert_eq!(a.start.len(), 396);
        assert_eq!(a.slow[0], a.start[..NX].to_vec());
        let xb = initial_background(&a, 396, 2).unwrap();
        let d_fast: f64 = xb[NX..].iter().zip(&a.start[NX..]).map(|(x, t)| (x - t).abs()).fold(0.0, f64::max);
        assert!(d_fast < 0.6 && d_fast > 0.0);
        assert!(initial_background(&a, 40, 2).is_err());
    }

    #[test]
    fn perfect_model_noiseless_obs_gives_small_error() {
        let truth = physical_truth(1, 64);
        let model = PhysicalModel::default();
        let mut cfg = ScConfig {
            window: 4,
            b: 0.05,
            lbfgs: LbfgsConfig::default(),
        };
        let run = run_sc4dvar(&model, &truth, &truth, &truth[0], &cfg, 16).unwrap();
        assert!(run.status.is_completed());
        assert!(run.srmse(0) < 1e-6, "{}", run.srmse(0));
        // A wrong first background is corrected when the prior is weak.
        let xb0: Vec<f64> = truth[0].iter().map(|v| v + 0.5).collect();
        cfg.b = 5.0;
        let run = run_sc4dvar(&model, &truth, &truth, &xb0, &cfg, 16).unwrap();
        assert!(run.srmse(8) < 1e-3, "{}", run.srmse(8));
    }

    #[test]
    fn records_satisfy_cycling_identities() {
        let truth = physical_truth(2, 60);
        let obs = generate_observations(&truth, 5);
        let xb0 = obs[0].clone();
        let cfg = ScConfig {
            window: 3,
            b: 0.4,
            lbfgs: LbfgsConfig::default(),
        };
        let model = PhysicalModel::default();
        let run = run_sc4dvar(&model, &obs, &truth, &xb0, &cfg, 20).unwrap();
        assert_eq!(run.records.len(), 20);
        for w in run.records.windows(2) {
            assert_eq!(w[1].background, model.forecast(&w[0].analysis, 3).unwrap());
            assert_eq!(w[1].start, w[0].start + 3);
        }
        let recomputed: f64 = run.records[5..].iter().map(|r| slow_rmse(&r.analysis, &truth[r.start])).sum::<f64>() / 15.0;
        assert_eq!(run.srmse(5), recomputed);
        assert_eq!(run, run_sc4dvar(&model, &obs, &truth, &xb0, &cfg, 20).unwrap());
        assert!(matches!(
            run_sc4dvar(&model, &obs, &truth, &xb0, &cfg, 21),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn true_model_cycles_on_full_state() {
        let truth = generate_truth(7, 8).unwrap();
        let obs = generate_observations(&truth.slow, 7);
        let xb0 = initial_background(&truth, 396, 7).unwrap();
        let cfg = ScConfig {
            window: 2,
            b: 0.5,
            lbfgs: LbfgsConfig {
                max_iterations: 10,
                ..LbfgsConfig::default()
            },
        };
        let run = run_sc4dvar(&TrueModel::default(), &obs, &truth.slow, &xb0, &cfg, 3).unwrap();
        assert_eq!(run.records[0].analysis.len(), 396);
        assert!(run.srmse(0) < slow_rmse(&xb0, &truth.slow[0]));
    }

    #[test]
    fn frozen_parameters_reduce_to_strong_constraint() {
        let truth = physical_truth(3, 80);
        let obs = generate_observations(&truth, 9);
        let xb0 = obs[0].clone();
        let spec = SurrogateKind::TcCnnB.spec();
        let sur = SurrogateModel::new(Mode::Tc, spec.clone(), init_params(&spec, 1)).unwrap();
        let cfg = WcConfig {
            window: 4,
            schedule: Schedule::Fixed { bx: 0.4, bp: 1e-9 },
            lbfgs: LbfgsConfig::default(),
            n_preliminary: 4,
            preliminary_b: 0.4,
            tmse_every: 0,
        };
        let wc = run_wc4dvar(&sur, &obs, &truth, &xb0, &cfg, 8, None).unwrap();
        assert!(wc.status.is_completed());
        let sc_cfg = ScConfig {
            window: 4,
            b: 0.4,
            lbfgs: LbfgsConfig::default(),
        };
        // Zero output layer: the surrogate is the physical model.
        let sc = run_sc4dvar(&PhysicalModel::default(), &obs, &truth, &xb0, &sc_cfg, 12).unwrap();
        assert_eq!(wc.preliminary.records, sc.records[..4].to_vec());
        for (a, b) in wc.records.iter().zip(&sc.records[4..]) {
            let d = a.analysis.iter().zip(&b.analysis).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-4, "{d}");
        }
        let drift = wc
            .final_params
            .iter()
            .zip(sur.params.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6);
    }

    #[test]
    fn online_learning_rejects_resolvent_correction() {
        let truth = physical_truth(4, 20);
        let sur = SurrogateModel::zero(SurrogateKind::RcCnnA, 4).unwrap();
        let cfg = WcConfig {
            window: 4,
            schedule: Schedule::CnnB,
            lbfgs: LbfgsConfig::default(),
            n_preliminary: 0,
            preliminary_b: 0.4,
            tmse_every: 0,
        };
        assert!(run_wc4dvar(&sur, &truth, &truth, &truth[0], &cfg, 2, None).is_err());
    }

    #[test]
    fn moving_average_oracle() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn divergence_needs_consecutive_cycles() {
        let mut w = DivergenceWatch::default();
        for _ in 0..9 {
            assert!(!w.diverged(1e3));
        }
        assert!(!w.diverged(1.0));
        for _ in 0..9 {
            assert!(!w.diverged(1e3));
        }
        assert!(w.diverged(1e3));
    }

    #[test]
    fn tuning_picks_the_grid_minimum() {
        let truth = physical_truth(5, 40);
        let obs = generate_observations(&truth, 1);
        let (best, scores) = tune_b(
            &PhysicalModel::default(),
            &obs,
            &truth,
            &obs[0],
            4,
            &[0.1, 0.5, 1.0],
            10,
            2,
            &LbfgsConfig::default(),
        )
        .unwrap();
        let min = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        assert_eq!(scores.iter().find(|s| s.0 == best).unwrap().1, min);
    }
}

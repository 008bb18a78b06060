//! Experiment drivers: forecast skill, window-length and dataset-size
//! sweeps, multi-window training, and online learning runs.
//!
//! Every repetition draws its randomness from
//! `child_seed(seed, "rep", r)`, and roles inside a repetition use further
//! labelled children, so repetitions can run in parallel and still
//! reproduce bit for bit.

mod stats;

pub use stats::{mean_std, median, MetricSeries};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    climatological_ensemble, spin_up, ModelConfig, Rk4, LYAPUNOV_EXPONENT, MODEL_VARIABILITY, NX, OBS_INTERVAL,
    SPIN_UP_DURATION,
};
use crate::error::{Error, Result};
use crate::network::{init_params, SurrogateKind, SurrogateModel};
use crate::seed::child_seed;
use crate::training::{
    build_pairs, split_train_validation, tmse, train_offline, AdamConfig, PairDataset, Provenance, TrainReport,
};
use crate::variational::{
    generate_observations, generate_truth, initial_background, run_sc4dvar, run_wc4dvar, tune_b,
    ForecastModel, LbfgsConfig, PhysicalModel, RunStatus, TrueModel, ScConfig, Schedule, TruthRun, WcConfig, WcRun,
};

/// Window length used to build training data and for online learning.
pub const DEFAULT_WINDOW: usize = 6;
/// Spacing of climatological ensemble members, in time units.
pub const ENSEMBLE_SPACING: f64 = 1.0;
/// Width of the moving average applied to online sRMSE series.
pub const ONLINE_AVERAGE_WIDTH: usize = 128;

/// Seed of repetition `r`.
pub fn repetition_seed(seed: u64, r: usize) -> u64 {
    child_seed(seed, "rep", r as u64)
}

/// Run-size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => Err(Error::Config(format!("unknown scale {s:?} (expected desk or paper)"))),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

/// Counts that differ between quick runs and full reproduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub fs_members: usize,
    pub da_repetitions: usize,
    /// Observations averaged over after spin-up (cycles = this / L).
    pub da_average_obs: usize,
    pub da_spinup_obs: usize,
    /// Observations covered by each pilot run when tuning `b`.
    pub pilot_obs: usize,
    /// Full-state true-model baselines are costly: fewer repetitions and
    /// shorter runs.
    pub true_model_repetitions: usize,
    pub true_model_spinup_obs: usize,
    pub true_model_average_obs: usize,
    pub size_repetitions: usize,
    pub dataset_sizes: Vec<usize>,
    pub test_size: usize,
    pub epochs: usize,
    pub online_repetitions: usize,
    pub online_preliminary: usize,
    pub online_cycles: usize,
    pub online_test_size: usize,
    pub tmse_every: usize,
}

impl Preset {
    pub fn new(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self {
                fs_members: 256,
                da_repetitions: 4,
                da_average_obs: 8192,
                da_spinup_obs: 1024,
                pilot_obs: 1536,
                true_model_repetitions: 1,
                true_model_spinup_obs: 256,
                true_model_average_obs: 768,
                size_repetitions: 16,
                dataset_sizes: vec![1, 4, 16, 64, 256, 1024],
                test_size: 8192,
                epochs: 256,
                online_repetitions: 8,
                online_preliminary: 1024,
                online_cycles: 4096,
                online_test_size: 1024,
                tmse_every: 64,
            },
            Scale::Paper => Self {
                fs_members: 1024,
                da_repetitions: 16,
                da_average_obs: 8192,
                da_spinup_obs: 1024,
                pilot_obs: 3072,
                true_model_repetitions: 16,
                true_model_spinup_obs: 1024,
                true_model_average_obs: 8192,
                size_repetitions: 16,
                dataset_sizes: vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096, 8192],
                test_size: 8192,
                epochs: 1024,
                online_repetitions: 512,
                online_preliminary: 1024,
                online_cycles: 8192,
                online_test_size: 1024,
                tmse_every: 64,
            },
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            epochs: self.epochs,
            ..AdamConfig::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Forecast skill

/// Number of observation steps covering `lyapunov_times` Lyapunov times.
pub fn lead_steps(lyapunov_times: f64) -> usize {
    (lyapunov_times / (LYAPUNOV_EXPONENT * OBS_INTERVAL)).ceil() as usize
}

/// `members` full truth states spaced `ENSEMBLE_SPACING` apart on one
/// trajectory.
pub fn truth_ensemble(seed: u64, members: usize) -> Result<Vec<Vec<f64>>> {
    let cfg = ModelConfig::l05iii();
    let start = spin_up(&cfg, child_seed(seed, "ensemble", 0), SPIN_UP_DURATION)?;
    Ok(climatological_ensemble(&cfg, start.as_slice(), members, ENSEMBLE_SPACING)?
        .into_iter()
        .map(|s| s.as_slice().to_vec())
        .collect())
}

/// Slow truth forecasts at observation steps `0..=leads` for each member.
pub fn truth_forecasts(ensemble: &[Vec<f64>], leads: usize) -> Vec<Vec<Vec<f64>>> {
    let cfg = ModelConfig::l05iii();
    let f = cfg.tendency();
    let per_obs = cfg.steps_per_obs();
    ensemble
        .par_iter()
        .map(|x0| {
            let mut s = x0.clone();
            let mut rk = Rk4::new(s.len());
            let mut out = Vec::with_capacity(leads + 1);
            out.push(s[..NX].to_vec());
            for _ in 0..leads {
                rk.advance(&f, &mut s, cfg.dt, per_obs);
                out.push(s[..NX].to_vec());
            }
            out
        })
        .collect()
}

/// Forecast RMSE against the truth at every lead, per member. Models
/// with full-state dimension start from the full member, others from its
/// slow part. Axis: lead time in model time units.
pub fn forecast_skill(
    model: &dyn ForecastModel,
    ensemble: &[Vec<f64>],
    truth: &[Vec<Vec<f64>>],
    normalise: bool,
) -> Result<MetricSeries> {
    let leads = truth.first().map_or(0, |t| t.len());
    let per_member: Vec<Vec<f64>> = ensemble
        .par_iter()
        .zip(truth)
        .map(|(x0, t)| -> Result<Vec<f64>> {
            let start = if model.state_dim() == x0.len() { &x0[..] } else { &x0[..NX] };
            let series = model.forecast_series(start, leads)?;
            Ok(series
                .iter()
                .zip(t)
                .map(|(p, q)| {
                    let e = crate::variational::slow_rmse(p, q);
                    if normalise {
                        e / MODEL_VARIABILITY
                    } else {
                        e
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let axis = (0..leads).map(|k| k as f64 * OBS_INTERVAL).collect();
    let values = (0..leads).map(|k| per_member.iter().map(|m| m[k]).collect()).collect();
    Ok(MetricSeries::new(format!("fs-{}", model.name()), axis, values))
}

// ---------------------------------------------------------------------------
// Window-length sweeps

/// Settings of an sRMSE-versus-window sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaSweep {
    pub windows: Vec<usize>,
    pub repetitions: usize,
    pub average_obs: usize,
    pub spinup_obs: usize,
    pub pilot_obs: usize,
    /// Candidate spreads; a single value skips tuning.
    pub b_grid: Vec<f64>,
    #[serde(default)]
    pub lbfgs: LbfgsConfig,
}

impl DaSweep {
    pub fn from_preset(p: &Preset, windows: Vec<usize>) -> Self {
        Self {
            windows,
            repetitions: p.da_repetitions,
            average_obs: p.da_average_obs,
            spinup_obs: p.da_spinup_obs,
            pilot_obs: p.pilot_obs,
            b_grid: crate::variational::default_b_grid(),
            lbfgs: LbfgsConfig::default(),
        }
    }

    /// `(spin-up, averaged)` cycle counts at window `l`.
    pub fn cycles(&self, l: usize) -> (usize, usize) {
        (self.spinup_obs / l, (self.average_obs / l).max(1))
    }

    fn obs_needed(&self) -> usize {
        self.windows
            .iter()
            .map(|&l| {
                let (s, a) = self.cycles(l);
                ((s + a) * l).max(self.pilot_obs) + l
            })
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.contains(&0) || self.repetitions == 0 || self.b_grid.is_empty() {
            return Err(Error::Config("sweep needs windows >= 1, repetitions and spreads".into()));
        }
        Ok(())
    }
}

/// sRMSE and tuned spread of one model at one window in one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaScore {
    pub window: usize,
    pub b: f64,
    pub srmse: f64,
    pub status: RunStatus,
}

/// Cycled SC 4D-Var of `model` on a shared truth/observation stream for
/// every window of the sweep.
pub fn da_scores(model: &dyn ForecastModel, truth: &TruthRun, sweep: &DaSweep, rep_seed: u64) -> Result<Vec<DaScore>> {
    let obs = generate_observations(&truth.slow, rep_seed);
    let xb0 = initial_background(truth, model.state_dim(), rep_seed)?;
    sweep
        .windows
        .iter()
        .map(|&l| {
            let (spin, avg) = sweep.cycles(l);
            let b = if sweep.b_grid.len() == 1 {
                sweep.b_grid[0]
            } else {
                let pilot = (sweep.pilot_obs / l).max(2);
                tune_b(model, &obs, &truth.slow, &xb0, l, &sweep.b_grid, pilot, pilot / 4, &sweep.lbfgs)?.0
            };
            let cfg = ScConfig {
                window: l,
                b,
                lbfgs: sweep.lbfgs,
            };
            let run = run_sc4dvar(model, &obs, &truth.slow, &xb0, &cfg, spin + avg)?;
            let srmse = if run.status.is_completed() { run.srmse(spin) } else { f64::INFINITY };
            Ok(DaScore {
                window: l,
                b,
                srmse,
                status: run.status,
            })
        })
        .collect()
}

/// Truth stream used by the window sweeps of repetition seed `rep_seed`.
pub fn sweep_truth(sweep: &DaSweep, rep_seed: u64) -> Result<TruthRun> {
    generate_truth(child_seed(rep_seed, "da", 0), sweep.obs_needed())
}

/// sRMSE against window length for models built per repetition by
/// `make_models(rep, rep_seed)`. Returns one series per model plus the
/// raw scores `[rep][model][window]`.
/// Scores indexed `[repetition][model][window]`.
pub type RawScores = Vec<Vec<Vec<DaScore>>>;

pub fn sweep_window_length<F>(
    sweep: &DaSweep,
    seed: u64,
    make_models: F,
) -> Result<(Vec<MetricSeries>, RawScores)>
where
    F: Fn(usize, u64) -> Result<Vec<Box<dyn ForecastModel + Send>>> + Sync,
{
    sweep.validate()?;
    let per_rep: Vec<(Vec<String>, Vec<Vec<DaScore>>)> = (0..sweep.repetitions)
        .into_par_iter()
        .map(|r| {
            let rep_seed = repetition_seed(seed, r);
            let models = make_models(r, rep_seed)?;
            let truth = sweep_truth(sweep, rep_seed)?;
            let names = models.iter().map(|m| m.name()).collect();
            let scores = models
                .iter()
                .map(|m| da_scores(m.as_ref(), &truth, sweep, rep_seed))
                .collect::<Result<Vec<_>>>()?;
            Ok((names, scores))
        })
        .collect::<Result<_>>()?;
    let names = per_rep[0].0.clone();
    let axis: Vec<f64> = sweep.windows.iter().map(|&l| l as f64).collect();
    let series = names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let values = (0..sweep.windows.len())
                .map(|w| per_rep.iter().map(|(_, s)| s[m][w].srmse).collect())
                .collect();
            MetricSeries::new(format!("srmse-{name}"), axis.clone(), values)
        })
        .collect();
    Ok((series, per_rep.into_iter().map(|(_, s)| s).collect()))
}

/// sRMSE of the full-state true model with spread `b[i]` at `windows[i]`,
/// on the truth streams that window sweeps from `seed` use.
pub fn true_model_baseline(
    windows: &[usize],
    b: &[f64],
    repetitions: usize,
    spinup_obs: usize,
    average_obs: usize,
    lbfgs: &LbfgsConfig,
    seed: u64,
) -> Result<MetricSeries> {
    if windows.len() != b.len() {
        return Err(Error::Config("one spread per window".into()));
    }
    let mut values = Vec::with_capacity(windows.len());
    for (&l, &bl) in windows.iter().zip(b) {
        let sweep = DaSweep {
            windows: vec![l],
            repetitions,
            average_obs,
            spinup_obs,
            pilot_obs: 0,
            b_grid: vec![bl],
            lbfgs: *lbfgs,
        };
        let (series, _) = sweep_window_length(&sweep, seed, |_, _| {
            Ok(vec![Box::new(TrueModel::new(ModelConfig::l05iii())) as Box<dyn ForecastModel + Send>])
        })?;
        values.push(series[0].values[0].clone());
    }
    let axis = windows.iter().map(|&l| l as f64).collect();
    Ok(MetricSeries::new("srmse-true".into(), axis, values))
}

/// Spread for the physical model at window `window`, tuned on a pilot run
/// of `pilot_obs` observations drawn from its own truth stream.
pub fn tuned_physical_b(seed: u64, window: usize, pilot_obs: usize, lbfgs: &LbfgsConfig) -> Result<f64> {
    let cycles = (pilot_obs / window).max(2);
    let truth = generate_truth(child_seed(seed, "pilot", window as u64), cycles * window)?;
    let obs = generate_observations(&truth.slow, seed);
    let xb0 = initial_background(&truth, NX, seed)?;
    let grid = crate::variational::default_b_grid();
    Ok(tune_b(&PhysicalModel::default(), &obs, &truth.slow, &xb0, window, &grid, cycles, cycles / 4, lbfgs)?.0)
}

// ---------------------------------------------------------------------------
// Offline learning

/// Training material for one repetition: analysis and truth snapshots one
/// window apart, and a truth test set.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineData {
    pub window: usize,
    pub b: f64,
    pub analysis: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    pub test: PairDataset,
    pub physical_tmse: f64,
}

impl OfflineData {
    pub fn series(&self, provenance: Provenance) -> &[Vec<f64>] {
        match provenance {
            Provenance::Analysis => &self.analysis,
            Provenance::Truth => &self.truth,
        }
    }
}

/// Truth test pairs one window apart from an independent truth run.
pub fn truth_test_set(seed: u64, size: usize, window: usize) -> Result<PairDataset> {
    let truth = generate_truth(child_seed(seed, "test", 0), (size + 1) * window)?;
    let snaps: Vec<Vec<f64>> = truth.slow.iter().step_by(window).cloned().collect();
    build_pairs(&snaps, 1, window, Provenance::Truth)
}

/// Runs the physical-model DA that produces `snapshots` analyses (after a
/// spin-up of `spinup_obs / window` cycles), with the truth alongside.
pub fn prepare_offline_data(
    seed: u64,
    snapshots: usize,
    window: usize,
    test_size: usize,
    spinup_obs: usize,
    b: f64,
    lbfgs: &LbfgsConfig,
) -> Result<OfflineData> {
    let spin = spinup_obs / window;
    let cycles = spin + snapshots;
    let truth = generate_truth(child_seed(seed, "analysis", 0), cycles * window)?;
    let obs = generate_observations(&truth.slow, seed);
    let xb0 = initial_background(&truth, NX, seed)?;
    let cfg = ScConfig {
        window,
        b,
        lbfgs: *lbfgs,
    };
    let run = run_sc4dvar(&PhysicalModel::default(), &obs, &truth.slow, &xb0, &cfg, cycles)?;
    if !run.status.is_completed() {
        return Err(Error::InvalidState(format!("analysis run ended with {:?}", run.status)));
    }
    let test = truth_test_set(seed, test_size, window)?;
    let physical_tmse = tmse(&PhysicalModel::default(), &test)?;
    Ok(OfflineData {
        window,
        b,
        analysis: run.analysis_series()[spin..].to_vec(),
        truth: run.records[spin..].iter().map(|r| truth.slow[r.start].clone()).collect(),
        test,
        physical_tmse,
    })
}

/// A freshly initialised surrogate whose horizon spans `windows` windows.
pub fn initial_surrogate(kind: SurrogateKind, window: usize, windows: usize, seed: u64) -> Result<SurrogateModel> {
    let spec = kind.spec();
    let params = init_params(&spec, child_seed(seed, "init", 0));
    SurrogateModel::new(kind.mode(window * windows), spec, params)
}

/// Trains `kind` on `size` pairs `windows` windows apart.
pub fn train_surrogate(
    kind: SurrogateKind,
    data: &OfflineData,
    provenance: Provenance,
    size: usize,
    windows: usize,
    adam: &AdamConfig,
    seed: u64,
) -> Result<(SurrogateModel, TrainReport)> {
    let (train, val) = split_train_validation(data.series(provenance), size, windows, data.window, provenance)?;
    let model = initial_surrogate(kind, data.window, windows, seed)?;
    let report = train_offline(&model, &train, &val, adam, seed)?;
    if let Some(epoch) = report.halted_at {
        return Err(Error::TrainingDiverged { epoch });
    }
    let trained = model.with_params(report.params.clone())?;
    Ok((trained, report))
}

/// Test tMSE relative to the physical model on the same test set.
pub fn normalised_tmse(model: &SurrogateModel, data: &OfflineData) -> Result<f64> {
    Ok(tmse(model, &data.test)? / data.physical_tmse)
}

/// Settings of a dataset-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeSweep {
    pub kinds: Vec<SurrogateKind>,
    pub provenances: Vec<Provenance>,
    pub sizes: Vec<usize>,
    pub repetitions: usize,
    pub window: usize,
    pub test_size: usize,
    pub spinup_obs: usize,
    /// Spread of the physical-model DA that produces analyses.
    pub b: f64,
    pub adam: AdamConfig,
    #[serde(default)]
    pub lbfgs: LbfgsConfig,
}

/// Normalised tMSE per `(kind, provenance)` against dataset size, plus
/// the physical tMSE of each repetition's test set.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeSweepResult {
    pub series: Vec<(SurrogateKind, Provenance, MetricSeries)>,
    pub physical_tmse: Vec<f64>,
}

pub fn sweep_dataset_size(sweep: &SizeSweep, seed: u64) -> Result<SizeSweepResult> {
    let max = *sweep.sizes.iter().max().ok_or_else(|| Error::Config("no dataset sizes".into()))?;
    let combos: Vec<(SurrogateKind, Provenance)> = sweep
        .kinds
        .iter()
        .flat_map(|&k| sweep.provenances.iter().map(move |&p| (k, p)))
        .collect();
    let per_rep: Vec<(f64, Vec<Vec<f64>>)> = (0..sweep.repetitions)
        .into_par_iter()
        .map(|r| {
            let rep_seed = repetition_seed(seed, r);
            let data = prepare_offline_data(
                rep_seed,
                2 * (max + 1),
                sweep.window,
                sweep.test_size,
                sweep.spinup_obs,
                sweep.b,
                &sweep.lbfgs,
            )?;
            let scores = combos
                .iter()
                .map(|&(kind, prov)| {
                    sweep
                        .sizes
                        .iter()
                        .map(|&n| {
                            let (m, _) = train_surrogate(kind, &data, prov, n, 1, &sweep.adam, rep_seed)?;
                            normalised_tmse(&m, &data)
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((data.physical_tmse, scores))
        })
        .collect::<Result<_>>()?;
    let axis: Vec<f64> = sweep.sizes.iter().map(|&n| n as f64).collect();
    let series = combos
        .iter()
        .enumerate()
        .map(|(c, &(kind, prov))| {
            let values = (0..sweep.sizes.len())
                .map(|i| per_rep.iter().map(|(_, s)| s[c][i]).collect())
                .collect();
            (kind, prov, MetricSeries::new(format!("tmse-{kind}-{prov}"), axis.clone(), values))
        })
        .collect();
    Ok(SizeSweepResult {
        series,
        physical_tmse: per_rep.iter().map(|(p, _)| *p).collect(),
    })
}

// ---------------------------------------------------------------------------
// Online learning

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlinePlan {
    pub kind: SurrogateKind,
    pub window: usize,
    pub schedule: Schedule,
    pub repetitions: usize,
    pub n_preliminary: usize,
    pub n_cycles: usize,
    pub preliminary_b: f64,
    pub test_size: usize,
    pub tmse_every: usize,
    #[serde(default)]
    pub lbfgs: LbfgsConfig,
}

impl OnlinePlan {
    /// The published setup for `kind` with counts from `preset`.
    pub fn from_preset(kind: SurrogateKind, preset: &Preset, preliminary_b: f64) -> Result<Self> {
        let schedule = match kind {
            SurrogateKind::TcCnnB => Schedule::CnnB,
            SurrogateKind::TcCnnC => Schedule::CnnC,
            SurrogateKind::RcCnnA => {
                return Err(Error::Config("online learning uses tendency-corrected surrogates".into()));
            }
        };
        Ok(Self {
            kind,
            window: DEFAULT_WINDOW,
            schedule,
            repetitions: preset.online_repetitions,
            n_preliminary: preset.online_preliminary,
            n_cycles: preset.online_cycles,
            preliminary_b,
            test_size: preset.online_test_size,
            tmse_every: preset.tmse_every,
            lbfgs: LbfgsConfig::default(),
        })
    }
}

/// One online repetition with the normaliser of its test set.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRep {
    pub run: WcRun,
    pub physical_tmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineResult {
    pub reps: Vec<OnlineRep>,
    /// Moving-average sRMSE per cycle, statistics over repetitions.
    pub srmse: MetricSeries,
    /// Normalised tMSE per snapshot, statistics over repetitions.
    pub tmse: MetricSeries,
}

pub fn run_online_repetition(plan: &OnlinePlan, rep_seed: u64) -> Result<OnlineRep> {
    let l = plan.window;
    let truth = generate_truth(child_seed(rep_seed, "online", 0), (plan.n_preliminary + plan.n_cycles) * l)?;
    let obs = generate_observations(&truth.slow, rep_seed);
    let xb0 = initial_background(&truth, NX, rep_seed)?;
    let test = truth_test_set(rep_seed, plan.test_size, l)?;
    let physical_tmse = tmse(&PhysicalModel::default(), &test)?;
    let surrogate = initial_surrogate(plan.kind, l, 1, rep_seed)?;
    let cfg = WcConfig {
        window: l,
        schedule: plan.schedule,
        lbfgs: plan.lbfgs,
        n_preliminary: plan.n_preliminary,
        preliminary_b: plan.preliminary_b,
        tmse_every: plan.tmse_every,
    };
    let run = run_wc4dvar(&surrogate, &obs, &truth.slow, &xb0, &cfg, plan.n_cycles, Some(&test))?;
    Ok(OnlineRep { run, physical_tmse })
}

/// Online learning over `plan.repetitions` repetitions. Diverged
/// repetitions keep their partial series; statistics at each cycle use
/// the repetitions that reached it.
pub fn run_online_experiment(plan: &OnlinePlan, seed: u64) -> Result<OnlineResult> {
    let reps: Vec<OnlineRep> = (0..plan.repetitions)
        .into_par_iter()
        .map(|r| run_online_repetition(plan, repetition_seed(seed, r)))
        .collect::<Result<_>>()?;
    let smoothed: Vec<Vec<f64>> = reps.iter().map(|r| r.run.moving_srmse(ONLINE_AVERAGE_WIDTH)).collect();
    let srmse = ragged_series("online-srmse", plan.n_cycles, &smoothed, |c| c as f64);
    let tmse_rows: Vec<Vec<f64>> = reps
        .iter()
        .map(|r| r.run.tmse.iter().map(|(_, v)| v / r.physical_tmse).collect())
        .collect();
    let n_snap = plan.n_cycles.checked_div(plan.tmse_every).map_or(0, |n| n + 1);
    let every = plan.tmse_every;
    let tmse = ragged_series("online-tmse", n_snap, &tmse_rows, |i| (i * every) as f64);
    Ok(OnlineResult { reps, srmse, tmse })
}

fn ragged_series(name: &str, len: usize, rows: &[Vec<f64>], axis: impl Fn(usize) -> f64) -> MetricSeries {
    let axis: Vec<f64> = (0..len).map(axis).collect();
    let values = (0..len)
        .map(|i| rows.iter().filter_map(|r| r.get(i).copied()).collect())
        .collect();
    MetricSeries::new(name.to_string(), axis, values)
}

/// Mean of the per-cycle sRMSE of each repetition over joint cycles in
/// `from..`, averaged over repetitions.
pub fn online_tail_srmse(result: &OnlineResult, from: usize) -> f64 {
    let per_rep: Vec<f64> = result.reps.iter().map(|r| r.run.srmse(from)).filter(|v| v.is_finite()).collect();
    mean_std(&per_rep).0
}

// ---------------------------------------------------------------------------
// Multi-window training

/// Variant of the multi-window comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingVariant {
    pub provenance: Provenance,
    pub windows: usize,
}

impl TrainingVariant {
    pub fn label(&self) -> String {
        format!("{}-n{}", self.provenance, self.windows)
    }
}

pub const MULTI_DAW_VARIANTS: [TrainingVariant; 3] = [
    TrainingVariant {
        provenance: Provenance::Analysis,
        windows: 1,
    },
    TrainingVariant {
        provenance: Provenance::Analysis,
        windows: 2,
    },
    TrainingVariant {
        provenance: Provenance::Truth,
        windows: 1,
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDawResult {
    pub variants: Vec<TrainingVariant>,
    /// Forecast skill per variant, statistics over members of all
    /// repetitions.
    pub fs: Vec<MetricSeries>,
    /// sRMSE per variant (axis: variant index), statistics over repetitions.
    pub srmse: MetricSeries,
    pub tmse: MetricSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiDawPlan {
    pub kind: SurrogateKind,
    pub size: usize,
    pub repetitions: usize,
    pub members: usize,
    pub lead_steps: usize,
    pub test_size: usize,
    pub spinup_obs: usize,
    pub b: f64,
    pub adam: AdamConfig,
    pub sweep: DaSweep,
}

pub fn multi_daw_comparison(plan: &MultiDawPlan, seed: u64) -> Result<MultiDawResult> {
    let variants = MULTI_DAW_VARIANTS.to_vec();
    let max_windows = variants.iter().map(|v| v.windows).max().unwrap_or(1);
    #[allow(clippy::type_complexity)]
    let per_rep: Vec<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> = (0..plan.repetitions)
        .into_par_iter()
        .map(|r| {
            let rep_seed = repetition_seed(seed, r);
            let data = prepare_offline_data(
                rep_seed,
                2 * (plan.size + max_windows),
                DEFAULT_WINDOW,
                plan.test_size,
                plan.spinup_obs,
                plan.b,
                &plan.sweep.lbfgs,
            )?;
            let ensemble = truth_ensemble(rep_seed, plan.members)?;
            let truth_fc = truth_forecasts(&ensemble, plan.lead_steps);
            let da_truth = sweep_truth(&plan.sweep, rep_seed)?;
            let mut fs = Vec::new();
            let mut srmse = Vec::new();
            let mut tm = Vec::new();
            for v in &variants {
                let (m, _) = train_surrogate(plan.kind, &data, v.provenance, plan.size, v.windows, &plan.adam, rep_seed)?;
                tm.push(normalised_tmse(&m, &data)?);
                let f = forecast_skill(&m, &ensemble, &truth_fc, true)?;
                fs.push(f.values.iter().map(|per| mean_std(per).0).collect());
                srmse.push(da_scores(&m, &da_truth, &plan.sweep, rep_seed)?[0].srmse);
            }
            Ok((fs, srmse, tm))
        })
        .collect::<Result<_>>()?;
    let leads = plan.lead_steps + 1;
    let axis: Vec<f64> = (0..leads).map(|k| k as f64 * OBS_INTERVAL).collect();
    let fs = (0..variants.len())
        .map(|v| {
            let values = (0..leads).map(|k| per_rep.iter().map(|(f, _, _)| f[v][k]).collect()).collect();
            MetricSeries::new(format!("fs-{}", variants[v].label()), axis.clone(), values)
        })
        .collect();
    let idx: Vec<f64> = (0..variants.len()).map(|v| v as f64).collect();
    let srmse = MetricSeries::new(
        "srmse-variants".into(),
        idx.clone(),
        (0..variants.len()).map(|v| per_rep.iter().map(|(_, s, _)| s[v]).collect()).collect(),
    );
    let tmse = MetricSeries::new(
        "tmse-variants".into(),
        idx,
        (0..variants.len()).map(|v| per_rep.iter().map(|(_, _, t)| t[v]).collect()).collect(),
    );
    Ok(MultiDawResult {
        variants,
        fs,
        srmse,
        tmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lead_grid_covers_ten_lyapunov_times() {
        let k = lead_steps(10.0);
        assert_eq!(k, 146);
        assert!(k as f64 * OBS_INTERVAL * LYAPUNOV_EXPONENT >= 10.0);
    }

    #[test]
    fn skill_of_the_truth_is_zero_and_lead_zero_is_zero() {
        let ens = truth_ensemble(3, 3).unwrap();
        let truth = truth_forecasts(&ens, 8);
        let fs = forecast_skill(&TrueModel::new(ModelConfig::l05iii()), &ens, &truth, true).unwrap();
        assert!(fs.values.iter().flatten().all(|&v| v == 0.0));
        let fs = forecast_skill(&PhysicalModel::default(), &ens, &truth, false).unwrap();
        assert_eq!(fs.axis.len(), 9);
        assert!(fs.values[0].iter().all(|&v| v == 0.0));
        assert!(fs.mean[8] > 0.0);
    }

    #[test]
    fn window_sweep_is_deterministic() {
        let sweep = DaSweep {
            windows: vec![2, 4],
            repetitions: 2,
            average_obs: 32,
            spinup_obs: 8,
            pilot_obs: 16,
            b_grid: vec![0.3, 0.6],
            lbfgs: LbfgsConfig::default(),
        };
        let make = |_: usize, _: u64| -> Result<Vec<Box<dyn ForecastModel + Send>>> {
            Ok(vec![Box::new(PhysicalModel::default())])
        };
        let (a, raw) = sweep_window_length(&sweep, 11, make).unwrap();
        let (b, _) = sweep_window_length(&sweep, 11, make).unwrap();
        assert_eq!(a, b);
        assert_eq!(raw.len(), 2);
        assert_eq!(a[0].values.len(), 2);
        assert!(a[0].mean.iter().all(|v| v.is_finite() && *v > 0.0));
        assert_ne!(raw[0][0][0].srmse, raw[1][0][0].srmse);
    }

    #[test]
    fn offline_data_lines_up_with_truth() {
        let data = prepare_offline_data(5, 14, 6, 16, 24, 0.4, &LbfgsConfig::default()).unwrap();
        assert_eq!(data.analysis.len(), 14);
        assert_eq!(data.truth.len(), 14);
        assert_eq!(data.test.len(), 16);
        let err: f64 = data
            .analysis
            .iter()
            .zip(&data.truth)
            .map(|(a, t)| crate::variational::slow_rmse(a, t))
            .sum::<f64>()
            / 14.0;
        assert!(err < 1.0, "analysis error {err}");
        assert!(data.physical_tmse > 0.05 && data.physical_tmse < 1.0);
        // Two windows per pair: 5 pairs take 5 + 2 snapshots per block.
        let (m, report) = train_surrogate(
            SurrogateKind::TcCnnB,
            &data,
            Provenance::Analysis,
            5,
            2,
            &AdamConfig {
                epochs: 2,
                ..AdamConfig::default()
            },
            5,
        )
        .unwrap();
        assert_eq!(report.val_mse.len(), 3);
        assert!(normalised_tmse(&m, &data).unwrap().is_finite());
    }

    #[test]
    fn online_plan_rejects_resolvent_correction() {
        let p = Preset::new(Scale::Desk);
        assert!(OnlinePlan::from_preset(SurrogateKind::RcCnnA, &p, 0.4).is_err());
        let plan = OnlinePlan::from_preset(SurrogateKind::TcCnnB, &p, 0.4).unwrap();
        assert_eq!(plan.schedule, Schedule::CnnB);
        assert_eq!("paper".parse::<Scale>().unwrap(), Scale::Paper);
    }

    #[test]
    fn short_online_run_reports_partial_series() {
        let plan = OnlinePlan {
            kind: SurrogateKind::TcCnnB,
            window: 6,
            schedule: Schedule::CnnB,
            repetitions: 2,
            n_preliminary: 8,
            n_cycles: 16,
            preliminary_b: 0.4,
            test_size: 8,
            tmse_every: 8,
            lbfgs: LbfgsConfig::default(),
        };
        let r = run_online_experiment(&plan, 2).unwrap();
        assert_eq!(r.srmse.axis.len(), 16);
        assert_eq!(r.tmse.axis, vec![0.0, 8.0, 16.0]);
        assert!((r.tmse.mean[0] - 1.0).abs() < 1e-12, "untrained surrogate equals the physical model");
        assert_eq!(r, run_online_experiment(&plan, 2).unwrap());
    }
}

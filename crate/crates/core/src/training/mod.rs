//! Offline learning: snapshot-pair datasets, Adam training with
//! best-validation selection, test MSE, and the polynomial baseline.

mod adam;
mod wilks;

pub use adam::{Adam, AdamConfig};
pub use wilks::{least_squares, wilks_fit, wilks_pairs, WILKS_DEGREE, WILKS_PAIRS, WILKS_SPACING};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::evaluate_with_gradient;
use crate::dynamics::NX;
use crate::error::{Error, Result};
use crate::network::{CnnVars, ParamVector, SurrogateModel};
use crate::seed;
use crate::variational::ForecastModel;

/// Where training snapshots come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Analysis,
    Truth,
}

impl std::str::FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analysis" => Ok(Self::Analysis),
            "truth" => Ok(Self::Truth),
            _ => Err(Error::Config(format!("unknown provenance {s:?}"))),
        }
    }
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Analysis => "analysis",
            Self::Truth => "truth",
        })
    }
}

/// Input/target pairs separated by `windows` assimilation windows of
/// `window_steps` observation intervals each.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub windows: usize,
    pub window_steps: usize,
    pub provenance: Provenance,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Observation intervals between input and target.
    pub fn steps(&self) -> usize {
        self.windows * self.window_steps
    }

    fn rows(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::with_capacity(idx.len() * NX);
        let mut y = Vec::with_capacity(idx.len() * NX);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i]);
            y.extend_from_slice(&self.targets[i]);
        }
        (x, y)
    }
}

/// Pairs `(s_k, s_{k+windows})` over consecutive snapshots spaced one window
/// apart; `n` snapshots yield `n - windows` pairs.
pub fn build_pairs(
    series: &[Vec<f64>],
    windows: usize,
    window_steps: usize,
    provenance: Provenance,
) -> Result<PairDataset> {
    if windows == 0 || window_steps == 0 {
        return Err(Error::Config("pair horizon must be at least one window".into()));
    }
    if series.len() < windows + 1 {
        return Err(Error::SeriesTooShort {
            needed: windows + 1,
            got: series.len(),
        });
    }
    if let Some(s) = series.iter().find(|s| s.len() != NX) {
        return Err(Error::Shape(format!("snapshot of length {}, expected {NX}", s.len())));
    }
    let n = series.len() - windows;
    Ok(PairDataset {
        inputs: series[..n].to_vec(),
        targets: series[windows..].to_vec(),
        windows,
        window_steps,
        provenance,
    })
}

/// Training and validation sets of `size` pairs each, from the first and
/// second blocks of `size + windows` snapshots of `series`.
pub fn split_train_validation(
    series: &[Vec<f64>],
    size: usize,
    windows: usize,
    window_steps: usize,
    provenance: Provenance,
) -> Result<(PairDataset, PairDataset)> {
    let block = size + windows;
    if series.len() < 2 * block {
        return Err(Error::SeriesTooShort {
            needed: 2 * block,
            got: series.len(),
        });
    }
    Ok((
        build_pairs(&series[..block], windows, window_steps, provenance)?,
        build_pairs(&series[block..2 * block], windows, window_steps, provenance)?,
    ))
}

/// Mean squared error of `model` over a dataset: the mean over pairs of the
/// component-averaged squared error.
pub fn tmse(model: &dyn ForecastModel, test: &PairDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::SeriesTooShort { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for (x, y) in test.inputs.iter().zip(&test.targets) {
        let p = model.forecast(x, test.steps())?;
        total += p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    }
    Ok(total / test.len() as f64)
}

fn prediction_steps(model: &SurrogateModel, data: &PairDataset) -> Result<usize> {
    let steps = data.steps();
    if let crate::network::Mode::Rc { horizon } = model.mode {
        if horizon != steps {
            return Err(Error::Config(format!(
                "resolvent correction horizon {horizon} does not match the dataset horizon {steps}"
            )));
        }
    }
    Ok(steps)
}

/// Dataset MSE of a surrogate, evaluated in one batch.
pub fn batch_mse(model: &SurrogateModel, data: &PairDataset) -> Result<f64> {
    let steps = prediction_steps(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        let (x, y) = data.rows(chunk);
        let p = model.resolvent(&x, steps)?;
        total += p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / (data.len() * NX) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch (entry 0 is the initial parameters).
    pub train_mse: Vec<f64>,
    /// Validation MSE per epoch (entry 0 is the initial parameters).
    pub val_mse: Vec<f64>,
    pub selected_epoch: usize,
    pub params: ParamVector,
    /// Epoch at which a non-finite loss stopped training.
    pub halted_at: Option<usize>,
}

impl TrainReport {
    pub fn best_val_mse(&self) -> f64 {
        self.val_mse[self.selected_epoch]
    }
}

/// Adam on the mean squared prediction error over shuffled mini-batches,
/// keeping the parameters with the lowest validation MSE.
pub fn train_offline(
    model: &SurrogateModel,
    train: &PairDataset,
    val: &PairDataset,
    cfg: &AdamConfig,
    seed_value: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::SeriesTooShort { needed: 1, got: 0 });
    }
    let steps = prediction_steps(model, train)?;
    prediction_steps(model, val)?;
    let mut rng = seed::child_rng(seed_value, "shuffle", 0);
    let mut params = model.params.clone();
    let mut opt = Adam::new(*cfg, params.len());
    let mut current = model.clone();
    let initial_train = batch_mse(&current, train)?;
    let initial_val = batch_mse(&current, val)?;
    let mut report = TrainReport {
        train_mse: vec![initial_train],
        val_mse: vec![initial_val],
        selected_epoch: 0,
        params: params.clone(),
        halted_at: None,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train.rows(batch);
            let scale = 1.0 / y.len() as f64;
            let r = evaluate_with_gradient(&[("params", params.as_slice())], |g, v| {
                let vars = CnnVars::new(g, &model.spec, v[0]);
                let xc = g.constant(&x);
                let yc = g.constant(&y);
                let p = model
                    .resolvent_graph(g, &vars, xc, steps)
                    .expect("horizon checked above");
                let d = g.sub(p, yc);
                let s = g.sum_squares(d);
                g.scale(s, scale)
            })?;
            if r.nonfinite {
                report.halted_at = Some(epoch);
                return Ok(report);
            }
            epoch_loss += r.value * batch.len() as f64;
            opt.step(params.as_mut_slice(), r.grad("params"));
        }
        current = current.with_params(params.clone())?;
        let v = batch_mse(&current, val)?;
        report.train_mse.push(epoch_loss / train.len() as f64);
        report.val_mse.push(v);
        if !v.is_finite() {
            report.halted_at = Some(epoch);
            return Ok(report);
        }
        if v < report.val_mse[report.selected_epoch] {
            report.selected_epoch = epoch;
            report.params = params.clone();
        }
    }
    Ok(report)
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use tcda::dynamics::{spin_up, ModelConfig, LYAPUNOV_EXPONENT, MODEL_VARIABILITY, SPIN_UP_DURATION};
use tcda::experiments::{
    forecast_skill, lead_steps, multi_daw_comparison, prepare_offline_data, repetition_seed, run_online_experiment,
    sweep_dataset_size, sweep_window_length, train_surrogate, true_model_baseline, truth_ensemble, truth_forecasts,
    tuned_physical_b, DaSweep, MetricSeries, MultiDawPlan, OnlinePlan, Preset, SizeSweep, DEFAULT_WINDOW,
    ENSEMBLE_SPACING,
};
use tcda::io::{save_checkpoint, save_manifest, write_csv, Checkpoint, CheckpointMeta, Manifest, Table};
use tcda::network::{ParamVector, SurrogateKind, SurrogateModel};
use tcda::seed::child_seed;
use tcda::training::{tmse, wilks_fit, wilks_pairs, AdamConfig, Provenance, WILKS_PAIRS, WILKS_SPACING};
use tcda::variational::{ForecastModel, LbfgsConfig, PhysicalModel, WilksModel};

use crate::config::{usage, RunConfig};

/// Forecast-skill leads span this many Lyapunov times.
const FS_LYAPUNOV_TIMES: f64 = 10.0;
const DEFAULT_WINDOWS: [usize; 6] = [2, 4, 6, 8, 12, 16];
const DEFAULT_CHECKPOINT_EVERY: usize = 256;

pub enum Outcome {
    Completed,
    /// Outputs were written but some runs did not finish.
    Diverged(String),
}

/// Runtime failure after partial results were saved (exit code 2).
#[derive(Debug)]
pub struct PartialResults(pub String);

impl std::fmt::Display for PartialResults {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "partial results saved: {}", self.0)
    }
}

impl std::error::Error for PartialResults {}

pub struct Experiment {
    pub id: &'static str,
    pub about: &'static str,
    run: fn(&RunConfig, &mut Output) -> Result<Outcome>,
}

pub const EXPERIMENTS: &[Experiment] = &[
    Experiment {
        id: "fs-physical",
        about: "forecast skill of the physical model against lead time",
        run: fs_physical,
    },
    Experiment {
        id: "wilks",
        about: "polynomial closure fit and its forecast skill",
        run: wilks,
    },
    Experiment {
        id: "da-physical",
        about: "sRMSE against window length: physical model and true-model baseline",
        run: da_physical,
    },
    Experiment {
        id: "da-surrogates",
        about: "sRMSE against window length for offline-trained surrogates",
        run: da_surrogates,
    },
    Experiment {
        id: "tmse-size",
        about: "normalised tMSE against training dataset size",
        run: tmse_size,
    },
    Experiment {
        id: "train",
        about: "offline training of one surrogate, with checkpoint",
        run: train,
    },
    Experiment {
        id: "online-cnnb",
        about: "online learning of TC-CNN-b by weak-constraint 4D-Var",
        run: online_cnnb,
    },
    Experiment {
        id: "online-cnnc",
        about: "online learning of TC-CNN-c by weak-constraint 4D-Var",
        run: online_cnnc,
    },
    Experiment {
        id: "multi-daw",
        about: "training over one and two windows compared with truth training",
        run: multi_daw,
    },
];

pub fn find(id: &str) -> Result<&'static Experiment> {
    EXPERIMENTS.iter().find(|e| e.id == id).ok_or_else(|| {
        let ids: Vec<_> = EXPERIMENTS.iter().map(|e| e.id).collect();
        usage(format!("unknown experiment {id:?}; known: {}", ids.join(", ")))
    })
}

/// Artifact directory with its manifest.
pub struct Output {
    dir: PathBuf,
    manifest: Manifest,
}

impl Output {
    pub fn new(dir: PathBuf, experiment: &str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let scale = cfg.scale().to_string();
        Ok(Self {
            dir,
            manifest: Manifest::new(experiment, cfg.seed(), &scale, json!({ "run": cfg })),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Records the effective plan and writes the manifest.
    fn plan(&mut self, plan: impl Serialize) -> Result<()> {
        self.manifest.config["plan"] = serde_json::to_value(plan)?;
        self.save()
    }

    fn save(&self) -> Result<()> {
        save_manifest(&self.dir.join("manifest.json"), &self.manifest)?;
        Ok(())
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        write_csv(&self.dir.join(name), t)?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        save_checkpoint(&path, ck)?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    pub fn finish(&mut self, status: &str) -> Result<()> {
        self.manifest.status = status.into();
        self.save()
    }
}

pub fn run(exp: &Experiment, cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    (exp.run)(cfg, out)
}

/// `axis, <label>_mean, <label>_std` for each series on a shared axis.
fn summary_table(axis: &str, series: &[(&str, &MetricSeries)]) -> Result<Table> {
    let mut header = vec![axis.to_string()];
    for (label, _) in series {
        header.push(format!("{label}_mean"));
        header.push(format!("{label}_std"));
    }
    let mut t = Table::new(header);
    let base = &series[0].1.axis;
    for (i, &x) in base.iter().enumerate() {
        let mut row = vec![x];
        for (_, s) in series {
            row.push(s.mean[i]);
            row.push(s.std[i]);
        }
        t.push(row)?;
    }
    Ok(t)
}

/// Long-format per-repetition values: `axis, rep, value`.
fn raw_table(axis: &str, s: &MetricSeries) -> Result<Table> {
    let mut t = Table::new([axis, "rep", "value"]);
    for (x, vals) in s.axis.iter().zip(&s.values) {
        for (r, v) in vals.iter().enumerate() {
            t.push(vec![*x, r as f64, *v])?;
        }
    }
    Ok(t)
}

fn preset(cfg: &RunConfig) -> Preset {
    Preset::new(cfg.scale())
}

fn adam(cfg: &RunConfig, p: &Preset) -> AdamConfig {
    let mut a = p.adam();
    if let Some(e) = cfg.epochs {
        a.epochs = e;
    }
    if let Some(lr) = cfg.learning_rate {
        a.learning_rate = lr;
    }
    a
}

fn window(cfg: &RunConfig) -> usize {
    cfg.window.unwrap_or(DEFAULT_WINDOW)
}

fn largest_size(cfg: &RunConfig, p: &Preset) -> usize {
    cfg.dataset_size
        .or_else(|| cfg.sizes.as_ref().and_then(|s| s.iter().max().copied()))
        .unwrap_or_else(|| p.dataset_sizes.iter().copied().max().unwrap_or(1))
}

fn analysis_b(cfg: &RunConfig, p: &Preset, seed: u64, window: usize) -> Result<f64> {
    match cfg.b {
        Some(b) => Ok(b),
        None => Ok(tuned_physical_b(seed, window, p.pilot_obs, &LbfgsConfig::default())?),
    }
}

fn skill_of(
    models: &[(&str, &dyn ForecastModel)],
    members: usize,
    seed: u64,
) -> Result<Vec<(String, MetricSeries)>> {
    let ens = truth_ensemble(seed, members)?;
    let truth = truth_forecasts(&ens, lead_steps(FS_LYAPUNOV_TIMES));
    models
        .iter()
        .map(|(label, m)| Ok((label.to_string(), forecast_skill(*m, &ens, &truth, true)?)))
        .collect()
}

fn fs_plan(members: usize) -> serde_json::Value {
    json!({
        "members": members,
        "lead_steps": lead_steps(FS_LYAPUNOV_TIMES),
        "ensemble_spacing": ENSEMBLE_SPACING,
        "normaliser": MODEL_VARIABILITY,
        "lyapunov_exponent": LYAPUNOV_EXPONENT,
    })
}

fn fs_physical(cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let members = cfg.members.unwrap_or(preset(cfg).fs_members);
    out.plan(fs_plan(members))?;
    let fs = skill_of(&[("fs", &PhysicalModel::default())], members, cfg.seed())?;
    out.table("fs.csv", &summary_table("lead_time", &[("fs", &fs[0].1)])?)?;
    out.table("fs_raw.csv", &raw_table("lead_time", &fs[0].1)?)?;
    Ok(Outcome::Completed)
}

fn wilks(cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let members = cfg.members.unwrap_or(preset(cfg).fs_members);
    let truth_cfg = ModelConfig::l05iii();
    let physical = ModelConfig::l96();
    out.plan(json!({
        "pairs": WILKS_PAIRS,
        "spacing": WILKS_SPACING,
        "forcing": physical.forcing,
        "skill": fs_plan(members),
    }))?;
    let start = spin_up(&truth_cfg, child_seed(cfg.seed(), "truth", 0), SPIN_UP_DURATION)?;
    let pairs = wilks_pairs(&truth_cfg, start.as_slice(), WILKS_PAIRS, WILKS_SPACING)?;
    let coeffs = wilks_fit(&pairs, truth_cfg.dt, physical.forcing)?;
    let mut t = Table::new(["power", "coefficient"]);
    for (k, c) in coeffs.iter().enumerate() {
        t.push(vec![k as f64, *c])?;
    }
    out.table("coefficients.csv", &t)?;
    let w = WilksModel::new(coeffs);
    let fs = skill_of(&[("wilks", &w), ("physical", &PhysicalModel::default())], members, cfg.seed())?;
    let refs: Vec<(&str, &MetricSeries)> = fs.iter().map(|(l, s)| (l.as_str(), s)).collect();
    out.table("fs.csv", &summary_table("lead_time", &refs)?)?;
    Ok(Outcome::Completed)
}

fn da_sweep(cfg: &RunConfig, p: &Preset) -> DaSweep {
    let mut sweep = DaSweep::from_preset(p, cfg.windows.clone().unwrap_or_else(|| DEFAULT_WINDOWS.to_vec()));
    if let Some(r) = cfg.repetitions {
        sweep.repetitions = r;
    }
    if let Some(b) = cfg.b {
        sweep.b_grid = vec![b];
    }
    sweep
}

fn write_sweep(out: &mut Output, series: &[MetricSeries], raw: &[Vec<Vec<tcda::experiments::DaScore>>]) -> Result<Outcome> {
    let labels: Vec<String> = series.iter().map(|s| s.name.trim_start_matches("srmse-").to_string()).collect();
    let refs: Vec<(&str, &MetricSeries)> = labels.iter().map(String::as_str).zip(series).collect();
    out.table("srmse.csv", &summary_table("L", &refs)?)?;
    let mut t = Table::new(["rep", "model", "L", "b", "srmse", "completed"]);
    let mut failed = Vec::new();
    for (r, models) in raw.iter().enumerate() {
        for (m, scores) in models.iter().enumerate() {
            for s in scores {
                let done = s.status.is_completed();
                if !done {
                    failed.push(format!("rep {r} {} L={}: {:?}", labels[m], s.window, s.status));
                }
                t.push(vec![r as f64, m as f64, s.window as f64, s.b, s.srmse, f64::from(u8::from(done))])?;
            }
        }
    }
    out.table("srmse_raw.csv", &t)?;
    Ok(if failed.is_empty() {
        Outcome::Completed
    } else {
        Outcome::Diverged(failed.join("; "))
    })
}

fn da_physical(cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let p = preset(cfg);
    let sweep = da_sweep(cfg, &p);
    out.plan(json!({
        "sweep": sweep,
        "true_model": {
            "repetitions": p.true_model_repetitions,
            "spinup_obs": p.true_model_spinup_obs,
            "average_obs": p.true_model_average_obs,
            "b": "mean tuned physical-model spread at each window",
        },
    }))?;
    let (series, raw) = sweep_window_length(&sweep, cfg.seed(), |_, _| {
        Ok(vec![Box::new(PhysicalModel::default()) as Box<dyn ForecastModel + Send>])
    })?;
    let b: Vec<f64> = (0..sweep.windows.len())
        .map(|w| raw.iter().map(|r| r[0][w].b).sum::<f64>() / raw.len() as f64)
        .collect();
    let baseline = true_model_baseline(
        &sweep.windows,
        &b,
        p.true_model_repetitions,
        p.true_model_spinup_obs,
        p.true_model_average_obs,
        &sweep.lbfgs,
        cfg.seed(),
    )?;
    let all = [series[0].clone(), baseline];
    write_sweep(out, &all, &raw)
}

fn da_surrogates(cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let p = preset(cfg);
    let sweep = da_sweep(cfg, &p);
    let kinds: Vec<SurrogateKind> = cfg.surrogate.map_or(SurrogateKind::ALL.to_vec(), |k| vec![k]);
    let provenance = cfg.provenance.unwrap_or(Provenance::Analysis);
    let size = largest_size(cfg, &p);
    let adam = adam(cfg, &p);
    let test_size = cfg.test_size.unwrap_or(p.test_size);
    out.plan(json!({
        "sweep": sweep,
        "kinds": kinds,
        "provenance": provenance,
        "dataset_size": size,
        "training_window": DEFAULT_WINDOW,
        "adam": adam,
    }))?;
    let (series, raw) = sweep_window_length(&sweep, cfg.seed(), |_, rep_seed| {
        let b = tuned_physical_b(rep_seed, DEFAULT_WINDOW, p.pilot_obs, &sweep.lbfgs)?;
        let data = prepare_offline_data(rep_seed, 2 * (size + 1), DEFAULT_WINDOW, test_size, p.da_spinup_obs, b, &sweep.lbfgs)?;
        let mut models: Vec<Box<dyn ForecastModel + Send>> = vec![Box::new(PhysicalModel::default())];
        for &k in &kinds {
            let (m, _) = train_surrogate(k, &data, provenance, size, 1, &adam, rep_seed)?;
            models.push(Box::new(m));
        }
        Ok(models)
    })?;
    write_sweep(out, &series, &raw)
}

fn tmse_size(cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let p = preset(cfg);
    let w = window(cfg);
    let sweep = SizeSweep {
        kinds: cfg.surrogate.map_or(SurrogateKind::ALL.to_vec(), |k| vec![k]),
        provenances: cfg.provenance.map_or(vec![Provenance::Analysis, Provenance::Truth], |p| vec![p]),
        sizes: cfg.sizes.clone().unwrap_or_else(|| p.dataset_sizes.clone()),
        repetitions: cfg.repetitions.unwrap_or(p.size_repetitions),
        window: w,
        test_size: cfg.test_size.unwrap_or(p.test_size),
        spinup_obs: p.da_spinup_obs,
        b: analysis_b(cfg, &p, cfg.seed(), w)?,
        adam: adam(cfg, &p),
        lbfgs: LbfgsConfig::default(),
    };
    out.plan(&sweep)?;
    let res = sweep_dataset_size(&sweep, cfg.seed())?;
    let labels: Vec<String> = res.series.iter().map(|(k, pr, _)| format!("{k}_{pr}")).collect();
    let mut header = vec!["size".to_string()];
    for l in &labels {
        header.extend([format!("{l}_mean"), format!("{l}_std"), format!("{l}_median")]);
    }
    let mut t = Table::new(header);
    let mut raw = Table::new(std::iter::once("size".to_string()).chain(std::iter::once("rep".into())).chain(labels.iter().cloned()));
    for (i, &n) in sweep.sizes.iter().enumerate() {
        let mut row = vec![n as f64];
        for (_, _, s) in &res.series {
            row.extend([s.mean[i], s.std[i], s.median()[i]]);
        }
        t.push(row)?;
        for r in 0..sweep.repetitions {
            let mut row = vec![n as f64, r as f64];
            row.extend(res.series.iter().map(|(_, _, s)| s.values[i][r]));
            raw.push(row)?;
        }
    }
    out.table("tmse.csv", &t)?;
    out.table("tmse_raw.csv", &raw)?;
    let mut phys = Table::new(["rep", "physical_tmse"]);
    for (r, v) in res.physical_tmse.iter().enumerate() {
        phys.push(vec![r as f64, *v])?;
    }
    out.table("physical_tmse.csv", &phys)?;
    Ok(Outcome::Completed)
}

fn train(cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let p = preset(cfg);
    let w = window(cfg);
    let kind = cfg.surrogate.unwrap_or(SurrogateKind::TcCnnB);
    let provenance = cfg.provenance.unwrap_or(Provenance::Truth);
    let size = largest_size(cfg, &p);
    let adam = adam(cfg, &p);
    let rep_seed = repetition_seed(cfg.seed(), 0);
    let b = analysis_b(cfg, &p, rep_seed, w)?;
    let test_size = cfg.test_size.unwrap_or(p.test_size);
    out.plan(json!({
        "kind": kind,
        "provenance": provenance,
        "dataset_size": size,
        "window": w,
        "analysis_b": b,
        "test_size": test_size,
        "adam": adam,
    }))?;
    let data = prepare_offline_data(rep_seed, 2 * (size + 1), w, test_size, p.da_spinup_obs, b, &LbfgsConfig::default())?;
    let (model, report) = train_surrogate(kind, &data, provenance, size, 1, &adam, rep_seed)?;
    let mut curve = Table::new(["epoch", "train_mse", "val_mse"]);
    for (e, (tr, va)) in report.train_mse.iter().zip(&report.val_mse).enumerate() {
        curve.push(vec![e as f64, *tr, *va])?;
    }
    out.table("curve.csv", &curve)?;
    let test = tmse(&model, &data.test)?;
    let mut summary = Table::new(["selected_epoch", "physical_tmse", "tmse", "normalised_tmse"]);
    summary.push(vec![report.selected_epoch as f64, data.physical_tmse, test, test / data.physical_tmse])?;
    out.table("summary.csv", &summary)?;
    let meta = CheckpointMeta {
        seed: cfg.seed(),
        experiment: "train".into(),
        index: report.selected_epoch,
    };
    out.checkpoint("checkpoint.json", &Checkpoint::from_model(&model, meta))?;
    Ok(Outcome::Completed)
}

fn online_cnnb(cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    online(cfg, out, SurrogateKind::TcCnnB)
}

fn online_cnnc(cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    online(cfg, out, SurrogateKind::TcCnnC)
}

fn online(cfg: &RunConfig, out: &mut Output, kind: SurrogateKind) -> Result<Outcome> {
    if cfg.surrogate.is_some_and(|k| k != kind) {
        return Err(usage(format!("this experiment learns {kind}; drop --surrogate")));
    }
    let p = preset(cfg);
    let w = window(cfg);
    let mut plan = OnlinePlan::from_preset(kind, &p, 0.0)?;
    plan.window = w;
    plan.preliminary_b = analysis_b(cfg, &p, cfg.seed(), w)?;
    if let Some(n) = cfg.cycles {
        plan.n_cycles = n;
    }
    if let Some(r) = cfg.repetitions {
        plan.repetitions = r;
    }
    if let Some(n) = cfg.preliminary {
        plan.n_preliminary = n;
    }
    if let Some(n) = cfg.test_size {
        plan.test_size = n;
    }
    if let Some(n) = cfg.tmse_every {
        plan.tmse_every = n;
    }
    let every = cfg.checkpoint_every.unwrap_or(DEFAULT_CHECKPOINT_EVERY);
    out.plan(json!({ "online": plan, "checkpoint_every": every }))?;
    let res = run_online_experiment(&plan, cfg.seed())?;
    out.table("srmse.csv", &summary_table("cycle", &[("srmse", &res.srmse)])?)?;
    out.table("srmse_raw.csv", &raw_table("cycle", &res.srmse)?)?;
    out.table("tmse.csv", &summary_table("cycle", &[("tmse", &res.tmse)])?)?;
    out.table("tmse_raw.csv", &raw_table("cycle", &res.tmse)?)?;
    let spec = kind.spec();
    let mut status = Table::new(["rep", "completed", "cycles_run", "physical_tmse"]);
    let mut failed = Vec::new();
    for (r, rep) in res.reps.iter().enumerate() {
        let done = rep.run.status.is_completed();
        if !done {
            failed.push(format!("rep {r}: {:?}", rep.run.status));
        }
        status.push(vec![r as f64, f64::from(u8::from(done)), rep.run.records.len() as f64, rep.physical_tmse])?;
        for (c, rec) in rep.run.records.iter().enumerate() {
            let cycle = c + 1;
            if cycle % every != 0 && cycle != rep.run.records.len() {
                continue;
            }
            let Some(params) = &rec.analysis_params else { continue };
            let model = SurrogateModel::new(kind.mode(w), spec.clone(), ParamVector::from_vec(&spec, params.clone())?)?;
            let meta = CheckpointMeta {
                seed: repetition_seed(cfg.seed(), r),
                experiment: out.manifest.experiment.clone(),
                index: cycle,
            };
            out.checkpoint(&format!("checkpoints/rep{r}-cycle{cycle}.json"), &Checkpoint::from_model(&model, meta))?;
        }
    }
    out.table("status.csv", &status)?;
    Ok(if failed.is_empty() {
        Outcome::Completed
    } else {
        Outcome::Diverged(failed.join("; "))
    })
}

fn multi_daw(cfg: &RunConfig, out: &mut Output) -> Result<Outcome> {
    let p = preset(cfg);
    let mut sweep = da_sweep(cfg, &p);
    sweep.windows = vec![DEFAULT_WINDOW];
    let plan = MultiDawPlan {
        kind: cfg.surrogate.unwrap_or(SurrogateKind::TcCnnC),
        size: largest_size(cfg, &p),
        repetitions: cfg.repetitions.unwrap_or(p.da_repetitions),
        members: cfg.members.unwrap_or(p.fs_members),
        lead_steps: lead_steps(FS_LYAPUNOV_TIMES),
        test_size: cfg.test_size.unwrap_or(p.test_size),
        spinup_obs: p.da_spinup_obs,
        b: analysis_b(cfg, &p, cfg.seed(), DEFAULT_WINDOW)?,
        adam: adam(cfg, &p),
        sweep,
    };
    out.plan(&plan)?;
    let res = multi_daw_comparison(&plan, cfg.seed())?;
    let labels: Vec<String> = res.variants.iter().map(|v| v.label()).collect();
    let refs: Vec<(&str, &MetricSeries)> = labels.iter().map(String::as_str).zip(&res.fs).collect();
    out.table("fs.csv", &summary_table("lead_time", &refs)?)?;
    let mut t = Table::new(["variant", "windows", "truth_trained", "srmse_mean", "srmse_std", "tmse_mean", "tmse_std"]);
    for (i, v) in res.variants.iter().enumerate() {
        t.push(vec![
            i as f64,
            v.windows as f64,
            f64::from(u8::from(v.provenance == Provenance::Truth)),
            res.srmse.mean[i],
            res.srmse.std[i],
            res.tmse.mean[i],
            res.tmse.std[i],
        ])?;
    }
    out.table("scores.csv", &t)?;
    Ok(Outcome::Completed)
}

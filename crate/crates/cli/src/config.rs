use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use tcda::experiments::Scale;
use tcda::network::SurrogateKind;
use tcda::training::Provenance;

/// A problem with the command line or configuration file (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Experiment id (see `tcda list`)
    pub experiment: String,
    /// TOML file with run settings; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Preset counts: desk or paper
    #[arg(long)]
    pub scale: Option<Scale>,
    /// Output directory (default results/<experiment>)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Assimilation window length in observation intervals
    #[arg(long = "L")]
    pub window: Option<usize>,
    #[arg(long)]
    pub cycles: Option<usize>,
    /// Number of training pairs
    #[arg(long)]
    pub dataset_size: Option<usize>,
    /// rc-cnn-a, tc-cnn-b or tc-cnn-c
    #[arg(long)]
    pub surrogate: Option<SurrogateKind>,
    /// analysis or truth
    #[arg(long)]
    pub provenance: Option<Provenance>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Ensemble size for forecast skill
    #[arg(long)]
    pub members: Option<usize>,
}

/// Settings accepted in a configuration file. Every field is optional and
/// falls back to the scale preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scale: Option<Scale>,
    pub out: Option<PathBuf>,
    pub window: Option<usize>,
    pub windows: Option<Vec<usize>>,
    pub cycles: Option<usize>,
    pub dataset_size: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub surrogate: Option<SurrogateKind>,
    pub provenance: Option<Provenance>,
    pub repetitions: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub members: Option<usize>,
    /// Background spread; skips tuning where one is tuned.
    pub b: Option<f64>,
    pub preliminary: Option<usize>,
    pub test_size: Option<usize>,
    pub tmse_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

pub const DEFAULT_SEED: u64 = 1;

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    /// File settings with command-line flags applied on top.
    pub fn resolve(args: &RunArgs) -> anyhow::Result<Self> {
        let mut c = match &args.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $(if let Some(v) = args.$f.clone() { c.$f = Some(v); })* };
        }
        over!(seed, scale, out, window, cycles, dataset_size, surrogate, provenance, repetitions, epochs, members);
        if let Some(w) = args.window {
            c.windows = Some(vec![w]);
        }
        if let Some(n) = args.dataset_size {
            c.sizes = Some(vec![n]);
        }
        for (name, v) in [
            ("window", c.window),
            ("cycles", c.cycles),
            ("dataset_size", c.dataset_size),
            ("repetitions", c.repetitions),
            ("members", c.members),
            ("test_size", c.test_size),
            ("checkpoint_every", c.checkpoint_every),
        ] {
            if v == Some(0) {
                return Err(usage(format!("{name} must be positive")));
            }
        }
        if c.windows.as_ref().is_some_and(|w| w.is_empty() || w.contains(&0))
            || c.sizes.as_ref().is_some_and(|s| s.is_empty() || s.contains(&0))
        {
            return Err(usage("windows and sizes must be non-empty lists of positive integers"));
        }
        if c.b.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
            return Err(usage("b must be positive"));
        }
        Ok(c)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn scale(&self) -> Scale {
        self.scale.unwrap_or(Scale::Desk)
    }

    pub fn out_dir(&self, experiment: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("results").join(experiment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(experiment: &str) -> RunArgs {
        RunArgs {
            experiment: experiment.into(),
            config: None,
            seed: None,
            scale: None,
            out: None,
            window: None,
            cycles: None,
            dataset_size: None,
            surrogate: None,
            provenance: None,
            repetitions: None,
            epochs: None,
            members: None,
        }
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\nwindows = [2, 4]\nsurrogate = \"tc-cnn-c\"\n").unwrap();
        let mut a = args("da-physical");
        a.config = Some(path);
        a.window = Some(6);
        let c = RunConfig::resolve(&a).unwrap();
        assert_eq!(c.seed(), 4);
        assert_eq!(c.windows, Some(vec![6]));
        assert_eq!(c.surrogate, Some(SurrogateKind::TcCnnC));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seeds = 4\n").unwrap();
        let mut a = args("fs-physical");
        a.config = Some(path);
        let err = RunConfig::resolve(&a).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}

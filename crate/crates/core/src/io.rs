//! Persistence: CSV metric tables, run manifests and network checkpoints.
//!
//! Tables carry a header row and write floats in Rust's shortest
//! round-trip decimal form. Manifests and checkpoints are JSON with an
//! explicit `schema_version`. Checkpoint parameters are decimal strings with
//! 17 significant digits (`{:.16e}`), which round-trip every `f64` exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{CnnSpec, Mode, ParamVector, SurrogateModel};

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const MANIFEST_SCHEMA: u32 = 1;

/// A table of named float columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Shape(format!("row of {} values for {} columns", row.len(), self.header.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

pub fn write_csv(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let mut table = Table::new(header);
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("{}: bad number {s:?}: {e}", path.display()))))
            .collect::<Result<Vec<f64>>>()?;
        table.push(row)?;
    }
    Ok(table)
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub experiment: String,
    /// Cycle or epoch at which the parameters were taken.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: CnnSpec,
    pub mode: Mode,
    pub params: ParamVector,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    spec: CnnSpec,
    mode: Mode,
    param_count: usize,
    params: Vec<String>,
    meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &SurrogateModel, meta: CheckpointMeta) -> Self {
        Self {
            spec: model.spec.clone(),
            mode: model.mode,
            params: model.params.clone(),
            meta,
        }
    }

    pub fn model(&self) -> Result<SurrogateModel> {
        SurrogateModel::new(self.mode, self.spec.clone(), self.params.clone())
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA,
        spec: ck.spec.clone(),
        mode: ck.mode,
        param_count: ck.params.len(),
        params: ck.params.as_slice().iter().map(|v| format!("{v:.16e}")).collect(),
        meta: ck.meta.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if file.schema_version != CHECKPOINT_SCHEMA {
        return Err(bad(format!("unsupported schema version {}", file.schema_version)));
    }
    file.spec.validate().map_err(|e| bad(e.to_string()))?;
    let expected = file.spec.param_count();
    if file.param_count != expected || file.params.len() != expected {
        return Err(bad(format!(
            "{} needs {expected} parameters; header says {}, file holds {}",
            file.spec.name,
            file.param_count,
            file.params.len()
        )));
    }
    let values = file
        .params
        .iter()
        .enumerate()
        .map(|(i, s)| s.parse::<f64>().map_err(|e| bad(format!("parameter {i} ({s:?}): {e}"))))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Checkpoint {
        params: ParamVector::from_vec(&file.spec, values).map_err(|e| bad(e.to_string()))?,
        spec: file.spec,
        mode: file.mode,
        meta: file.meta,
    })
}

/// Everything needed to re-run an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub scale: String,
    pub code_version: String,
    pub seed_scheme: String,
    /// Effective configuration after defaults and overrides.
    pub config: serde_json::Value,
    pub outputs: Vec<PathBuf>,
    pub status: String,
}

/// Description of the seed derivation, stored in every manifest.
pub const SEED_SCHEME: &str = "child = splitmix64(splitmix64(seed ^ fnv1a64(label)) ^ index); ChaCha8 per child";

impl Manifest {
    pub fn new(experiment: &str, seed: u64, scale: &str, config: serde_json::Value) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA,
            experiment: experiment.into(),
            seed,
            scale: scale.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed_scheme: SEED_SCHEME.into(),
            config,
            outputs: Vec::new(),
            status: "running".into(),
        }
    }
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.schema_version != MANIFEST_SCHEMA {
        return Err(Error::Config(format!("unsupported manifest schema {}", m.schema_version)));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, SurrogateKind};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 9,
            experiment: "test".into(),
            index: 3,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        for kind in SurrogateKind::ALL {
            let spec = kind.spec();
            let mut p = init_params(&spec, 5);
            p.as_mut_slice()[0] = 0.1 + 0.2;
            p.as_mut_slice()[1] = f64::MIN_POSITIVE;
            let m = SurrogateModel::new(kind.mode(6), spec, p).unwrap();
            let ck = Checkpoint::from_model(&m, meta());
            save_checkpoint(&path, &ck).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.model().unwrap(), m);
        }
    }

    #[test]
    fn zero_cnn_b_checkpoint_has_113_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.json");
        let spec = SurrogateKind::TcCnnB.spec();
        let m = SurrogateModel::new(Mode::Tc, spec.clone(), init_params(&spec, 1)).unwrap();
        save_checkpoint(&path, &Checkpoint::from_model(&m, meta())).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let params = v["params"].as_array().unwrap();
        assert_eq!(params.len(), 113);
        let last = spec.layout()[spec.layers.len() - 1].0;
        assert!(params[last..].iter().all(|s| s.as_str().unwrap().parse::<f64>().unwrap() == 0.0));
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let m = SurrogateModel::zero(SurrogateKind::TcCnnC, 6).unwrap();
        save_checkpoint(&path, &Checkpoint::from_model(&m, meta())).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
        // Drop one parameter but keep the JSON well formed.
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["params"].as_array_mut().unwrap().pop();
        fs::write(&path, v.to_string()).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("113") && err.contains("112"), "{err}");
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["params"][4] = "abc".into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("parameter 4"));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = Table::new(["lead_time", "fs_mean"]);
        t.push(vec![0.05, 1.0 / 3.0]).unwrap();
        t.push(vec![1e-300, -2.5]).unwrap();
        assert!(t.push(vec![1.0]).is_err());
        write_csv(&path, &t).unwrap();
        assert_eq!(read_csv(&path).unwrap(), t);
        assert!(fs::read_to_string(&path).unwrap().starts_with("lead_time,fs_mean\n"));
        assert_eq!(t.column("fs_mean").unwrap(), vec![1.0 / 3.0, -2.5]);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = Manifest::new("fs-physical", 4, "desk", serde_json::json!({"members": 16}));
        save_manifest(&path, &m).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::train::TrainConfig;

/// Everything a `train` invocation needs. Unknown keys are rejected at
/// every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataSpec,
    pub train: TrainConfig,
    /// Where artifacts go; relative paths resolve against the config file.
    #[serde(default = "RunConfig::default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    fn default_output_dir() -> PathBuf {
        PathBuf::from("runs/latest")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        crate::train::build_model(&self.model, &self.train).map(|_| ())
    }
}

/// Parses and validates a config, returning it with the directory relative
/// paths resolve against.
pub fn load_config(path: &Path) -> Result<(RunConfig, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, base))
}

/// Interprets a data argument: a directory of MNIST IDX files, or a JSON
/// data spec. Returns `(train, validation)`.
pub fn resolve_data(arg: &Path) -> Result<(Dataset, Dataset)> {
    if arg.is_dir() {
        return DataSpec::Mnist {
            dir: arg.to_path_buf(),
            train_limit: None,
            val_limit: None,
        }
        .load(Path::new(""));
    }
    let text = fs::read_to_string(arg).map_err(|e| Error::io(arg, e))?;
    let spec: DataSpec = serde_json::from_str(&text)?;
    let base = arg.parent().unwrap_or(Path::new(""));
    spec.load(base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"input": [4], "layers": [{"kind": "dense", "inputs": 4, "outputs": 2}]},
        "data": {"source": "synthetic", "kind": "gaussian-blobs", "train": 20, "val": 10, "features": 4},
        "train": {"epochs": 2, "batch_size": 8, "lr": 0.1, "seed": 1}
    }"#;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("cfg.json");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, base) = load_config(&write(dir.path(), MINIMAL)).unwrap();
        assert_eq!(base, dir.path());
        assert_eq!(cfg.train.schedule.lambda, 5e-5);
        assert_eq!(cfg.train.schedule.alpha, 0.3);
        assert_eq!(cfg.train.schedule.interval, 20);
        assert_eq!(cfg.train.initial_bits, 8);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_missing_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let typo = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"lamda\": 0.1");
        let err = load_config(&write(dir.path(), &typo)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("lamda"), "{err}");

        let missing = MINIMAL.replace("\"epochs\": 2, ", "");
        let err = load_config(&write(dir.path(), &missing)).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("epochs"), "{err}");

        let bad_model = MINIMAL.replace("\"inputs\": 4", "\"inputs\": 5");
        assert_eq!(load_config(&write(dir.path(), &bad_model)).unwrap_err().exit_code(), 1);

        assert_eq!(load_config(&dir.path().join("nope.json")).unwrap_err().exit_code(), 1);
    }
}

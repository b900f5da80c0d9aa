//! Run configuration: model, training and degradation settings plus data
//! paths, read from a key-value file with `--set key=value` overrides.

use std::path::{Path, PathBuf};

use rdnsr::config::{write_kv, KvDoc};
use rdnsr::model::ModelConfig;
use rdnsr::train::TrainConfig;

/// Default run directory when neither the config nor a flag sets one.
pub const RUN_DIR_ENV: &str = "RDNSR_RUN_DIR";
pub const EFFECTIVE_CONFIG: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub train_hr: Option<PathBuf>,
    pub val_hr: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            model_seed: 0,
            train: TrainConfig::default(),
            train_hr: None,
            val_hr: None,
            run_dir: std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| "runs".into()),
        }
    }
}

/// Which data paths a command needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Needs {
    Training,
    TrainingAndValidation,
}

impl RunConfig {
    /// Reads `file` (if any), applies `overrides` (`key=value`) on top and
    /// validates. Every problem found is returned together.
    pub fn load(file: Option<&Path>, overrides: &[String], needs: Needs) -> Result<Self, Vec<String>> {
        let mut errors = Vec::new();
        let mut doc = match file {
            Some(path) => match std::fs::read_to_string(path) {
                Ok(text) => KvDoc::parse(&text).unwrap_or_else(|e| {
                    errors.extend(e.into_iter().map(|m| format!("{}: {m}", path.display())));
                    KvDoc::default()
                }),
                Err(e) => {
                    errors.push(format!("{}: {e}", path.display()));
                    KvDoc::default()
                }
            },
            None => KvDoc::default(),
        };
        for item in overrides {
            match item.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => doc.set(k.trim(), v.trim()),
                _ => errors.push(format!("--set `{item}`: expected key=value")),
            }
        }
        let cfg = Self::from_doc(&doc, needs, &mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    fn from_doc(doc: &KvDoc, needs: Needs, errors: &mut Vec<String>) -> Self {
        let mut cfg = RunConfig::default();
        let mut r = doc.reader();
        cfg.model.read_kv("model.", &mut r);
        r.read("model.seed", &mut cfg.model_seed);
        cfg.train.read_kv("train.", &mut r);
        cfg.train.degradation.read_kv("degrade.", &mut r);
        r.read_opt("data.train_hr", &mut cfg.train_hr);
        r.read_opt("data.val_hr", &mut cfg.val_hr);
        r.read("run.dir", &mut cfg.run_dir);
        errors.extend(r.finish());
        if doc.get("model.scale").is_none() {
            cfg.model.scale = cfg.train.degradation.scale;
        }
        errors.extend(cfg.model.problems());
        errors.extend(cfg.train.problems());
        if cfg.model.scale != cfg.train.degradation.scale {
            errors.push(format!(
                "model.scale {} differs from degrade.scale {}",
                cfg.model.scale, cfg.train.degradation.scale
            ));
        }
        if cfg.train_hr.is_none() {
            errors.push("data.train_hr is required".into());
        }
        if needs == Needs::TrainingAndValidation && cfg.val_hr.is_none() {
            errors.push("data.val_hr is required".into());
        }
        cfg
    }

    /// Canonical text with every field, suitable for reloading.
    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        self.model.write_kv("model.", &mut out);
        out.push(("model.seed".into(), self.model_seed.to_string()));
        self.train.write_kv("train.", &mut out);
        self.train.degradation.write_kv("degrade.", &mut out);
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        out.push(("data.train_hr".into(), path(&self.train_hr)));
        out.push(("data.val_hr".into(), path(&self.val_hr)));
        out.push(("run.dir".into(), self.run_dir.display().to_string()));
        write_kv(&out)
    }
}

//! Flat TOML run configuration: every model setting plus the run's
//! schedule, seeds and file locations in one table.
//!
//! ```toml
//! d = 32
//! views = ["IP", "IS", "T", "M"]
//! epochs = 30
//! seeds = [0, 1, 2, 3, 4]
//! train = "data/train.jsonl"
//! test = "data/test.jsonl"
//! ```
//!
//! Relative paths are resolved against the config file's directory.
//! Omitted model keys take the desk-scale defaults.

use std::path::{Path, PathBuf};

use bmr_core::{BmrConfig, CleanRules, TrainOptions};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

/// Run-level settings; the model settings live in [`BmrConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub seeds: Vec<u64>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Fixed vocabulary (JSON word list); built from `train` when absent.
    pub vocab_file: Option<PathBuf>,
    pub out: PathBuf,
    /// Images with a side below this are replaced by a zero grid.
    pub min_image_side: usize,
    /// Texts with fewer words become the placeholder sentence.
    pub min_words: usize,
    pub consistency_size: Option<usize>,
    pub stop_when_perfect: bool,
    pub eval_chunk: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            epochs: t.epochs,
            batch: t.batch,
            lr0: t.lr0,
            seeds: vec![0],
            train: None,
            test: None,
            vocab_file: None,
            out: PathBuf::from("runs"),
            min_image_side: 64,
            min_words: 5,
            consistency_size: None,
            stop_when_perfect: false,
            eval_chunk: t.eval_chunk,
        }
    }
}

impl RunSettings {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch < 2 {
            v.push(format!("batch must be at least 2, got {}", self.batch));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            v.push(format!("lr0 must be finite and >= 0, got {}", self.lr0));
        }
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        if self.eval_chunk == 0 {
            v.push("eval_chunk must be positive".into());
        }
        if let Some(k) = self.consistency_size {
            if k == 0 || k % 4 != 0 {
                v.push(format!("consistency_size must be a positive multiple of 4, got {k}"));
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: BmrConfig,
    pub run: RunSettings,
}

fn keys_of<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("settings serialize to a table")
}

/// Deserializes `defaults` overridden by `overrides`, reporting each bad
/// key separately. Keys that fail to parse keep their default so the
/// range checks can still run on the rest.
fn overlay<T: Serialize + DeserializeOwned>(defaults: &T, overrides: &Table, errors: &mut Vec<String>) -> Option<T> {
    let base = keys_of(defaults);
    let mut merged = base.clone();
    for (k, v) in overrides {
        let mut single = base.clone();
        single.insert(k.clone(), v.clone());
        match T::deserialize(Value::Table(single)) {
            Ok(_) => {
                merged.insert(k.clone(), v.clone());
            }
            Err(e) => errors.push(format!("`{k}`: {}", e.message().trim())),
        }
    }
    T::deserialize(Value::Table(merged)).ok()
}

impl RunConfig {
    /// Parses a config; `base` resolves relative paths.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(vec![e.message().to_string()]))?;
        let run_keys = keys_of(&RunSettings {
            train: Some(PathBuf::new()),
            test: Some(PathBuf::new()),
            vocab_file: Some(PathBuf::new()),
            consistency_size: Some(0),
            ..RunSettings::default()
        });
        let model_keys = keys_of(&BmrConfig {
            threshold: Some(0.5),
            ..BmrConfig::default()
        });
        let (mut run_part, mut model_part) = (Table::new(), Table::new());
        let mut errors = Vec::new();
        for (k, v) in table {
            if run_keys.contains_key(&k) {
                run_part.insert(k, v);
            } else if model_keys.contains_key(&k) {
                model_part.insert(k, v);
            } else {
                errors.push(format!("unknown key `{k}`"));
            }
        }
        let run = overlay(&RunSettings::default(), &run_part, &mut errors);
        let model = overlay(&BmrConfig::default(), &model_part, &mut errors);
        let (Some(mut run), Some(model)) = (run, model) else {
            return Err(CliError::Config(errors));
        };
        for p in [&mut run.train, &mut run.test, &mut run.vocab_file]
            .into_iter()
            .flatten()
        {
            *p = base.join(&*p);
        }
        run.out = base.join(&run.out);
        let cfg = Self { model, run };
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| e.in_file(path))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.run.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(v))
        }
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.run.epochs,
            batch: self.run.batch,
            lr0: self.run.lr0,
            seed,
            consistency_size: self.run.consistency_size,
            stop_when_perfect: self.run.stop_when_perfect,
            eval_chunk: self.run.eval_chunk,
        }
    }

    pub fn clean_rules(&self) -> CleanRules {
        CleanRules {
            min_side: self.run.min_image_side,
            min_words: self.run.min_words,
            ..CleanRules::new(self.model.image_h, self.model.image_w)
        }
    }
}

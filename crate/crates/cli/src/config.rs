//! Run configuration: presets, TOML files and flag overrides.

use std::fs;
use std::path::Path;

use tint_core::train::TrainConfig;
use tint_core::ModelConfig;
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-size network at 224 px.
    Default,
    /// Tiny network at 32 px for checks and fast experiments.
    Test,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Test => ModelConfig::test_config(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn as_table(v: Value) -> Table {
    match v {
        Value::Table(t) => t,
        _ => unreachable!("structs serialize to tables"),
    }
}

fn model_table(m: &ModelConfig) -> Table {
    as_table(Value::try_from(m).expect("config serializes"))
}

fn train_table(t: &TrainConfig) -> Table {
    as_table(Value::try_from(t).expect("config serializes"))
}

fn overlay(base: &mut Table, over: &Table) {
    for (k, v) in over {
        base.insert(k.clone(), v.clone());
    }
}

impl RunConfig {
    /// `preset` defaults, then the `[model]` / `[train]` tables of `file`.
    pub fn resolve(preset: Preset, file: Option<&Path>) -> Result<Self, CliError> {
        let mut model = model_table(&preset.model());
        let mut train = train_table(&TrainConfig::default());
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            let doc: Table = text
                .parse()
                .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
            for (k, v) in &doc {
                match (k.as_str(), v) {
                    ("model", Value::Table(t)) => overlay(&mut model, t),
                    ("train", Value::Table(t)) => overlay(&mut train, t),
                    _ => {
                        return Err(CliError::usage(format!(
                            "config {}: unexpected entry `{k}` (expected [model] and [train] tables)",
                            path.display()
                        )))
                    }
                }
            }
        }
        let model: ModelConfig = Value::Table(model)
            .try_into()
            .map_err(|e| CliError::usage(format!("[model]: {e}")))?;
        let train: TrainConfig = Value::Table(train)
            .try_into()
            .map_err(|e| CliError::usage(format!("[train]: {e}")))?;
        Ok(Self { model, train })
    }

    /// Canonical TOML text of the resolved configuration.
    pub fn to_toml(&self) -> String {
        let mut doc = Table::new();
        doc.insert("model".into(), Value::Table(model_table(&self.model)));
        doc.insert("train".into(), Value::Table(train_table(&self.train)));
        toml::to_string(&doc).expect("tables serialize")
    }
}

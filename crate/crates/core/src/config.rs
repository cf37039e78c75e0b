//! Run configuration files.
//!
//! A TOML document with optional `[model]` and `[train]` tables whose keys
//! mirror [`ModelConfig`] and [`TrainConfig`]. Missing keys take their
//! defaults; unknown keys are rejected. Overrides use `section.key=value`
//! with a TOML value, e.g. `train.epochs=5` or `model.stream_widths=[8,16]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Usage(format!("config: {}", e.message())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Usage(m) => Error::Usage(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply one `section.key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {assignment:?} is not of the form key=value")))?;
        let key = key.trim();
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Usage(format!("override key {key:?} needs a section, e.g. train.{key}")))?;
        let value: toml::Value = parse_value(value.trim());
        let mut doc = toml::Table::try_from(&*self).expect("config serializes");
        let table = doc
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Usage(format!("unknown config section {section:?} in {key:?}")))?;
        if !table.contains_key(field) {
            return Err(Error::Usage(format!("unknown config key {key:?}")));
        }
        table.insert(field.to_string(), value);
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Usage(format!("bad value for {key:?}: {}", e.message())))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// A TOML value, with bare words taken as strings.
fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

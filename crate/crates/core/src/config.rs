//! TOML study configuration with `key=value` command-line overrides.
//!
//! Overrides use dotted paths into the configuration table
//! (`trainer.actor_lr=3e-4`, `env.flag_threshold=0`). The right-hand side is
//! read as a TOML value when it parses as one and as a bare string otherwise,
//! so `study=generational` and `probe_sampling=true` both work.

use std::path::Path;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::experiments::StudyConfig;

pub fn parse(text: &str) -> Result<StudyConfig> {
    toml::from_str(text).map_err(|e| Error::config(e.to_string()))
}

pub fn load(path: &Path) -> Result<StudyConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

pub fn to_toml(config: &StudyConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::config(e.to_string()))
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key=value` overrides in order and validates the result.
pub fn apply_overrides<S: AsRef<str>>(config: &StudyConfig, overrides: &[S]) -> Result<StudyConfig> {
    let mut root = Value::try_from(config).map_err(|e| Error::config(e.to_string()))?;
    for item in overrides {
        let item = item.as_ref();
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{item}' is not of the form key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let (last, parents) = path.split_last().unwrap();
        let mut table = root.as_table_mut().unwrap();
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(Value::as_table_mut)
                .ok_or_else(|| Error::config(format!("unknown configuration section '{p}' in '{key}'")))?;
        }
        if !table.contains_key(*last) {
            return Err(Error::config(format!("unknown configuration key '{key}'")));
        }
        table.insert(last.to_string(), parse_value(raw.trim()));
    }
    let out: StudyConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    out.validate()?;
    Ok(out)
}

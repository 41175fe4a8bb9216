//! `--set section.field=value` overrides layered over a TOML config.

use reviewgan::{Error, TrainConfig};

/// Parses `value` as a TOML literal, falling back to a bare string so that
/// `--set schedule.tie_break=spam` works without quoting.
fn literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

pub fn apply(config: &TrainConfig, sets: &[String]) -> reviewgan::Result<TrainConfig> {
    if sets.is_empty() {
        return Ok(config.clone());
    }
    let mut root: toml::Table = toml::from_str(&config.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not KEY=VALUE")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let (last, parents) = path.split_last().expect("split yields one item");
        let mut table = &mut root;
        for p in parents {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
        }
        table.insert(last.to_string(), literal(value.trim()));
    }
    let text = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
    TrainConfig::from_toml(&text)
}

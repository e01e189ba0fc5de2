//! Loading experiment configs and applying dotted `key=value` overrides.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use implicit_seq_core::presets::{preset, ExperimentConfig};
use serde_json::Value;

/// Sets `a.b.0.c=value` inside `root`. Every path segment must already exist,
/// so a typo is an error instead of a silently ignored key.
pub fn apply(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
    if key.is_empty() {
        bail!("override {assignment:?} has an empty key");
    }
    let mut cur = root;
    let mut walked = Vec::new();
    for seg in key.split('.') {
        walked.push(seg);
        let here = walked.join(".");
        cur = match cur {
            Value::Object(map) => map.get_mut(seg).ok_or_else(|| anyhow!("unknown config key {here:?}"))?,
            Value::Array(items) => {
                let i: usize = seg.parse().map_err(|_| anyhow!("{here:?}: expected a list index"))?;
                let n = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| anyhow!("{here:?}: index out of range (length {n})"))?
            }
            _ => bail!("unknown config key {here:?}: parent is not an object"),
        };
    }
    let parsed = serde_json::from_str::<Value>(raw).ok();
    *cur = match (&*cur, parsed) {
        (Value::String(_), Some(v @ Value::String(_))) => v,
        (Value::String(_), _) => Value::String(raw.to_string()),
        (_, Some(v)) => v,
        (_, None) => Value::String(raw.to_string()),
    };
    Ok(())
}

/// Config from a file or preset, with overrides applied and validated.
pub fn resolve(config: Option<&Path>, preset_name: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let base = match (config, preset_name) {
        (Some(_), Some(_)) => bail!("give either --config or --preset, not both"),
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(name)) => preset(name)?,
        (None, None) => bail!("a config is required: pass --config PATH or --preset NAME"),
    };
    let mut value = serde_json::to_value(&base)?;
    for o in overrides {
        apply(&mut value, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).context("applying overrides")?;
    cfg.validate()?;
    Ok(cfg)
}

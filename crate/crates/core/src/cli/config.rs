//! Run configuration: one TOML file plus `--set key=value` overrides.

use std::path::Path;

use toml::{Table, Value};
use xcross::evalharness::ExperimentConfig;
use xcross::{Error, Result};

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key such as `xcross.lr` inside `table`.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("bad override key `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        node = match node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
        {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{part}` in `{key}` is not a section"))),
        };
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// File (if any), then overrides, then the seed; missing fields take their
/// defaults. Returned unseeded; [`ExperimentConfig::seeded`] derives the
/// stage seeds.
pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Missing(format!("config file {}: {e}", path.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| Error::Config(format!("seed {s} exceeds {}", i64::MAX)))?;
        table.insert("seed".into(), Value::Integer(s));
    }
    let cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.seeded().validate()?;
    Ok(cfg)
}

/// The effective configuration as TOML. Stage seeds are written as 0 since they
/// are re-derived from `seed`.
pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.generator.seed = c.seed;
    for t in [&mut c.pretrain, &mut c.source, &mut c.xcross] {
        t.seed = 0;
    }
    let body = toml::to_string_pretty(&c).map_err(|e| Error::Config(e.to_string()))?;
    Ok(format!("# stage seeds are derived from `seed`\n{body}"))
}

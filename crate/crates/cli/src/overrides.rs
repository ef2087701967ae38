//! Assemble the effective experiment config from up to three layers:
//! an optional base document (a finished run's config snapshot), an optional
//! `--config` file, and the command-line flags. Precedence is strongest
//! first: **base over file over flags** — a key present in a stronger layer
//! keeps its value, and weaker layers only fill keys it leaves unset.

use std::path::Path;
use std::str::FromStr;

use toml::{Table, Value};

use bdlab_core::config::{AblationPreset, ExperimentConfig, CONFIG_FORMAT_VERSION};
use bdlab_core::error::{Error, Result};
use bdlab_core::victim::Architecture;

use crate::ConfigArgs;

fn toml_int(name: &str, v: u64) -> Result<Value> {
    i64::try_from(v)
        .map(Value::Integer)
        .map_err(|_| Error::Config(format!("{name} {v} exceeds the TOML integer range")))
}

/// Read a TOML document, requiring it to declare `format_version`.
pub fn load_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::FileFormat {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let table: Table = toml::from_str(&text)?;
    if !table.contains_key("format_version") {
        return Err(Error::Config(format!(
            "config file {} must declare format_version (this build reads {})",
            path.display(),
            CONFIG_FORMAT_VERSION
        )));
    }
    Ok(table)
}

/// Copy into `dst` every key of `src` that `dst` lacks; where both sides
/// hold tables, merge them key by key. Arrays and scalars are atomic.
fn fill_from(dst: &mut Table, src: &Table) {
    for (key, value) in src {
        match (dst.get_mut(key), value) {
            (None, v) => {
                dst.insert(key.clone(), v.clone());
            }
            (Some(Value::Table(d)), Value::Table(s)) => fill_from(d, s),
            _ => {} // dst wins
        }
    }
}

/// Insert `value` at `doc[key]` only if the key is absent.
fn fill_top(doc: &mut Table, key: &str, value: Option<Value>) {
    if let Some(v) = value {
        doc.entry(key.to_string()).or_insert(v);
    }
}

/// Insert `value` at `doc[section][key]` only if that key is absent.
fn fill_nested(doc: &mut Table, section: &str, key: &str, value: Option<Value>) -> Result<()> {
    let Some(v) = value else { return Ok(()) };
    let entry = doc
        .entry(section.to_string())
        .or_insert(Value::Table(Table::new()));
    let table = entry
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("config key \"{section}\" must be a table")))?;
    table.entry(key.to_string()).or_insert(v);
    Ok(())
}

/// Merge the layers and deserialize strictly. `extra` carries
/// subcommand-specific flags (e.g. the poison ratio) at flag precedence.
pub fn effective_config_layered(
    base: Option<Table>,
    args: &ConfigArgs,
    extra: &[(&str, &str, Value)],
) -> Result<ExperimentConfig> {
    let mut doc = match base {
        Some(table) => table,
        None => {
            let mut t = Table::new();
            t.insert(
                "format_version".into(),
                Value::Integer(CONFIG_FORMAT_VERSION as i64),
            );
            t
        }
    };
    if let Some(path) = &args.config {
        let file = load_table(path)?;
        fill_from(&mut doc, &file);
    }

    if let Some(seed) = args.seed {
        fill_top(&mut doc, "seed", Some(toml_int("seed", seed)?));
    }
    if let Some(eval_seed) = args.eval_seed {
        fill_top(&mut doc, "eval_seed", Some(toml_int("eval_seed", eval_seed)?));
    }
    if let Some(dir) = &args.output_dir {
        fill_top(
            &mut doc,
            "output_dir",
            Some(Value::String(dir.display().to_string())),
        );
    }
    if let Some(ablation) = &args.ablation {
        // Validate eagerly so a typo fails as a config error naming the
        // valid presets, not as an opaque deserialization failure.
        AblationPreset::from_str(ablation)?;
        fill_top(&mut doc, "ablation", Some(Value::String(ablation.clone())));
    }
    fill_nested(&mut doc, "attack", "epsilon", args.epsilon.map(Value::Float))?;
    fill_nested(&mut doc, "attack", "p", args.p.map(Value::Float))?;
    if let Some(epochs) = args.epochs {
        fill_nested(
            &mut doc,
            "schedule",
            "epochs",
            Some(toml_int("epochs", epochs as u64)?),
        )?;
    }
    if let Some(batch) = args.batch_size {
        fill_nested(
            &mut doc,
            "schedule",
            "batch_size",
            Some(toml_int("batch_size", batch as u64)?),
        )?;
    }
    fill_nested(
        &mut doc,
        "schedule",
        "learning_rate",
        args.learning_rate.map(Value::Float),
    )?;
    if let Some(arch) = &args.arch {
        Architecture::from_str(arch)?;
        fill_nested(
            &mut doc,
            "victim",
            "architecture",
            Some(Value::String(arch.clone())),
        )?;
    }
    if let Some(fixture) = &args.fixture {
        fill_nested(
            &mut doc,
            "instructions",
            "fixture",
            Some(Value::String(fixture.display().to_string())),
        )?;
    }
    for (section, key, value) in extra {
        fill_nested(&mut doc, section, key, Some(value.clone()))?;
    }

    if !doc.contains_key("seed") {
        return Err(Error::Config(
            "seed is mandatory: pass --seed or set it in the config file".into(),
        ));
    }
    let cfg: ExperimentConfig = Value::Table(doc).try_into().map_err(Error::TomlParse)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn effective_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    effective_config_layered(None, args, &[])
}

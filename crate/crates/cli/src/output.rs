//! Writing reports to stdout or to an output directory.

use std::fs;
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use crate::settings::Settings;

pub struct Artifact {
    /// File stem under `--out`.
    pub name: String,
    pub json: String,
    pub csv: Option<String>,
    /// `Some` for verifications; decides the exit status.
    pub pass: Option<bool>,
}

impl Artifact {
    pub fn new<T: Serialize>(name: &str, value: &T, csv: Option<String>) -> Result<Self> {
        let json = serde_json::to_string_pretty(value)? + "\n";
        Ok(Artifact {
            name: name.to_string(),
            json,
            csv,
            pass: None,
        })
    }

    /// JSON plus a `key,value` CSV of its scalar leaves.
    pub fn flat<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        let v = serde_json::to_value(value)?;
        let mut csv = String::from("key,value\n");
        flatten("", &v, &mut csv);
        Artifact::new(name, &v, Some(csv))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(map) => map.iter().for_each(|(k, x)| flatten(&join(k), x, out)),
        Value::Array(items) => items
            .iter()
            .enumerate()
            .for_each(|(i, x)| flatten(&join(&i.to_string()), x, out)),
        Value::Null => {}
        Value::String(s) => out.push_str(&format!("{prefix},{}\n", s.replace(',', ";"))),
        other => out.push_str(&format!("{prefix},{other}\n")),
    }
}

/// Emits the artifact; timing goes to a sidecar so reports stay reproducible.
pub fn write(settings: &Settings, art: &Artifact, command: &str, runtime: Duration, threads: usize) -> Result<()> {
    let emit = settings.emit();
    match &settings.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            if emit.json() {
                fs::write(dir.join(format!("{}.json", art.name)), &art.json)?;
            }
            if emit.csv() {
                if let Some(csv) = &art.csv {
                    fs::write(dir.join(format!("{}.csv", art.name)), csv)?;
                }
            }
            let timing = serde_json::json!({
                "command": command,
                "runtime_secs": runtime.as_secs_f64(),
                "threads": threads,
            });
            fs::write(
                dir.join(format!("{}.timing.json", art.name)),
                serde_json::to_string_pretty(&timing)? + "\n",
            )?;
        }
        None => {
            if emit.json() {
                print!("{}", art.json);
            }
            if emit.csv() {
                if let Some(csv) = &art.csv {
                    print!("{csv}");
                }
            }
        }
    }
    Ok(())
}

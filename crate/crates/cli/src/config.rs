//! `--config FILE` support.
//!
//! A config file holds `key = value` lines whose keys are long flag names.
//! A run manifest (JSON with a `parameters` object) is accepted too, so a
//! manifest can be replayed directly. File values are spliced in front of the
//! command-line flags; since every subcommand lets a later flag override an
//! earlier one, flags given on the command line win.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let pairs = read(Path::new(&path))?;
    let mut extra = Vec::new();
    for (key, value) in pairs {
        if key == "config" {
            continue;
        }
        match value.as_str() {
            "true" => extra.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                extra.push(OsString::from(format!("--{key}")));
                extra.push(OsString::from(value));
            }
        }
    }
    let mut out = argv;
    let at = 2.min(out.len());
    out.splice(at..at, extra);
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn read(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Ok(Value::Object(doc)) = serde_json::from_str::<Value>(&text) {
        let Some(Value::Object(params)) = doc.get("parameters") else {
            bail!("{}: JSON config must be a run manifest with a \"parameters\" object", path.display());
        };
        return params.iter().map(|(k, v)| Ok((k.clone(), flatten(v)?))).collect();
    }
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`", path.display(), n + 1);
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Renders a manifest value the way it would be typed on the command line.
pub fn flatten(v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::Array(items) => items.iter().map(flatten).collect::<Result<Vec<_>>>()?.join(","),
        Value::Null | Value::Object(_) => bail!("unsupported config value {v}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn splices_file_values_before_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "# comment\nseed = 4\nrealizable = true\nfamilies=2\n").unwrap();
        let out = expand(args(&["warmbo", "make-collection", "--config", path.to_str().unwrap(), "--seed", "9"])).unwrap();
        let s: Vec<String> = out.iter().map(|a| a.to_string_lossy().into_owned()).collect();
        assert_eq!(&s[..7], ["warmbo", "make-collection", "--families", "2", "--realizable", "--seed", "4"]);
        assert_eq!(&s[s.len() - 2..], ["--seed", "9"]);
    }

    #[test]
    fn reads_manifest_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, r#"{"command":"run","parameters":{"k":3,"fractions":[0.5,1.0],"verbose":false}}"#).unwrap();
        let map = read(&path).unwrap();
        assert_eq!(map["k"], "3");
        assert_eq!(map["fractions"], "0.5,1.0");
        assert_eq!(map["verbose"], "false");
    }

    #[test]
    fn rejects_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "seed 4\n").unwrap();
        assert!(read(&path).unwrap_err().to_string().contains(":1:"));
    }
}

//! Config files: flat `key = value` lines, or a previous run's manifest.
//! Values from the file are appended as flags unless the command line
//! already sets them.

use std::fs;
use std::path::Path;

use crate::CliError;

pub const SUBCOMMANDS: [&str; 7] = [
    "spectral",
    "simulate",
    "btrw-verify",
    "couple",
    "decay",
    "profile",
    "coalescence",
];

/// Parsed file: an optional subcommand (manifests carry one) and its pairs.
#[derive(Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub command: Option<String>,
    pub pairs: Vec<(String, String)>,
}

pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("config line {}: expected key = value", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Validation(format!("config line {}: empty key", i + 1)));
        }
        pairs.push((key, v.trim().to_string()));
    }
    Ok(pairs)
}

fn json_scalar(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::Array(items) if items.is_empty() => None,
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Array(items) => Some(items.iter().filter_map(json_scalar).collect::<Vec<_>>().join(",")),
        other => Some(other.to_string()),
    }
}

fn parse_manifest(text: &str) -> Result<ConfigFile, CliError> {
    let v: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::Validation(format!("config manifest is not valid JSON: {e}")))?;
    let command = v.get("command").and_then(|c| c.as_str()).map(str::to_string);
    let pairs = v
        .get("config")
        .and_then(|c| c.as_object())
        .map(|obj| {
            obj.iter()
                .filter_map(|(k, val)| json_scalar(val).map(|s| (k.replace('_', "-"), s)))
                .collect()
        })
        .unwrap_or_default();
    Ok(ConfigFile { command, pairs })
}

pub fn load(path: &Path) -> Result<ConfigFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
    if text.trim_start().starts_with('{') {
        parse_manifest(&text)
    } else {
        Ok(ConfigFile {
            command: None,
            pairs: parse_key_values(&text)?,
        })
    }
}

fn flag_given(argv: &[String], key: &str) -> bool {
    let long = format!("--{key}");
    let prefix = format!("--{key}=");
    argv.iter().any(|a| *a == long || a.starts_with(&prefix))
}

/// Locates `--config <path>` or `--config=<path>`.
pub fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Appends file settings to `argv`; flags already present win. Boolean
/// switches are written `key = true`.
pub fn merge(mut argv: Vec<String>, file: &ConfigFile) -> Vec<String> {
    if let Some(cmd) = &file.command {
        if !argv.iter().skip(1).any(|a| SUBCOMMANDS.contains(&a.as_str())) {
            argv.push(cmd.clone());
        }
    }
    for (k, v) in &file.pairs {
        if flag_given(&argv, k) {
            continue;
        }
        match v.as_str() {
            "true" => argv.push(format!("--{k}")),
            "false" => {}
            _ => argv.push(format!("--{k}={v}")),
        }
    }
    argv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn key_values_with_comments() {
        let p = parse_key_values("# c\nn = 8\n\nseed_base=3\n").unwrap();
        assert_eq!(p, vec![("n".into(), "8".into()), ("seed-base".into(), "3".into())]);
        assert!(parse_key_values("oops").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file = ConfigFile {
            command: None,
            pairs: vec![
                ("n".into(), "8".into()),
                ("t".into(), "5".into()),
                ("phi".into(), "true".into()),
            ],
        };
        let out = merge(args(&["dgff", "spectral", "--n", "4"]), &file);
        assert_eq!(out, args(&["dgff", "spectral", "--n", "4", "--t=5", "--phi"]));
    }

    #[test]
    fn manifest_supplies_command() {
        let text = r#"{"command":"decay","config":{"n":16,"times":[1.0,2.5],"init_height":null,"snapshots":[]}}"#;
        let file = parse_manifest(text).unwrap();
        let out = merge(args(&["dgff"]), &file);
        assert_eq!(out, args(&["dgff", "decay", "--n=16", "--times=1.0,2.5"]));
    }
}

//! `key=value` run-configuration files.
//!
//! A file supplies defaults for the long flags of the chosen subcommand
//! (and the global flags). Entries are spliced into the argument list just
//! after the subcommand, ahead of anything typed on the command line, so
//! explicit flags win. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use clap::{ArgAction, Command};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("config key `{key}` is not a flag of `{command}` (valid: {valid})")]
    UnknownKey { key: String, command: String, valid: String },
    #[error("config key `{key}` is a switch; use true or false, got `{value}`")]
    BadSwitch { key: String, value: String },
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped, values may be double-quoted. Keys accept `_` for `-`.
pub fn parse(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"').to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.insert(key, value);
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text)
}

/// Flags implied by `entries` for the (sub)command `cmd`, whose globals
/// come from `root`.
pub fn to_flags(entries: &BTreeMap<String, String>, root: &Command, cmd: &Command) -> Result<Vec<String>, ConfigError> {
    let args: Vec<&clap::Arg> = cmd
        .get_arguments()
        .chain(root.get_arguments().filter(|a| a.is_global_set()))
        .filter(|a| a.get_long().is_some() && a.get_long() != Some("config-file"))
        .collect();
    let mut flags = Vec::new();
    for (key, value) in entries {
        let Some(arg) = args.iter().find(|a| a.get_long() == Some(key.as_str())) else {
            let mut valid: Vec<&str> = args.iter().filter_map(|a| a.get_long()).filter(|l| *l != "help").collect();
            valid.sort();
            valid.dedup();
            return Err(ConfigError::UnknownKey {
                key: key.clone(),
                command: cmd.get_name().to_string(),
                valid: valid.join(", "),
            });
        };
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => flags.push(format!("--{key}")),
                "false" => {}
                _ => {
                    return Err(ConfigError::BadSwitch {
                        key: key.clone(),
                        value: value.clone(),
                    })
                }
            }
        } else {
            flags.push(format!("--{key}={value}"));
        }
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_quotes() {
        let m = parse("# run\nseed = 7\nprior=\"fgdp2\"  # inline\n\nout_dir = /tmp/x\n").unwrap();
        assert_eq!(m["seed"], "7");
        assert_eq!(m["prior"], "fgdp2");
        assert_eq!(m["out-dir"], "/tmp/x");
        assert!(matches!(parse("seed 7"), Err(ConfigError::Syntax { line: 1 })));
    }
}

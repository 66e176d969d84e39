//! `key = value` run configuration files.
//!
//! Blank lines and everything after `#` are ignored. Keys are the long flag
//! names of a subcommand (`batch-size` or `batch_size`). Values in a file act
//! as defaults: flags given on the command line win.

use std::path::Path;

/// Environment variable naming a default configuration file.
pub const CONFIG_ENV: &str = "UTS_CONFIG";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` is a switch and takes true or false, not `{value}`")]
    NotBool { line: usize, key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

pub fn parse(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("expected `key = value`, found `{content}`"),
        })?;
        let key = normalize(key);
        if key.is_empty() {
            return Err(ConfigError::Syntax { line, msg: "empty key".into() });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(ConfigError::Syntax { line, msg: format!("`{key}` set twice") });
        }
        out.push(Entry {
            key,
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Entry>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse(&text)
}

/// How a subcommand flag consumes a configuration value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagKind {
    Value,
    Switch,
}

/// Turns entries into command-line arguments for a subcommand whose long
/// flags are `known`. Unknown keys are rejected.
pub fn to_args(entries: &[Entry], known: &[(String, FlagKind)]) -> Result<Vec<String>, ConfigError> {
    let mut args = Vec::new();
    for e in entries {
        let kind = known
            .iter()
            .find(|(name, _)| *name == e.key)
            .map(|(_, k)| *k)
            .ok_or_else(|| ConfigError::UnknownKey {
                line: e.line,
                key: e.key.clone(),
            })?;
        match kind {
            FlagKind::Value => {
                args.push(format!("--{}", e.key));
                args.push(e.value.clone());
            }
            FlagKind::Switch => match e.value.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => args.push(format!("--{}", e.key)),
                "false" | "0" | "no" => {}
                _ => {
                    return Err(ConfigError::NotBool {
                        line: e.line,
                        key: e.key.clone(),
                        value: e.value.clone(),
                    })
                }
            },
        }
    }
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_values_and_comments() {
        let e = parse("# run\nepochs = 12\n\nbatch_size=8  # small\nlr = 0.01\n").unwrap();
        let kv: Vec<_> = e.iter().map(|e| (e.key.as_str(), e.value.as_str(), e.line)).collect();
        assert_eq!(kv, vec![("epochs", "12", 2), ("batch-size", "8", 4), ("lr", "0.01", 5)]);
    }

    #[test]
    fn syntax_errors() {
        assert_eq!(
            parse("epochs 12").unwrap_err(),
            ConfigError::Syntax { line: 1, msg: "expected `key = value`, found `epochs 12`".into() }
        );
        assert!(matches!(parse("a=1\na=2"), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(parse(" = 3"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn args_from_entries() {
        let known = vec![("epochs".to_string(), FlagKind::Value), ("mixed".to_string(), FlagKind::Switch)];
        let e = parse("epochs = 3\nmixed = true").unwrap();
        assert_eq!(to_args(&e, &known).unwrap(), vec!["--epochs", "3", "--mixed"]);
        let e = parse("mixed = false").unwrap();
        assert!(to_args(&e, &known).unwrap().is_empty());
        let e = parse("mixed = maybe").unwrap();
        assert!(matches!(to_args(&e, &known), Err(ConfigError::NotBool { .. })));
        let e = parse("\nbogus = 1").unwrap();
        assert_eq!(
            to_args(&e, &known).unwrap_err(),
            ConfigError::UnknownKey { line: 2, key: "bogus".into() }
        );
    }
}

//! Flat `key=value` settings merged from a config file and command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Keys accepted in config files. Each has a `--key` flag with dashes for
/// underscores.
pub const KEYS: &[&str] = &[
    "checkpoint",
    "data",
    "out",
    "seed",
    "steps",
    "lr",
    "batch_size",
    "warmup",
    "weight_decay",
    "loss_threshold",
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "max_seq_len",
    "activation",
    "block_layout",
    "use_bias",
    "metric",
    "ar",
    "scope",
    "mode",
    "ig_n",
    "samples",
    "prompts",
    "limit",
    "question",
    "max_new",
];

/// Keys whose repeated occurrences accumulate into a list.
const LIST_KEYS: &[&str] = &["metric", "ar"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, Vec<String>>,
}

impl Settings {
    pub fn parse_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::MissingInput(format!("config file {} not found", path.display()))
            } else {
                CliError::Config(format!("{}: {e}", path.display()))
            }
        })?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", n + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::Config(format!("line {}: unknown key `{key}`", n + 1)));
            }
            let value = value.trim().to_string();
            let entry = s.values.entry(key.to_string()).or_default();
            if LIST_KEYS.contains(&key) {
                entry.extend(split_list(&value));
            } else {
                *entry = vec![value];
            }
        }
        Ok(s)
    }

    /// Replaces `key` with `values` (flags override the file).
    pub fn set(&mut self, key: &str, values: Vec<String>) {
        debug_assert!(KEYS.contains(&key));
        let values = if LIST_KEYS.contains(&key) {
            values.iter().flat_map(|v| split_list(v)).collect()
        } else {
            values
        };
        self.values.insert(key.to_string(), values);
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).and_then(|v| v.last()).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Config(format!("bad value `{v}` for {key}: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|vs| {
                vs.iter()
                    .map(|v| {
                        v.parse::<T>()
                            .map_err(|e| CliError::Config(format!("bad value `{v}` for {key}: {e}")))
                    })
                    .collect()
            })
            .unwrap_or(Ok(Vec::new()))
    }

    /// The effective settings as a config file.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for (k, vs) in &self.values {
            for v in vs {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lists_comments_and_overrides() {
        let mut s = Settings::parse_str(
            "# sweep\nmetric=gxo\nmetric = corrected_gxo\nar=0.2,0.5\nsteps=10\nsteps=20\n",
        )
        .unwrap();
        assert_eq!(s.list::<String>("metric").unwrap(), vec!["gxo", "corrected_gxo"]);
        assert_eq!(s.list::<f64>("ar").unwrap(), vec![0.2, 0.5]);
        assert_eq!(s.get::<usize>("steps").unwrap(), Some(20));
        s.set("ar", vec!["1.0".into()]);
        assert_eq!(s.list::<f64>("ar").unwrap(), vec![1.0]);
        let again = Settings::parse_str(&s.to_config_text()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(Settings::parse_str("steps"), Err(CliError::Config(_))));
        assert!(matches!(Settings::parse_str("colour=red"), Err(CliError::Config(_))));
        let s = Settings::parse_str("steps=many").unwrap();
        assert!(matches!(s.get::<usize>("steps"), Err(CliError::Config(_))));
    }
}

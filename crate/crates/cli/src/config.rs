//! Sectioned key-value experiment configuration.
//!
//! ```text
//! [model]
//! family = witten
//! potential = quartic_double_well(1.0)
//! gamma = 1.0
//! h = 0.1
//! ```
//!
//! The schema is validated up front: unknown sections or keys are rejected,
//! missing required keys are reported together, and every value is parsed
//! before any computation starts.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
pub struct RawConfig {
    sections: Vec<(String, Vec<(String, String)>)>,
    pub hash: String,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError(format!("line {}: unterminated section", lineno + 1)))?
                    .trim()
                    .to_string();
                if sections.iter().any(|(s, _)| *s == name) {
                    return Err(ConfigError(format!("duplicate section [{name}]")));
                }
                sections.push((name, Vec::new()));
            } else if let Some((k, v)) = line.split_once('=') {
                let section = sections.last_mut().ok_or_else(|| {
                    ConfigError(format!("line {}: key outside any section", lineno + 1))
                })?;
                let key = k.trim().to_string();
                if section.1.iter().any(|(kk, _)| *kk == key) {
                    return Err(ConfigError(format!(
                        "duplicate key `{key}` in [{}]",
                        section.0
                    )));
                }
                section.1.push((key, v.trim().to_string()));
            } else {
                return Err(ConfigError(format!(
                    "line {}: expected `key = value` or `[section]`, got `{line}`",
                    lineno + 1
                )));
            }
        }
        let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
        Ok(RawConfig { sections, hash })
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections
            .iter()
            .find(|(s, _)| s == name)
            .map(|(_, kv)| kv.as_slice())
    }

    /// Reject unknown sections/keys and report missing required sections in
    /// one message.
    pub fn validate(&self, schema: &[SectionSchema]) -> Result<(), ConfigError> {
        let mut problems = String::new();
        let known: BTreeSet<&str> = schema.iter().map(|s| s.name).collect();
        for (name, kv) in &self.sections {
            match schema.iter().find(|s| s.name == name) {
                None => {
                    let _ = writeln!(problems, "unknown section [{name}]");
                }
                Some(s) => {
                    for (k, _) in kv {
                        if !s.required.contains(&k.as_str()) && !s.optional.contains(&k.as_str()) {
                            let _ = writeln!(problems, "unknown key `{k}` in [{name}]");
                        }
                    }
                    for req in s.required {
                        if !kv.iter().any(|(k, _)| k == req) {
                            let _ = writeln!(problems, "missing key `{req}` in [{name}]");
                        }
                    }
                }
            }
        }
        for s in schema {
            if s.mandatory && !self.sections.iter().any(|(n, _)| n == s.name) {
                let _ = writeln!(problems, "missing section [{}]", s.name);
            }
        }
        let _ = known;
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(problems.trim_end().to_string()))
        }
    }
}

pub struct SectionSchema {
    pub name: &'static str,
    pub mandatory: bool,
    pub required: &'static [&'static str],
    pub optional: &'static [&'static str],
}

/// Typed view of one section.
pub struct Section<'a> {
    pub name: &'a str,
    kv: &'a [(String, String)],
}

impl<'a> Section<'a> {
    pub fn of(cfg: &'a RawConfig, name: &'a str) -> Result<Self, ConfigError> {
        cfg.section(name)
            .map(|kv| Section { name, kv })
            .ok_or_else(|| ConfigError(format!("missing section [{name}]")))
    }

    pub fn raw(&self, key: &str) -> Option<&'a str> {
        self.kv
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn get(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.raw(key)
            .ok_or_else(|| ConfigError(format!("missing key `{key}` in [{}]", self.name)))
    }

    pub fn str_value(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.get(key)
    }

    pub fn f64_value(&self, key: &str) -> Result<f64, ConfigError> {
        self.get(key)?.parse().map_err(|_| {
            ConfigError(format!(
                "key `{key}` in [{}] is not a number: `{}`",
                self.name,
                self.raw(key).unwrap_or("")
            ))
        })
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.raw(key) {
            Some(_) => self.f64_value(key),
            None => Ok(default),
        }
    }

    pub fn usize_value(&self, key: &str) -> Result<usize, ConfigError> {
        self.get(key)?.parse().map_err(|_| {
            ConfigError(format!("key `{key}` in [{}] is not an integer", self.name))
        })
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.raw(key) {
            Some(_) => self.usize_value(key),
            None => Ok(default),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.raw(key) {
            Some(v) => v.parse().map_err(|_| {
                ConfigError(format!("key `{key}` in [{}] is not an integer", self.name))
            }),
            None => Ok(default),
        }
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>, ConfigError> {
        split_list(self.get(key)?)
            .map(|tok| {
                tok.parse().map_err(|_| {
                    ConfigError(format!(
                        "key `{key}` in [{}]: `{tok}` is not a number",
                        self.name
                    ))
                })
            })
            .collect()
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        split_list(self.get(key)?)
            .map(|tok| {
                tok.parse().map_err(|_| {
                    ConfigError(format!(
                        "key `{key}` in [{}]: `{tok}` is not an integer",
                        self.name
                    ))
                })
            })
            .collect()
    }

    /// Per-axis ranges written `lo:hi, lo:hi, ...`.
    pub fn range_list(&self, key: &str) -> Result<Vec<(f64, f64)>, ConfigError> {
        split_list(self.get(key)?)
            .map(|tok| {
                let (lo, hi) = tok.split_once(':').ok_or_else(|| {
                    ConfigError(format!(
                        "key `{key}` in [{}]: expected `lo:hi`, got `{tok}`",
                        self.name
                    ))
                })?;
                let lo: f64 = lo.trim().parse().map_err(|_| {
                    ConfigError(format!("key `{key}` in [{}]: bad lower bound", self.name))
                })?;
                let hi: f64 = hi.trim().parse().map_err(|_| {
                    ConfigError(format!("key `{key}` in [{}]: bad upper bound", self.name))
                })?;
                Ok((lo, hi))
            })
            .collect()
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split([',', ' '])
        .map(str::trim)
        .filter(|t| !t.is_empty())
}

/// `name` or `name(p1, p2, ...)`.
pub fn parse_potential_ref(s: &str) -> Result<(String, Vec<f64>), ConfigError> {
    let s = s.trim();
    match s.split_once('(') {
        None => Ok((s.to_string(), Vec::new())),
        Some((name, rest)) => {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| ConfigError(format!("unbalanced parentheses in `{s}`")))?;
            let params = split_list(inner)
                .map(|tok| {
                    tok.parse()
                        .map_err(|_| ConfigError(format!("bad parameter `{tok}` in `{s}`")))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            Ok((name.trim().to_string(), params))
        }
    }
}

//! Flat `key = value` files with `[section]` headers.
//!
//! `#` starts a comment. Keys before the first header belong to the
//! unnamed section `""`. Sections keep file order; repeating a header
//! continues the earlier section.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },

    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("line {line}: [{section}] {key} = `{value}`: {msg}")]
    Value {
        line: usize,
        section: String,
        key: String,
        value: String,
        msg: String,
    },

    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },

    #[error("[{section}] {key} is required")]
    Missing { section: String, key: String },

    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: String,
    line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    name: String,
    entries: BTreeMap<String, Entry>,
}

impl Section {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        e.value
            .parse()
            .map(Some)
            .map_err(|err: T::Err| ConfigError::Value {
                line: e.line,
                section: self.name.clone(),
                key: key.to_string(),
                value: e.value.clone(),
                msg: err.to_string(),
            })
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, key: &str) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(key)?.ok_or_else(|| ConfigError::Missing {
            section: self.name.clone(),
            key: key.to_string(),
        })
    }

    /// Accepts true/false, on/off, yes/no, 1/0.
    pub fn flag(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        parse_flag(&e.value)
            .map(Some)
            .ok_or_else(|| ConfigError::Value {
                line: e.line,
                section: self.name.clone(),
                key: key.to_string(),
                value: e.value.clone(),
                msg: "expected true/false, on/off, yes/no or 1/0".into(),
            })
    }

    /// Comma-separated list.
    pub fn list<T>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|err: T::Err| ConfigError::Value {
                    line: e.line,
                    section: self.name.clone(),
                    key: key.to_string(),
                    value: e.value.clone(),
                    msg: err.to_string(),
                })
            })
            .collect::<Result<Vec<T>, _>>()
            .map(Some)
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        match self
            .entries
            .iter()
            .find(|(k, _)| !allowed.contains(&k.as_str()))
        {
            Some((k, e)) => Err(ConfigError::UnknownKey {
                line: e.line,
                section: self.name.clone(),
                key: k.clone(),
            }),
            None => Ok(()),
        }
    }
}

pub fn parse_flag(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    sections: Vec<Section>,
    /// Directory relative paths are resolved against.
    base_dir: PathBuf,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config {
            sections: vec![Section::default()],
            base_dir: PathBuf::new(),
        };
        let mut cur = 0;
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax {
                        line,
                        msg: format!("unterminated section header `{s}`"),
                    })?
                    .trim();
                if name.is_empty() {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: "empty section name".into(),
                    });
                }
                cur = match cfg.sections.iter().position(|x| x.name == name) {
                    Some(i) => i,
                    None => {
                        cfg.sections.push(Section {
                            name: name.to_string(),
                            entries: BTreeMap::new(),
                        });
                        cfg.sections.len() - 1
                    }
                };
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{s}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "empty key".into(),
                });
            }
            let sec = &mut cfg.sections[cur];
            if let Some(prev) = sec.entries.get(k) {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("duplicate key `{k}` (first set on line {})", prev.line),
                });
            }
            sec.entries.insert(
                k.to_string(),
                Entry {
                    value: v.to_string(),
                    line,
                },
            );
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// The named section, or an empty one.
    pub fn section(&self, name: &str) -> Section {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .cloned()
            .unwrap_or_else(|| Section {
                name: name.to_string(),
                entries: BTreeMap::new(),
            })
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    /// Sections named `<prefix>.<suffix>`, in file order.
    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Section)> {
        self.sections.iter().filter_map(move |s| {
            s.name
                .strip_prefix(prefix)
                .and_then(|r| r.strip_prefix('.'))
                .map(|suffix| (suffix, s))
        })
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|s| s.name.as_str())
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
seed = 7   # trailing comment
[model]
preset = M1
rows_per_table = 2000

[option.HW-L]
qps_per_host = 240
[option.HW-SS+SDM]
qps_per_host = 120
power = 0.4
[model]
batch_items = 4
";

    #[test]
    fn sections_keys_and_order() {
        let c = Config::parse(SAMPLE).unwrap();
        assert_eq!(c.section("").get::<u64>("seed").unwrap(), Some(7));
        let m = c.section("model");
        assert_eq!(m.raw("preset"), Some("M1"));
        assert_eq!(m.get::<usize>("batch_items").unwrap(), Some(4));
        let opts: Vec<&str> = c.with_prefix("option").map(|(n, _)| n).collect();
        assert_eq!(opts, vec!["HW-L", "HW-SS+SDM"]);
        assert!(c.section("nope").get::<u8>("x").unwrap().is_none());
    }

    #[test]
    fn bad_values_name_the_line() {
        let c = Config::parse("[a]\nx = 1\ny = abc\n").unwrap();
        let e = c.section("a").get::<u32>("y").unwrap_err();
        assert!(matches!(e, ConfigError::Value { line: 3, .. }), "{e}");
        assert!(e.to_string().contains("line 3"));
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(
            Config::parse("[a\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("novalue\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("a = 1\na = 2\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
    }

    #[test]
    fn flags_lists_and_unknown_keys() {
        let c = Config::parse("[e]\ndeprune = on\nids = 1, 2,3\nbad = maybe\n").unwrap();
        let e = c.section("e");
        assert_eq!(e.flag("deprune").unwrap(), Some(true));
        assert_eq!(e.list::<u32>("ids").unwrap(), Some(vec![1, 2, 3]));
        assert!(e.flag("bad").is_err());
        assert!(matches!(
            e.check_keys(&["deprune", "ids"]),
            Err(ConfigError::UnknownKey { line: 4, .. })
        ));
    }

    #[test]
    fn missing_required() {
        let c = Config::parse("").unwrap();
        assert!(matches!(
            c.section("scenario").require::<f64>("demand_qps"),
            Err(ConfigError::Missing { .. })
        ));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        std::fs::write(&p, "[workload]\ntrace = t.trace\n").unwrap();
        let c = Config::read(&p).unwrap();
        assert_eq!(c.resolve("t.trace"), dir.path().join("t.trace"));
        assert_eq!(c.resolve("/abs/x"), PathBuf::from("/abs/x"));
    }
}

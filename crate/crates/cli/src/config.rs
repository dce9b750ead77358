//! Sectioned `key = value` configuration files.
//!
//! ```text
//! # comment
//! [section]
//! key = value      ; trailing comment
//! ```
//!
//! Quantities may carry a unit suffix (`13 ns`, `67 MHz`, `8 mT`, `90 deg`);
//! a suffix of the wrong dimension is an error. Lists are comma separated.

use std::collections::BTreeMap;
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{}, key `{key}`: {msg}", location(*line))]
    Value { line: usize, key: String, msg: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

/// Line 0 marks a value given on the command line.
fn location(line: usize) -> String {
    if line == 0 {
        "command line".to_string()
    } else {
        format!("line {line}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

impl Entry {
    pub fn path(&self) -> String {
        format!("{}.{}", self.section, self.key)
    }

    pub fn error(&self, msg: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            line: self.line,
            key: self.path(),
            msg: msg.into(),
        }
    }
}

/// Parsed file: entries in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ini {
    pub entries: Vec<Entry>,
    /// Section name and header line.
    pub sections: Vec<(String, usize)>,
}

fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if (b == b'#' || b == b';') && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Ini {
    pub fn parse(text: &str) -> Result<Ini, ConfigError> {
        let mut ini = Ini::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = strip_comment(raw).trim();
            if s.is_empty() {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| is_ident(n))
                    .ok_or_else(|| ConfigError::Syntax { line, msg: format!("malformed section header `{s}`") })?;
                if let Some((_, first)) = ini.sections.iter().find(|(n, _)| n == name) {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: format!("section [{name}] repeated (first on line {first})"),
                    });
                }
                ini.sections.push((name.to_string(), line));
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("expected `key = value`, got `{s}`") })?;
            let key = key.trim();
            if !is_ident(key) {
                return Err(ConfigError::Syntax { line, msg: format!("invalid key `{key}`") });
            }
            let section = section
                .clone()
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("key `{key}` appears before any [section]") })?;
            if let Some(prev) = ini.entries.iter().find(|e| e.section == section && e.key == key) {
                return Err(ConfigError::Value {
                    line,
                    key: prev.path(),
                    msg: format!("set twice (first on line {})", prev.line),
                });
            }
            ini.entries.push(Entry {
                section,
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(ini)
    }

    /// Applies a `section.key=value` override, adding the section if needed.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::Invalid(format!("override `{assignment}` is not `section.key=value`"));
        let (path, value) = assignment.split_once('=').ok_or_else(bad)?;
        let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
        if !is_ident(section) || !is_ident(key) {
            return Err(bad());
        }
        if !self.has_section(section) {
            self.sections.push((section.to_string(), 0));
        }
        let value = value.trim().to_string();
        match self.entries.iter_mut().find(|e| e.section == section && e.key == key) {
            Some(e) => {
                e.value = value;
                e.line = 0;
            }
            None => self.entries.push(Entry {
                section: section.to_string(),
                key: key.to_string(),
                value,
                line: 0,
            }),
        }
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.section == section && e.key == key)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.iter().any(|(s, _)| s == section)
    }

    /// Rejects sections and keys not listed in `schema`.
    pub fn check_schema(&self, schema: &BTreeMap<&str, Vec<&str>>) -> Result<(), ConfigError> {
        for (name, line) in &self.sections {
            if !schema.contains_key(name.as_str()) {
                let known: Vec<&str> = schema.keys().copied().collect();
                let msg = format!("unknown section [{name}] (expected one of: {})", known.join(", "));
                return Err(if *line == 0 {
                    ConfigError::Invalid(format!("command line: {msg}"))
                } else {
                    ConfigError::Syntax { line: *line, msg }
                });
            }
        }
        for e in &self.entries {
            let keys = &schema[e.section.as_str()];
            if !keys.contains(&e.key.as_str()) {
                return Err(e.error(format!("unknown key (allowed in [{}]: {})", e.section, keys.join(", "))));
            }
        }
        Ok(())
    }

    /// `section.key=value` lines sorted by path, leaving out `skip_section`:
    /// the input to the config hash.
    pub fn canonical(&self, skip_section: &str) -> String {
        let mut lines: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.section != skip_section)
            .map(|e| format!("{}={}\n", e.path(), e.value))
            .collect();
        lines.sort();
        lines.concat()
    }
}

/// Physical dimension of a quantity, selecting the accepted unit suffixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Time,
    Frequency,
    Field,
    Angle,
    None,
}

impl Unit {
    fn suffixes(self) -> &'static [(&'static str, f64)] {
        match self {
            Unit::Time => &[("ps", 1e-12), ("ns", 1e-9), ("us", 1e-6), ("µs", 1e-6), ("ms", 1e-3), ("s", 1.0)],
            Unit::Frequency => &[("GHz", 1e9), ("MHz", 1e6), ("kHz", 1e3), ("Hz", 1.0)],
            Unit::Field => &[("mT", 1e-3), ("uT", 1e-6), ("µT", 1e-6), ("nT", 1e-9), ("G", 1e-4), ("T", 1.0)],
            Unit::Angle => &[("deg", PI / 180.0), ("rad", 1.0)],
            Unit::None => &[],
        }
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parses `value` with an optional unit suffix of dimension `unit`.
pub fn parse_quantity(value: &str, unit: Unit) -> Result<f64, String> {
    if let Some(v) = parse_number(value) {
        return Ok(v);
    }
    for &(suffix, scale) in unit.suffixes() {
        if let Some(v) = value.strip_suffix(suffix).and_then(parse_number) {
            return Ok(v * scale);
        }
    }
    let accepted: Vec<&str> = unit.suffixes().iter().map(|s| s.0).collect();
    Err(if accepted.is_empty() {
        format!("expected a number, got `{value}`")
    } else {
        format!("expected a number with optional unit ({}), got `{value}`", accepted.join(", "))
    })
}

/// Typed access to one parsed file.
#[derive(Clone, Copy)]
pub struct Reader<'a> {
    pub ini: &'a Ini,
}

impl<'a> Reader<'a> {
    pub fn new(ini: &'a Ini) -> Self {
        Reader { ini }
    }

    pub fn entry(&self, section: &str, key: &str) -> Option<&'a Entry> {
        self.ini.get(section, key)
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&'a Entry, ConfigError> {
        self.entry(section, key).ok_or_else(|| ConfigError::Missing(format!("{section}.{key}")))
    }

    pub fn quantity(&self, section: &str, key: &str, unit: Unit) -> Result<Option<f64>, ConfigError> {
        self.entry(section, key)
            .map(|e| parse_quantity(&e.value, unit).map_err(|m| e.error(m)))
            .transpose()
    }

    pub fn quantity_or(&self, section: &str, key: &str, unit: Unit, default: f64) -> Result<f64, ConfigError> {
        Ok(self.quantity(section, key, unit)?.unwrap_or(default))
    }

    /// A quantity that must satisfy `check`; `what` describes the condition.
    pub fn checked(
        &self,
        section: &str,
        key: &str,
        unit: Unit,
        default: Option<f64>,
        check: impl Fn(f64) -> bool,
        what: &str,
    ) -> Result<f64, ConfigError> {
        let v = match (self.quantity(section, key, unit)?, default) {
            (Some(v), _) => v,
            (None, Some(d)) => return Ok(d),
            (None, None) => return Err(ConfigError::Missing(format!("{section}.{key}"))),
        };
        if check(v) {
            Ok(v)
        } else {
            Err(self.require(section, key)?.error(format!("{what}, got {v}")))
        }
    }

    pub fn list(&self, section: &str, key: &str, unit: Unit) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        let items: Result<Vec<f64>, String> = e.value.split(',').map(|v| parse_quantity(v.trim(), unit)).collect();
        let items = items.map_err(|m| e.error(m))?;
        if items.is_empty() {
            return Err(e.error("empty list"));
        }
        Ok(Some(items))
    }

    pub fn count_list(&self, section: &str, key: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        let Some(e) = self.entry(section, key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| e.error(format!("expected positive integers, got `{}`", v.trim())))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    pub fn count(&self, section: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        self.entry(section, key)
            .map(|e| e.value.parse::<usize>().map_err(|_| e.error(format!("expected a non-negative integer, got `{}`", e.value))))
            .transpose()
    }

    pub fn flag(&self, section: &str, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.entry(section, key) {
            None => Ok(default),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(e.error(format!("expected true/false, got `{}`", e.value))),
            },
        }
    }

    pub fn text(&self, section: &str, key: &str) -> Option<&'a str> {
        self.entry(section, key).map(|e| e.value.as_str())
    }

    pub fn choice(&self, section: &str, key: &str, options: &[&'static str], default: &'static str) -> Result<&'static str, ConfigError> {
        match self.entry(section, key) {
            None => Ok(default),
            Some(e) => options
                .iter()
                .find(|o| **o == e.value)
                .copied()
                .ok_or_else(|| e.error(format!("expected one of {}, got `{}`", options.join(", "), e.value))),
        }
    }

    /// `name = value` pairs separated by commas, values without units.
    pub fn assignments(&self, section: &str, key: &str) -> Result<BTreeMap<String, f64>, ConfigError> {
        let mut out = BTreeMap::new();
        let Some(e) = self.entry(section, key) else {
            return Ok(out);
        };
        for item in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| e.error(format!("expected `name=value`, got `{item}`")))?;
            let v = parse_number(value).ok_or_else(|| e.error(format!("`{}` is not a number", value.trim())))?;
            out.insert(name.trim().to_string(), v);
        }
        Ok(out)
    }

    pub fn error_at(&self, section: &str, key: &str, msg: impl Into<String>) -> ConfigError {
        match self.entry(section, key) {
            Some(e) => e.error(msg),
            None => ConfigError::Invalid(format!("{section}.{key}: {}", msg.into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> BTreeMap<&'static str, Vec<&'static str>> {
        BTreeMap::from([("sim", vec!["dt", "n_traj"]), ("sweep", vec!["start", "n"])])
    }

    #[test]
    fn sections_keys_and_comments() {
        let ini = Ini::parse("# top\n[sim]\ndt = 0.1 ns ; step\nn_traj=20\n\n[sweep]\nstart = 1e-9 # s\n").unwrap();
        assert_eq!(ini.entries.len(), 3);
        let r = Reader::new(&ini);
        assert!((r.quantity("sim", "dt", Unit::Time).unwrap().unwrap() - 0.1e-9).abs() < 1e-24);
        assert_eq!(r.count("sim", "n_traj").unwrap(), Some(20));
        ini.check_schema(&schema()).unwrap();
    }

    #[test]
    fn unknown_key_reports_line_and_key() {
        let ini = Ini::parse("[sim]\ndt = 1e-10\nn_trajs = 5\n").unwrap();
        match ini.check_schema(&schema()).unwrap_err() {
            ConfigError::Value { line, key, .. } => {
                assert_eq!(line, 3);
                assert_eq!(key, "sim.n_trajs");
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn unknown_section_and_duplicates() {
        let ini = Ini::parse("[sim]\n[noise]\nb = 1\n").unwrap();
        assert!(matches!(ini.check_schema(&schema()), Err(ConfigError::Syntax { line: 2, .. })));
        assert!(matches!(Ini::parse("[sim]\ndt=1\ndt=2\n"), Err(ConfigError::Value { line: 3, .. })));
        assert!(matches!(Ini::parse("dt=1\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(Ini::parse("[sim]\njunk\n"), Err(ConfigError::Syntax { line: 2, .. })));
    }

    #[test]
    fn overrides_replace_and_add() {
        let mut ini = Ini::parse("[sim]\ndt = 1e-10\n").unwrap();
        ini.set("sim.dt=2e-10").unwrap();
        ini.set("sweep.n = 3").unwrap();
        assert_eq!(ini.get("sim", "dt").unwrap().value, "2e-10");
        assert_eq!(ini.get("sweep", "n").unwrap().line, 0);
        assert!(ini.set("sweep").is_err());
        ini.set("sim.bogus=1").unwrap();
        let e = ini.check_schema(&schema()).unwrap_err();
        assert!(e.to_string().starts_with("command line, key `sim.bogus`"), "{e}");
    }

    #[test]
    fn units_are_dimension_checked() {
        assert_eq!(parse_quantity("67 MHz", Unit::Frequency).unwrap(), 67e6);
        assert_eq!(parse_quantity("8mT", Unit::Field).unwrap(), 8e-3);
        assert!((parse_quantity("13 ns", Unit::Time).unwrap() - 13e-9).abs() < 1e-22);
        assert!((parse_quantity("90 deg", Unit::Angle).unwrap() - PI / 2.0).abs() < 1e-15);
        assert!(parse_quantity("13 MHz", Unit::Time).is_err());
        assert!(parse_quantity("5 ns", Unit::None).is_err());
        assert!(parse_quantity("nan", Unit::None).is_err());
    }

    #[test]
    fn lists_and_assignments() {
        let ini = Ini::parse("[p]\nn = 1, 4, 16\nf = 12 MHz, 18MHz\nfix = b=0, d = 0\nbad = 1, x\n").unwrap();
        let r = Reader::new(&ini);
        assert_eq!(r.count_list("p", "n").unwrap().unwrap(), vec![1, 4, 16]);
        assert_eq!(r.list("p", "f", Unit::Frequency).unwrap().unwrap(), vec![12e6, 18e6]);
        assert_eq!(r.assignments("p", "fix").unwrap().len(), 2);
        assert!(matches!(r.count_list("p", "bad"), Err(ConfigError::Value { line: 5, .. })));
    }
}

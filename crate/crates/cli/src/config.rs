//! Flat `key = value` configuration files. Command-line flags take
//! precedence over file values, which take precedence over defaults.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;

use crate::error::CliError;

pub struct Settings {
    table: toml::Table,
    used: RefCell<BTreeSet<String>>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let table = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::invalid(format!("cannot read config {}: {e}", p.display())))?;
                let table: toml::Table = toml::from_str(&text)
                    .map_err(|e| CliError::invalid(format!("malformed config {}: {e}", p.display())))?;
                if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table() || v.is_array()) {
                    return Err(CliError::invalid(format!(
                        "config key '{k}' must be a plain value"
                    )));
                }
                table
            }
        };
        Ok(Self {
            table,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    fn raw(&self, key: &str) -> Option<&toml::Value> {
        let key = key.replace('-', "_");
        let v = self.table.get(&key);
        self.used.borrow_mut().insert(key);
        v
    }

    fn bad(key: &str, want: &str) -> CliError {
        CliError::invalid(format!("config key '{key}' must be {want}"))
    }

    pub fn f64(&self, key: &str, flag: Option<f64>) -> Result<Option<f64>, CliError> {
        let file = match self.raw(key) {
            None => None,
            Some(toml::Value::Float(f)) => Some(*f),
            Some(toml::Value::Integer(i)) => Some(*i as f64),
            Some(_) => return Err(Self::bad(key, "a number")),
        };
        Ok(flag.or(file))
    }

    pub fn u64(&self, key: &str, flag: Option<u64>) -> Result<Option<u64>, CliError> {
        let file = match self.raw(key) {
            None => None,
            Some(toml::Value::Integer(i)) if *i >= 0 => Some(*i as u64),
            Some(_) => return Err(Self::bad(key, "a non-negative integer")),
        };
        Ok(flag.or(file))
    }

    pub fn usize(&self, key: &str, flag: Option<usize>) -> Result<Option<usize>, CliError> {
        Ok(self.u64(key, flag.map(|v| v as u64))?.map(|v| v as usize))
    }

    pub fn string(&self, key: &str, flag: Option<&str>) -> Result<Option<String>, CliError> {
        let file = match self.raw(key) {
            None => None,
            Some(toml::Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(Self::bad(key, "a string")),
        };
        Ok(flag.map(str::to_string).or(file))
    }

    pub fn flag(&self, key: &str, flag: bool) -> Result<bool, CliError> {
        let file = match self.raw(key) {
            None => false,
            Some(toml::Value::Boolean(b)) => *b,
            Some(_) => return Err(Self::bad(key, "true or false")),
        };
        Ok(flag || file)
    }

    /// Rejects keys in the file that the command never asked for.
    pub fn finish(&self) -> Result<(), CliError> {
        let used = self.used.borrow();
        match self.table.keys().find(|k| !used.contains(k.as_str())) {
            Some(k) => Err(CliError::invalid(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }
}

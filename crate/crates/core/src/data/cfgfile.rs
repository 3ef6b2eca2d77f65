//! Line-oriented `key = value` files with `[section]` headers, used by
//! dataset metadata, checkpoint manifests and run configs.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CfgFile {
    sections: Vec<CfgSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfgSection {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl CfgSection {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

impl CfgFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[CfgSection] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&CfgSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Section by name, created at the end if absent.
    pub fn section_mut(&mut self, name: &str) -> &mut CfgSection {
        if let Some(i) = self.sections.iter().position(|s| s.name == name) {
            &mut self.sections[i]
        } else {
            self.sections.push(CfgSection {
                name: name.to_string(),
                entries: Vec::new(),
            });
            self.sections.last_mut().unwrap()
        }
    }

    /// Insert or replace `section.key`.
    pub fn set(&mut self, section: &str, key: &str, value: impl fmt::Display) {
        let s = self.section_mut(section);
        let value = value.to_string();
        if let Some(e) = s.entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value;
        } else {
            s.entries.push((key.to_string(), value));
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section).and_then(|s| s.get(key))
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key)
            .ok_or_else(|| Error::Config(format!("missing key {section}.{key}")))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = CfgFile::new();
        let mut current: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", lineno + 1)))?;
                cfg.sections.push(CfgSection {
                    name: name.trim().to_string(),
                    entries: Vec::new(),
                });
                current = Some(cfg.sections.len() - 1);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let idx = current
                .ok_or_else(|| Error::Config(format!("line {}: key outside any [section]", lineno + 1)))?;
            cfg.sections[idx]
                .entries
                .push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for CfgFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            writeln!(f, "[{}]", s.name)?;
            for (k, v) in &s.entries {
                writeln!(f, "{k} = {v}")?;
            }
        }
        Ok(())
    }
}

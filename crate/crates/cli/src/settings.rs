//! Flat `key=value` settings covering the model config and the training plan.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dua::model::DuaConfig;
use dua::training::TrainPlan;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub config: DuaConfig,
    pub plan: TrainPlan,
}

impl Settings {
    /// Routes `key` to whichever struct owns it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        if self.config.set(key, value)? || self.plan.set(key, value)? {
            return Ok(());
        }
        bail!("unknown key `{key}`")
    }

    /// Blank lines and lines starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key=value, got `{line}`", i + 1);
            };
            s.set(k, v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Applies `key=value` overrides in order.
    pub fn apply<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not key=value");
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.config.entries().into_iter().chain(self.plan.entries()) {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_halves() {
        let s = Settings::from_text("# toy\nemb_dim = 8\n\nbatch_size=3\npool=2,2\n").unwrap();
        assert_eq!(s.config.emb_dim, 8);
        assert_eq!(s.config.pool, (2, 2));
        assert_eq!(s.plan.batch_size, 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Settings::from_text("emb_dim=8\nhidden_size=3\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("hidden_size") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn text_round_trips() {
        let mut s = Settings::default();
        s.apply(["epochs=2", "ablate_maf=true", "learning_rate=0.01"]).unwrap();
        assert_eq!(Settings::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn malformed_lines_fail() {
        assert!(Settings::from_text("emb_dim 8").is_err());
        assert!(Settings::from_text("emb_dim=eight").is_err());
        assert!(Settings::default().apply(["epochs"]).is_err());
    }
}

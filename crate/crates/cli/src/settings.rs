//! Flat `key = value` config files merged with command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Resolved settings of one command. Flags win over file values, file values
/// over defaults. Every resolved value is remembered for the run snapshot.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected key = value", no + 1))?;
        let key = k.trim().replace('_', "-");
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("config line {}: `{key}` given twice", no + 1);
        }
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_config(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => BTreeMap::new(),
        };
        Ok(Settings {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.file.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(key: &str, text: &str) -> Result<T>
    where
        T::Err: Display,
    {
        text.parse().map_err(|e| anyhow!("config `{key}`: cannot parse `{text}`: {e}"))
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.raw(key)) {
            (Some(v), _) => v,
            (None, Some(text)) => Self::parse(key, text)?,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// A value with no default; `none` in a file means unset.
    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let value = match (flag, self.raw(key)) {
            (Some(v), _) => Some(v),
            (None, Some("none")) | (None, None) => None,
            (None, Some(text)) => Some(Self::parse(key, text)?),
        };
        let shown = value.as_ref().map_or_else(|| "none".to_string(), ToString::to_string);
        self.resolved.insert(key.to_string(), shown);
        Ok(value)
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| anyhow!("missing required setting `{key}` (flag --{key} or config file)"))
    }

    pub fn flag(&mut self, key: &str, flag: bool) -> Result<bool> {
        let from_file = match self.raw(key) {
            Some(t) => Self::parse::<bool>(key, t)?,
            None => false,
        };
        let v = flag || from_file;
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Fails on config keys the command never asked for.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.resolved.contains_key(*k)).collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {unknown:?}");
        }
        Ok(())
    }

    pub fn snapshot(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Comma-separated list.
pub fn parse_list<T: FromStr>(key: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    text.split(',')
        .map(|s| s.trim().parse().map_err(|e| anyhow!("`{key}`: bad item `{s}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let mut s = Settings {
            file: parse_config("# comment\nseed = 4\nsteps=10\n").unwrap(),
            resolved: BTreeMap::new(),
        };
        assert_eq!(s.get("seed", Some(9u64), 0).unwrap(), 9);
        assert_eq!(s.get("steps", None, 1usize).unwrap(), 10);
        assert_eq!(s.get("lr", None, 0.5f64).unwrap(), 0.5);
        s.finish().unwrap();
        assert_eq!(s.snapshot(), "lr = 0.5\nseed = 9\nsteps = 10\n");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut s = Settings::default();
        s.get("lr", None, 1e-4f64).unwrap();
        s.optional::<usize>("subsample", None).unwrap();
        let mut again = Settings {
            file: parse_config(&s.snapshot()).unwrap(),
            resolved: BTreeMap::new(),
        };
        assert_eq!(again.get("lr", None, 0.0f64).unwrap(), 1e-4);
        assert_eq!(again.optional::<usize>("subsample", None).unwrap(), None);
        assert_eq!(again.snapshot(), s.snapshot());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(parse_config("novalue").is_err());
        assert!(parse_config("a = 1\na = 2").is_err());
        let s = Settings {
            file: parse_config("typo = 1").unwrap(),
            resolved: BTreeMap::new(),
        };
        assert!(s.finish().is_err());
        let mut s = Settings {
            file: parse_config("steps = many").unwrap(),
            resolved: BTreeMap::new(),
        };
        assert!(s.get("steps", None, 1usize).is_err());
    }

    #[test]
    fn underscores_are_dashes() {
        let mut s = Settings {
            file: parse_config("batch_size = 3").unwrap(),
            resolved: BTreeMap::new(),
        };
        assert_eq!(s.get("batch-size", None, 1usize).unwrap(), 3);
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<usize>("sizes", "64, 256,1024").unwrap(), vec![64, 256, 1024]);
        assert!(parse_list::<usize>("sizes", "64,x").is_err());
    }
}

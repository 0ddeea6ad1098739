//! Plain-text `key = value` settings with `#` comments, layered as
//! defaults < config file < command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub fn parse(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key = value, got '{}'", n + 1, raw.trim());
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("in config {}", path.display()))
}

/// Resolves settings and remembers the values used, for echoing.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(file: BTreeMap<String, String>) -> Self {
        Self {
            file,
            used: BTreeMap::new(),
        }
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?.unwrap_or(default);
        self.used.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self
            .lookup(key, flag)?
            .ok_or_else(|| anyhow!("missing required setting '{key}' (flag --{key} or config key)"))?;
        self.used.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?;
        if let Some(v) = &v {
            self.used.insert(key.to_string(), v.to_string());
        }
        Ok(v)
    }

    fn lookup<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key '{key}': cannot parse '{s}': {e}")),
            None => Ok(None),
        }
    }

    /// Config keys that no setting consumed.
    pub fn unused(&self) -> Vec<&str> {
        self.file
            .keys()
            .filter(|k| !self.used.contains_key(*k))
            .map(String::as_str)
            .collect()
    }

    pub fn echo(&self) -> String {
        self.used.iter().map(|(k, v)| format!("  {k} = {v}\n")).collect()
    }
}

/// Comma-separated list of values.
pub fn list<T>(s: &str) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|e| anyhow!("cannot parse '{t}': {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let m = parse("# header\nalpha = 3 # trailing\n\nbasis_count=200\n").unwrap();
        assert_eq!(m.get("alpha").unwrap(), "3");
        assert_eq!(m.get("basis-count").unwrap(), "200");
        assert!(parse("just words\n").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut r = Resolver::new(parse("alpha = 3\ntrunc = 7\n").unwrap());
        assert_eq!(r.get("alpha", Some(5.0), 1.0).unwrap(), 5.0);
        assert_eq!(r.get("trunc", None, 10usize).unwrap(), 7);
        assert_eq!(r.get("warm", None, 200usize).unwrap(), 200);
        assert!(r.echo().contains("trunc = 7"));
        assert!(r.require::<String>("train", None).is_err());
    }

    #[test]
    fn reports_bad_values_and_unused_keys() {
        let mut r = Resolver::new(parse("alpha = x\nbogus = 1\n").unwrap());
        assert!(r.get("alpha", None, 1.0).is_err());
        assert_eq!(r.unused(), vec!["alpha", "bogus"]);
    }
}

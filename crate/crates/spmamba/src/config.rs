//! Line-oriented `key = value` configuration text.
//!
//! The format is deliberately tiny: one assignment per line, `#` starts a
//! full-line comment, blank lines are ignored. Keys are lowercase
//! `[a-z0-9_.]`, values are free text without leading/trailing whitespace.
//! Duplicate keys are an error rather than a silent override. Entries keep
//! their order so an echoed file diffs cleanly against its source.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'.')
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    file: file.into(),
                    line: line_no,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if !valid_key(key) {
                return Err(Error::Parse {
                    file: file.into(),
                    line: line_no,
                    msg: format!("invalid key {key:?}"),
                });
            }
            if value.is_empty() {
                return Err(Error::Parse {
                    file: file.into(),
                    line: line_no,
                    msg: format!("empty value for key {key:?}"),
                });
            }
            if cfg.get(key).is_some() {
                return Err(Error::Parse {
                    file: file.into(),
                    line: line_no,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            cfg.entries.push((key.to_string(), value.to_string()));
        }
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        assert!(valid_key(key), "internal config key {key:?} is invalid");
        let value = value.to_string();
        for (k, v) in &mut self.entries {
            if k == key {
                *v = value;
                return;
            }
        }
        self.entries.push((key.to_string(), value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing config key {key:?}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key {key:?}: bad integer {v:?}")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key {key:?}: bad integer {v:?}")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v = self.require(key)?;
        let x: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("key {key:?}: bad number {v:?}")))?;
        if !x.is_finite() {
            return Err(Error::Config(format!("key {key:?}: non-finite number")));
        }
        Ok(x)
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(Error::Config(format!(
                "key {key:?}: expected true or false, got {v:?}"
            ))),
        }
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.require(key)
    }

    /// Comma-separated list of integers, e.g. `1,1,1,1`.
    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.require(key)?;
        v.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key {key:?}: bad list entry {p:?}")))
            })
            .collect()
    }

    /// Reject any key outside `allowed` so typos fail loudly.
    pub fn require_known(&self, allowed: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !allowed.contains(&k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_echo_round_trip() {
        let text = "# run settings\nwidth = 16\nlr=0.01\n\npsa_level = p5\n";
        let cfg = KvConfig::parse(text, "mem").unwrap();
        assert_eq!(cfg.get_usize("width").unwrap(), 16);
        assert_eq!(cfg.get_f64("lr").unwrap(), 0.01);
        assert_eq!(cfg.get_str("psa_level").unwrap(), "p5");
        let echoed = cfg.to_text();
        assert_eq!(KvConfig::parse(&echoed, "mem").unwrap(), cfg);
    }

    #[test]
    fn rejects_malformed_lines() {
        for text in [
            "just words\n",
            "Key = 1\n",      // uppercase key
            "k y = 1\n",      // space in key
            "k =\n",          // empty value
            "k = 1\nk = 2\n", // duplicate
            "= 3\n",          // empty key
        ] {
            assert!(
                matches!(KvConfig::parse(text, "mem"), Err(Error::Parse { .. })),
                "accepted {text:?}"
            );
        }
    }

    #[test]
    fn typed_getters_validate() {
        let cfg = KvConfig::parse("a = x\nb = 1.5\nc = true\nd = 1,2,3\n", "mem").unwrap();
        assert!(cfg.get_usize("a").is_err());
        assert!(cfg.get_bool("b").is_err());
        assert!(cfg.get_bool("c").unwrap());
        assert_eq!(cfg.get_usize_list("d").unwrap(), vec![1, 2, 3]);
        assert!(cfg.get_f64("missing").is_err());
        assert!(cfg.require_known(&["a", "b", "c"]).is_err());
        assert!(cfg.require_known(&["a", "b", "c", "d"]).is_ok());
    }

    #[test]
    fn set_overwrites_in_place() {
        let mut cfg = KvConfig::new();
        cfg.set("x", 1);
        cfg.set("y", 2);
        cfg.set("x", 9);
        assert_eq!(cfg.to_text(), "x = 9\ny = 2\n");
    }
}

//! Checkpoint container: a config text block plus ordered (name, tensor)
//! entries, in one flat binary file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPCK"  u32 version
//! u64 config_len   config_len bytes of UTF-8 config text
//! u64 entry_count
//! entry_count times:  u64 name_len  name bytes  tensor blob
//! ```
//!
//! The decoder validates every length against the remaining input before
//! allocating, rejects duplicate or empty names and trailing garbage, and
//! names the byte offset in errors. Entry order is preserved: two
//! checkpoints of the same model are byte-comparable.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u32 = 1;
/// Upper bound on name and config lengths; real ones are a few hundred bytes.
const MAX_TEXT: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&tensor.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |pos: usize, msg: String| Error::Data(format!("checkpoint byte {pos}: {msg}"));
        let take_u64 = |pos: &mut usize| -> Result<u64> {
            if *pos + 8 > bytes.len() {
                return Err(fail(*pos, "truncated length field".into()));
            }
            let v = u64::from_le_bytes(bytes[*pos..*pos + 8].try_into().unwrap());
            *pos += 8;
            Ok(v)
        };

        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut pos = 8usize;

        let config_len = take_u64(&mut pos)?;
        if config_len > MAX_TEXT || pos as u64 + config_len > bytes.len() as u64 {
            return Err(fail(pos, format!("bad config length {config_len}")));
        }
        let config_text = std::str::from_utf8(&bytes[pos..pos + config_len as usize])
            .map_err(|_| fail(pos, "config text is not UTF-8".into()))?
            .to_string();
        pos += config_len as usize;

        let count = take_u64(&mut pos)?;
        // Each entry needs at least a name length field and a tensor header.
        if count > (bytes.len() as u64 - pos as u64) / 16 + 1 {
            return Err(fail(pos, format!("implausible entry count {count}")));
        }
        let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count as usize);
        for i in 0..count {
            let name_len = take_u64(&mut pos)?;
            if name_len == 0 || name_len > MAX_TEXT || pos as u64 + name_len > bytes.len() as u64 {
                return Err(fail(pos, format!("entry {i}: bad name length {name_len}")));
            }
            let name = std::str::from_utf8(&bytes[pos..pos + name_len as usize])
                .map_err(|_| fail(pos, format!("entry {i}: name is not UTF-8")))?
                .to_string();
            pos += name_len as usize;
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(fail(pos, format!("duplicate entry name {name:?}")));
            }
            let (tensor, used) = Tensor::from_bytes(&bytes[pos..])
                .map_err(|e| fail(pos, format!("entry {name:?}: {e}")))?;
            pos += used;
            entries.push((name, tensor));
        }
        if pos != bytes.len() {
            return Err(fail(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { config_text, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

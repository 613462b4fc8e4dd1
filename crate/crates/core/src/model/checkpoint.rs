//! `STKC` container: magic, u32 entry count, then per entry a u16 name
//! length, the UTF-8 name, and one `STK1` tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STKC";

pub fn write_checkpoint<'a, W: Write>(mut w: W, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let entries: Vec<_> = entries.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::CorruptCheckpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        t.write_stk1(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<(String, Tensor)>> {
    read_inner(r).map_err(|e| match e {
        Error::CorruptCheckpoint(_) => e,
        other => Error::CorruptCheckpoint(other.to_string()),
    })
}

fn read_inner<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CorruptCheckpoint(format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::CorruptCheckpoint("non-UTF-8 name".into()))?;
        let t = Tensor::read_stk1(&mut r)?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Path of the JSON configuration stored next to a checkpoint.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Outcome of a by-name partial load.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub matched: Vec<String>,
    /// Model tensors absent from the checkpoint, kept at fresh init.
    pub reinitialized: Vec<String>,
    /// Checkpoint tensors with no counterpart in the model.
    pub unexpected: Vec<String>,
}

impl Model {
    /// Writes every named tensor (parameters and running statistics) plus a
    /// JSON sidecar with the configuration.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_filtered(path, |_| true)
    }

    /// Like [`Model::save`] but only for names accepted by `keep`.
    pub fn save_filtered(&self, path: &Path, keep: impl Fn(&str) -> bool) -> Result<()> {
        let entries = self.store.entries().iter().filter(|e| keep(&e.name)).map(|e| (e.name.as_str(), &e.value));
        write_checkpoint(BufWriter::new(File::create(path)?), entries)?;
        let mut cfg = self.config.clone();
        cfg.pretrained_init = None;
        std::fs::write(config_sidecar(path), serde_json::to_string_pretty(&cfg)? + "\n")?;
        Ok(())
    }

    /// Rebuilds the model described by the sidecar and restores every tensor
    /// bitwise. Any missing, extra or reshaped name is an error.
    pub fn load(path: &Path) -> Result<Model> {
        let cfg_text = std::fs::read_to_string(config_sidecar(path))?;
        let cfg: ModelConfig = serde_json::from_str(&cfg_text)
            .map_err(|e| Error::CorruptCheckpoint(format!("config sidecar: {e}")))?;
        let mut model = Model::build(&cfg)?;
        let entries = read_checkpoint(BufReader::new(File::open(path)?))?;
        let report = model.assign(entries)?;
        if let Some(name) = report.reinitialized.first().or(report.unexpected.first()) {
            return Err(Error::NameMismatch(format!("{name} (strict load)")));
        }
        Ok(model)
    }

    /// Partial load for pretrained initialization: tensors are matched by
    /// name; missing `head.*` tensors keep their fresh values (logged and
    /// reported), any other missing tensor is a `NameMismatch`.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<LoadReport> {
        let entries = read_checkpoint(BufReader::new(File::open(path)?))?;
        let report = self.assign(entries)?;
        for name in &report.reinitialized {
            if !name.starts_with("head.") {
                return Err(Error::NameMismatch(format!("{name} missing from {}", path.display())));
            }
            log::warn!("{name} not in checkpoint; keeping fresh initialization");
        }
        Ok(report)
    }

    fn assign(&mut self, entries: Vec<(String, Tensor)>) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut seen = vec![false; self.store.len()];
        for (name, t) in entries {
            let Some(id) = self.store.find(&name) else {
                report.unexpected.push(name);
                continue;
            };
            if self.store.get(id).shape() != t.shape() {
                return Err(Error::NameMismatch(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.store.get(id).shape()
                )));
            }
            *self.store.get_mut(id) = t;
            seen[id.index()] = true;
            report.matched.push(name);
        }
        for id in self.store.ids() {
            if !seen[id.index()] {
                report.reinitialized.push(self.store.entry(id).name.clone());
            }
        }
        Ok(report)
    }
}

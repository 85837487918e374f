//! Model checkpoints.
//!
//! DCP layout, all little-endian:
//!
//! ```text
//! b"DCP1"
//! u32            format version (1)
//! u64 len, UTF-8 key = value config text
//! u32            parameter count
//! per parameter:
//!   u32 len, UTF-8 name
//!   u8  dtype (0 = f64, 1 = f32)
//!   u8  rank
//!   rank x u64 dims
//!   payload, row-major
//! ```
//!
//! The config text holds every model setting plus `head.recon` and
//! `head.classes`, enough to rebuild the model before filling parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{apply_all, parse_bool, parse_kv, parse_value, render, KeyValue};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DCP1";
pub const VERSION: u32 = 1;
const MAX_NAME_BYTES: u32 = 1 << 16;
const MAX_RANK: u8 = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Self::F64 => 0,
            Self::F32 => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Self::F64),
            1 => Ok(Self::F32),
            _ => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F64 => "f64",
            Self::F32 => "f32",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Self::F64),
            "f32" => Ok(Self::F32),
            _ => Err(Error::Config(format!("unknown precision `{s}`"))),
        }
    }
}

/// Which heads a checkpointed model carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeadSpec {
    pub recon: bool,
    /// `0` when there is no classification head.
    pub classes: usize,
}

impl HeadSpec {
    pub fn of(model: &Model) -> Self {
        Self {
            recon: model.recon.is_some(),
            classes: model.classifier.as_ref().map_or(0, |c| c.classes),
        }
    }
}

impl KeyValue for HeadSpec {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "head.recon" => self.recon = parse_bool(key, v)?,
            "head.classes" => self.classes = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("head.recon".into(), self.recon.to_string()),
            ("head.classes".into(), self.classes.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub precision: Precision,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, precision: Precision) -> Self {
        let heads = HeadSpec::of(model);
        let config_text = render(&[model.config(), &heads]);
        let entries = model
            .store
            .iter()
            .map(|(_, name, value)| Entry {
                name: name.to_string(),
                precision,
                value: match precision {
                    Precision::F64 => value.clone(),
                    Precision::F32 => value.map(|v| v as f32 as f64),
                },
            })
            .collect();
        Self {
            version: VERSION,
            config_text,
            entries,
        }
    }

    pub fn config(&self) -> Result<(ModelConfig, HeadSpec)> {
        let mut cfg = ModelConfig::default();
        let mut heads = HeadSpec::default();
        apply_all(&parse_kv(&self.config_text)?, &mut [&mut cfg, &mut heads])?;
        cfg.validate()?;
        Ok((cfg, heads))
    }

    /// Rebuild the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<Model> {
        let (cfg, heads) = self.config()?;
        let classes = (heads.classes > 0).then_some(heads.classes);
        let mut model = Model::new(&cfg, 0, heads.recon, classes)?;
        if self.entries.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                self.entries.len(),
                model.store.len()
            )));
        }
        for e in &self.entries {
            let id = model
                .store
                .id(&e.name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", e.name)))?;
            model.store.set(id, e.value.clone())?;
        }
        Ok(model)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(self.config_text.len() as u64).to_le_bytes())?;
        w.write_all(self.config_text.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.precision.tag(), e.value.rank() as u8])?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.value.numel() * 8);
            for &v in e.value.data() {
                match e.precision {
                    Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        if &take::<4>(r)? != MAGIC {
            return Err(Error::Format("not a DCP file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(r)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported DCP version {version}")));
        }
        let len = u64::from_le_bytes(take(r)?);
        let config_text = String::from_utf8(bytes(r, len)?)
            .map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let count = u32::from_le_bytes(take(r)?);
        let mut entries = Vec::new();
        for _ in 0..count {
            let n = u32::from_le_bytes(take(r)?);
            if n > MAX_NAME_BYTES {
                return Err(Error::Format(format!("parameter name of {n} bytes")));
            }
            let name = String::from_utf8(bytes(r, u64::from(n))?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let [tag, rank] = take::<2>(r)?;
            let precision = Precision::from_tag(tag)?;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("`{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(r)?) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}` dims overflow")))?;
            let width = match precision {
                Precision::F64 => 8,
                Precision::F32 => 4,
            };
            let raw = bytes(r, (numel * width) as u64)?;
            let data = match precision {
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            entries.push(Entry {
                name,
                precision,
                value: Tensor::new(&shape, data)?,
            });
        }
        Ok(Self {
            version,
            config_text,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn bytes(r: &mut impl Read, n: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    r.take(n).read_to_end(&mut out)?;
    if out.len() as u64 != n {
        return Err(Error::Format("truncated DCP file".into()));
    }
    Ok(out)
}

fn truncated(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated DCP file".into()),
        _ => Error::Io(e),
    }
}

//! Labeled window index: one CSV row per window with columns
//! `recording,start_s,label,split`. Recording paths are relative to the
//! index file's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::signal::io::load_recording;
use crate::signal::{preprocess, PrepConfig};

use super::LabeledSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Format(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub recording: PathBuf,
    pub start_s: f64,
    pub label: usize,
    pub split: Split,
}

pub fn read_index(path: &Path) -> Result<Vec<IndexEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    let want = ["recording", "start_s", "label", "split"];
    if header.iter().collect::<Vec<_>>() != want {
        return Err(Error::Format(format!(
            "index header must be `{}`",
            want.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let bad = |what: &str| Error::Format(format!("index row {}: bad {what}", i + 2));
        out.push(IndexEntry {
            recording: PathBuf::from(&row[0]),
            start_s: row[1].parse().map_err(|_| bad("start_s"))?,
            label: row[2].parse().map_err(|_| bad("label"))?,
            split: row[3].parse()?,
        });
    }
    Ok(out)
}

pub fn write_index(path: &Path, entries: &[IndexEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["recording", "start_s", "label", "split"]).map_err(io)?;
    for e in entries {
        w.write_record([
            e.recording.to_string_lossy().into_owned(),
            e.start_s.to_string(),
            e.label.to_string(),
            e.split.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct LabeledData {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
    /// Index rows whose window was rejected during preprocessing.
    pub dropped: usize,
}

/// Preprocess every referenced recording once and pick out the indexed
/// windows. The class count is one more than the largest label.
pub fn load_labeled(index: &Path, prep: &PrepConfig) -> Result<LabeledData> {
    let entries = read_index(index)?;
    if entries.is_empty() {
        return Err(Error::Empty("labeled index"));
    }
    let dir = index.parent().unwrap_or(Path::new("."));
    let classes = entries.iter().map(|e| e.label).max().unwrap_or(0) + 1;
    let mut by_rec: BTreeMap<&Path, Vec<&IndexEntry>> = BTreeMap::new();
    for e in &entries {
        by_rec.entry(&e.recording).or_default().push(e);
    }
    let mut parts: BTreeMap<Split, (Vec<_>, Vec<_>)> = BTreeMap::new();
    let mut dropped = 0;
    // Keep index order within each split.
    let mut found = vec![None; entries.len()];
    for (rec_path, rows) in by_rec {
        let rec = load_recording(&dir.join(rec_path))?;
        let grids = preprocess(&rec, prep)?;
        for row in rows {
            let pos = entries.iter().position(|e| std::ptr::eq(e, row)).expect("own entry");
            found[pos] = grids
                .iter()
                .find(|g| (g.start_s - row.start_s).abs() < 1e-6)
                .map(|g| g.patches.clone());
        }
    }
    for (e, g) in entries.iter().zip(found) {
        match g {
            Some(g) => {
                let p = parts.entry(e.split).or_default();
                p.0.push(g);
                p.1.push(e.label);
            }
            None => dropped += 1,
        }
    }
    let mut take = |s: Split| -> Result<LabeledSet> {
        let (g, l) = parts.remove(&s).unwrap_or_default();
        LabeledSet::new(g, l, classes)
    };
    Ok(LabeledData {
        train: take(Split::Train)?,
        val: take(Split::Val)?,
        test: take(Split::Test)?,
        dropped,
    })
}

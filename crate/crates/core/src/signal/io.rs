//! Recording files.
//!
//! DRF layout, all little-endian:
//!
//! ```text
//! b"DRF1"
//! u32            channel count C
//! f64            sample rate (Hz)
//! C x (u32 len, UTF-8 bytes)   channel labels
//! u64            samples per channel S
//! C x S f32      samples in µV, channel-major
//! ```
//!
//! CSV fixtures have a header row; the first column is time in seconds and
//! each further column is one channel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Recording;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DRF1";
/// Guard against absurd headers before allocating.
const MAX_LABEL_BYTES: u32 = 1 << 16;

pub fn write_drf(rec: &Recording, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(rec.n_channels() as u32).to_le_bytes())?;
    w.write_all(&rec.sample_rate().to_le_bytes())?;
    for l in rec.channel_labels() {
        w.write_all(&(l.len() as u32).to_le_bytes())?;
        w.write_all(l.as_bytes())?;
    }
    w.write_all(&(rec.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(rec.len() * 4);
    for ch in rec.samples() {
        buf.clear();
        for &v in ch {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated DRF file".into()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_drf(r: &mut impl Read, id: &str) -> Result<Recording> {
    if &read_exact::<4>(r)? != MAGIC {
        return Err(Error::Format("not a DRF file (bad magic)".into()));
    }
    let c = u32::from_le_bytes(read_exact(r)?) as usize;
    let rate = f64::from_le_bytes(read_exact(r)?);
    let mut labels = Vec::with_capacity(c.min(1024));
    for _ in 0..c {
        let len = u32::from_le_bytes(read_exact(r)?);
        if len > MAX_LABEL_BYTES {
            return Err(Error::Format(format!("channel label of {len} bytes")));
        }
        let mut b = vec![0u8; len as usize];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated DRF file".into()))?;
        labels.push(String::from_utf8(b).map_err(|_| Error::Format("label is not UTF-8".into()))?);
    }
    let s = u64::from_le_bytes(read_exact(r)?) as usize;
    let mut samples = Vec::with_capacity(c);
    let mut raw = vec![0u8; s.checked_mul(4).ok_or_else(|| Error::Format("sample count overflows".into()))?];
    for _ in 0..c {
        r.read_exact(&mut raw)
            .map_err(|_| Error::Format("truncated DRF file".into()))?;
        samples.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
        );
    }
    Recording::new(id, labels, rate, samples).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_csv(r: impl Read, id: &str) -> Result<Recording> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    if header.len() < 2 {
        return Err(Error::Format("CSV needs a time column and at least one channel".into()));
    }
    let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut times = Vec::new();
    let mut samples = vec![Vec::new(); labels.len()];
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("row {}: `{s}` is not a number", line + 2)))
        };
        times.push(parse(&row[0])?);
        for (ch, v) in samples.iter_mut().zip(row.iter().skip(1)) {
            ch.push(parse(v)?);
        }
    }
    if times.len() < 2 {
        return Err(Error::Format("CSV needs at least two rows to infer the rate".into()));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Format("time column must increase".into()));
    }
    // Round away representation noise in the time stamps.
    let rate = ((1.0 / dt) * 1e6).round() / 1e6;
    Recording::new(id, labels, rate, samples).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_csv(rec: &Recording, w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut head = vec!["time".to_string()];
    head.extend(rec.channel_labels().iter().cloned());
    wr.write_record(&head).map_err(|e| Error::Format(e.to_string()))?;
    for i in 0..rec.len() {
        let mut row = vec![format!("{}", i as f64 / rec.sample_rate())];
        row.extend(rec.samples().iter().map(|c| format!("{}", c[i])));
        wr.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Load a `.drf` or `.csv` file; the file stem becomes the recording id.
pub fn load_recording(path: &Path) -> Result<Recording> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase());
    let f = BufReader::new(File::open(path)?);
    match ext.as_deref() {
        Some("csv") => read_csv(f, &id),
        _ => read_drf(&mut { f }, &id),
    }
}

pub fn save_drf(rec: &Recording, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_drf(rec, &mut w)?;
    w.flush()?;
    Ok(())
}

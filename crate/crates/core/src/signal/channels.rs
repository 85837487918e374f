use super::Recording;
use crate::error::{Error, Result};

/// The 19 channels of the 10-20 montage, in model order.
pub const STANDARD_19: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz",
    "P4", "T6", "O1", "O2",
];

/// New 10-10 names mapped to their old 10-20 equivalents.
const ALIASES: [(&str, &str); 4] = [("t7", "t3"), ("t8", "t4"), ("p7", "t5"), ("p8", "t6")];

/// Lower-cased label with common recorder decorations removed and
/// aliases folded, e.g. `"EEG T7-REF"` -> `"t3"`.
pub fn canonical_label(label: &str) -> String {
    let mut s = label.trim().to_ascii_lowercase();
    if let Some(rest) = s.strip_prefix("eeg ") {
        s = rest.trim_start().to_string();
    }
    for suffix in ["-ref", "-le", "-avg"] {
        if let Some(rest) = s.strip_suffix(suffix) {
            s = rest.to_string();
            break;
        }
    }
    for (new, old) in ALIASES {
        if s == new {
            return old.to_string();
        }
    }
    s
}

/// Subset and reorder channels to `wanted`, matching labels through
/// [`canonical_label`]. Output channels carry the requested labels.
pub fn select_channels<S: AsRef<str>>(rec: &Recording, wanted: &[S]) -> Result<Recording> {
    let have: Vec<String> = rec.channel_labels().iter().map(|l| canonical_label(l)).collect();
    let mut picked = Vec::with_capacity(wanted.len());
    let mut missing = Vec::new();
    for w in wanted {
        let w = w.as_ref();
        // An exact label match wins over an alias match.
        let exact = rec.channel_labels().iter().position(|l| l.eq_ignore_ascii_case(w));
        let key = canonical_label(w);
        match exact.or_else(|| have.iter().position(|h| *h == key)) {
            Some(i) => picked.push(i),
            None => missing.push(w.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingChannels(missing));
    }
    let samples = picked.iter().map(|&i| rec.samples()[i].clone()).collect();
    let labels = wanted.iter().map(|w| w.as_ref().to_string()).collect();
    let mut out = Recording::new(rec.id.clone(), labels, rec.sample_rate(), samples)?;
    out.subject = rec.subject.clone();
    out.session = rec.session.clone();
    Ok(out)
}

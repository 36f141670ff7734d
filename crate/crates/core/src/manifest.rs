//! Corruption manifest text format (version 1).
//!
//! ```text
//! # noisemix corruption manifest
//! # version: 1
//! # noise_kind: symmetric
//! # rate: 0.4
//! # seed: 7
//! # convention: uniform_all
//! # num_classes: 4
//! # realized_rate: 0.2985
//! # proxy_epoch: -
//! # proxy_accuracy: -
//! index,true_label,given_label,corrupted
//! 0,2,2,0
//! 1,0,3,1
//! ```
//!
//! Header lines are `# key: value`; `-` marks an absent optional value.
//! Floats use the shortest representation that parses back to the same bits.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{CorruptionRecord, ManifestHeader};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const TITLE: &str = "# noisemix corruption manifest";
const COLUMNS: &str = "index,true_label,given_label,corrupted";

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_string(), ToString::to_string)
}

pub fn to_string(header: &ManifestHeader, records: &[CorruptionRecord]) -> String {
    let mut s = String::new();
    s.push_str(TITLE);
    s.push('\n');
    let _ = writeln!(s, "# version: {MANIFEST_VERSION}");
    let _ = writeln!(s, "# noise_kind: {}", header.noise_kind);
    let _ = writeln!(s, "# rate: {}", header.rate);
    let _ = writeln!(s, "# seed: {}", header.seed);
    let _ = writeln!(s, "# convention: {}", opt(&header.convention));
    let _ = writeln!(s, "# num_classes: {}", header.num_classes);
    let _ = writeln!(s, "# realized_rate: {}", header.realized_rate);
    let _ = writeln!(s, "# proxy_epoch: {}", opt(&header.proxy_epoch));
    let _ = writeln!(s, "# proxy_accuracy: {}", opt(&header.proxy_accuracy));
    s.push_str(COLUMNS);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{},{}", r.index, r.true_label, r.given_label, u8::from(r.corrupted));
    }
    s
}

pub fn write(path: &Path, header: &ManifestHeader, records: &[CorruptionRecord]) -> Result<()> {
    std::fs::write(path, to_string(header, records)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(ManifestHeader, Vec<CorruptionRecord>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|reason| Error::Format { kind: "manifest", path: path.to_path_buf(), reason })
}

fn field<T: std::str::FromStr>(map: &std::collections::BTreeMap<String, String>, key: &str) -> Result<T, String> {
    let raw = map.get(key).ok_or_else(|| format!("missing header `{key}`"))?;
    raw.parse().map_err(|_| format!("bad value `{raw}` for `{key}`"))
}

fn opt_field<T: std::str::FromStr>(map: &std::collections::BTreeMap<String, String>, key: &str) -> Result<Option<T>, String> {
    match map.get(key).map(String::as_str) {
        None | Some("-") => Ok(None),
        Some(raw) => raw.parse().map(Some).map_err(|_| format!("bad value `{raw}` for `{key}`")),
    }
}

pub fn parse(text: &str) -> Result<(ManifestHeader, Vec<CorruptionRecord>), String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == TITLE => {}
        _ => return Err("missing manifest title line".into()),
    }
    let mut map = std::collections::BTreeMap::new();
    let mut records = Vec::new();
    let mut in_body = false;
    for (no, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !in_body {
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.split_once(':').ok_or_else(|| format!("line {}: malformed header", no + 1))?;
                map.insert(k.trim().to_string(), v.trim().to_string());
                continue;
            }
            if line != COLUMNS {
                return Err(format!("line {}: expected column line `{COLUMNS}`", no + 1));
            }
            in_body = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(format!("line {}: expected 4 columns", no + 1));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("line {}: bad integer `{s}`", no + 1));
        let corrupted = match cols[3] {
            "0" => false,
            "1" => true,
            other => return Err(format!("line {}: corrupted flag `{other}` is not 0 or 1", no + 1)),
        };
        let rec = CorruptionRecord { index: num(cols[0])?, true_label: num(cols[1])?, given_label: num(cols[2])?, corrupted };
        if rec.corrupted != (rec.true_label != rec.given_label) {
            return Err(format!("line {}: corrupted flag disagrees with labels", no + 1));
        }
        records.push(rec);
    }
    if !in_body {
        return Err("missing column line".into());
    }
    let version: u32 = field(&map, "version")?;
    if version != MANIFEST_VERSION {
        return Err(format!("unsupported manifest version {version}"));
    }
    let header = ManifestHeader {
        noise_kind: field::<String>(&map, "noise_kind")?.parse().map_err(|e: Error| e.to_string())?,
        rate: field(&map, "rate")?,
        seed: field(&map, "seed")?,
        convention: match map.get("convention").map(String::as_str) {
            None | Some("-") => None,
            Some(raw) => Some(raw.parse().map_err(|e: Error| e.to_string())?),
        },
        num_classes: field(&map, "num_classes")?,
        realized_rate: field(&map, "realized_rate")?,
        proxy_epoch: opt_field(&map, "proxy_epoch")?,
        proxy_accuracy: opt_field(&map, "proxy_accuracy")?,
    };
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{NoiseKind, SymmetricConvention};
    use proptest::prelude::*;

    #[test]
    fn parses_documented_example() {
        let text = "# noisemix corruption manifest\n# version: 1\n# noise_kind: symmetric\n# rate: 0.4\n# seed: 7\n\
                    # convention: uniform_all\n# num_classes: 4\n# realized_rate: 0.5\n# proxy_epoch: -\n\
                    # proxy_accuracy: -\nindex,true_label,given_label,corrupted\n0,2,2,0\n1,0,3,1\n";
        let (h, r) = parse(text).unwrap();
        assert_eq!(h.noise_kind, NoiseKind::Symmetric);
        assert_eq!(h.convention, Some(SymmetricConvention::UniformAll));
        assert_eq!(r, vec![CorruptionRecord::new(0, 2, 2), CorruptionRecord::new(1, 0, 3)]);
    }

    #[test]
    fn rejects_inconsistent_flag() {
        let mut text = to_string(&ManifestHeader::clean(3), &[CorruptionRecord::clean(0, 1)]);
        text = text.replace("0,1,1,0", "0,1,1,1");
        assert!(parse(&text).unwrap_err().contains("disagrees"));
    }

    proptest! {
        #[test]
        fn text_round_trip(rate in 0.0f64..1.0, seed in any::<u64>(), labels in proptest::collection::vec((0usize..5, 0usize..5), 0..40)) {
            let records: Vec<_> = labels.iter().enumerate().map(|(i, &(t, g))| CorruptionRecord::new(i, t, g)).collect();
            let header = ManifestHeader {
                noise_kind: NoiseKind::InstanceDependent,
                rate,
                seed,
                convention: None,
                num_classes: 5,
                realized_rate: rate / 3.0,
                proxy_epoch: Some(3),
                proxy_accuracy: Some(1.0 - rate),
            };
            let (h, r) = parse(&to_string(&header, &records)).unwrap();
            prop_assert_eq!(h, header);
            prop_assert_eq!(r, records);
        }
    }
}

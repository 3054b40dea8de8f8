//! `path,expr,au1;...;au12` manifests. A missing expression is `-1` or empty; a
//! missing AU vector is an empty third field.

use std::fs;
use std::path::Path;

use super::{AnnotationRecord, AuVector, ImageRef};
use crate::error::{Error, Result};
use crate::nn::{NUM_AUS, NUM_EXPRESSIONS};

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

/// Parses manifest text; `source` names the input in error messages.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str, source: &str) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        records.push(parse_line(line).map_err(|message| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        })?);
    }
    Ok(records)
}

fn parse_line(line: &str) -> Result<AnnotationRecord, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 comma-separated fields, found {}", fields.len()));
    }
    if fields[0].is_empty() {
        return Err("empty image reference".into());
    }
    let expr = match fields[1] {
        "" | "-1" => None,
        s => match s.parse::<u8>() {
            Ok(v) if (v as usize) < NUM_EXPRESSIONS => Some(v),
            _ => return Err(format!("expression `{s}` outside {{-1, 0..6}}")),
        },
    };
    let aus = if fields[2].is_empty() {
        None
    } else {
        let parts: Vec<&str> = fields[2].split(';').map(str::trim).collect();
        if parts.len() != NUM_AUS {
            return Err(format!(
                "AU vector has {} entries, expected {NUM_AUS}",
                parts.len()
            ));
        }
        let mut aus: AuVector = [0; NUM_AUS];
        for (slot, p) in aus.iter_mut().zip(&parts) {
            *slot = match *p {
                "0" => 0,
                "1" => 1,
                other => return Err(format!("AU value `{other}` is not 0 or 1")),
            };
        }
        Some(aus)
    };
    Ok(AnnotationRecord::new(ImageRef::parse(fields[0]), expr, aus))
}

/// One manifest line (without newline) for a record.
pub fn format_record(r: &AnnotationRecord) -> String {
    let expr = r.expr.map_or_else(|| "-1".to_string(), |e| e.to_string());
    let aus = r.aus.map_or_else(String::new, |a| {
        a.iter().map(u8::to_string).collect::<Vec<_>>().join(";")
    });
    format!("{},{expr},{aus}", r.image)
}

pub fn write_manifest(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format_record(r));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

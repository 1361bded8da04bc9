//! File formats shared by the CLI surface: 17-significant-digit floats,
//! plain CSV writers, and small parsers for reading runs back.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

/// Full 17-significant-digit formatting; parses back to the identical bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

pub fn parse_f64(s: &str, ctx: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::DataFormat(format!("{ctx}: bad float {s:?}: {e}")))
}

pub fn parse_usize(s: &str, ctx: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|e| Error::DataFormat(format!("{ctx}: bad integer {s:?}: {e}")))
}

/// Reads a CSV written by this crate: checks the header, returns data rows
/// split on commas.
pub fn read_csv(path: &Path, expected_header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == expected_header => {}
        Some(h) => {
            return Err(Error::DataFormat(format!(
                "{}: header {h:?}, expected {expected_header:?}",
                path.display()
            )))
        }
        None => return Err(Error::DataFormat(format!("{}: empty file", path.display()))),
    }
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips_exactly() {
        for x in [
            0.0,
            -1.5,
            3.141592653589793,
            1e-300,
            -2.2250738585072014e-308,
            123456.789012345678,
        ] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }
}

//! Helpers shared by the on-disk text formats.

use crate::{Error, Result};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

/// Format an `f64` with 17 significant digits so that parsing the text
/// reproduces the original bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write `contents` to `path` atomically: the data lands in a temporary
/// file in the same directory and is renamed over the target, so readers
/// never observe a half-written file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(contents.as_bytes())?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Parse one whitespace-separated field, reporting the 1-based line number
/// and the field name on failure.
pub fn parse_field<T: FromStr>(raw: &str, line: usize, field: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::parse(line, format!("bad {field} value {raw:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_formatting_round_trips_exactly() {
        for &x in &[0.0, -0.0, 1.0, -1.5, 0.1, 1e-300, 7.23e17, std::f64::consts::PI] {
            let back: f64 = fmt_f64(x).parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x}");
        }
    }

    #[test]
    fn atomic_write_replaces_previous_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, "first").unwrap();
        write_atomic(&path, "second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
    }

    #[test]
    fn parse_field_reports_line_and_field() {
        let err = parse_field::<f64>("abc", 12, "start_ms").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 12") && msg.contains("start_ms"), "{msg}");
    }
}

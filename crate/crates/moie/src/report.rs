//! CSV tables: comma separated, `.` decimals, always a header row.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::ensure_parent;

/// One point of a curve in long format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub const CURVE_HEADER: [&str; 4] = ["N", "metric", "value", "seed"];

/// Writes `header` then one record per row. The header is explicit so an
/// empty table still carries it.
pub fn write_table<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let fail = |e: csv::Error| Error::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(fail)?;
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::write(path, e))
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    write_table(path, &CURVE_HEADER, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_have_header_and_plain_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r/c.csv");
        let rows = [
            CurveRow {
                n: 0,
                metric: "drop".into(),
                value: 0.0,
                seed: 3,
            },
            CurveRow {
                n: 10,
                metric: "drop".into(),
                value: 0.125,
                seed: 3,
            },
        ];
        write_curves(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "N,metric,value,seed\n0,drop,0.0,3\n10,drop,0.125,3\n");
        write_curves(&path, &[]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "N,metric,value,seed\n"
        );
    }
}

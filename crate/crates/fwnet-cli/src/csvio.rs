//! Result tables: CSV bodies under a commented header that pins the file
//! type, the schema name, the producing tool, and the hash of the resolved
//! configuration. Readers validate all of it, so a stale or truncated file
//! fails loudly instead of feeding wrong numbers downstream.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::{tool_version, CliError, Result};

/// First line of every result table.
pub const MAGIC: &str = "# fwnet-csv v1";

/// Identity of one table type: schema tag plus the exact column list.
#[derive(Debug, Clone, Copy)]
pub struct TableSpec {
    pub schema: &'static str,
    pub columns: &'static [&'static str],
}

/// A parsed result table.
#[derive(Debug, Clone)]
pub struct Table {
    pub schema: String,
    pub config_hash: String,
    pub notes: Vec<String>,
    pub rows: Vec<Vec<String>>,
    columns: Vec<String>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::config(format!("table has no column '{name}'")))
    }

    pub fn number(&self, row: usize, name: &str) -> Result<f64> {
        let col = self.column(name)?;
        let cell = &self.rows[row][col];
        cell.parse().map_err(|_| {
            CliError::config(format!("row {row}, column '{name}': '{cell}' is not a number"))
        })
    }
}

/// Render a float so that it parses back exactly; non-finite values use the
/// spellings `f64::from_str` accepts.
pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

fn check_cell(cell: &str) -> Result<()> {
    if cell.contains(',') || cell.contains('\n') || cell.contains('#') {
        return Err(CliError::config(format!(
            "table cell '{cell}' contains a reserved character"
        )));
    }
    Ok(())
}

/// Write a result table. `notes` become extra header comments; the
/// timestamp line is informational and excluded from determinism checks.
pub fn write_table(
    path: &Path,
    spec: &TableSpec,
    config_hash: &str,
    notes: &[String],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("# schema: {}\n", spec.schema));
    out.push_str(&format!("# tool: {}\n", tool_version()));
    out.push_str(&format!("# config-hash: {config_hash}\n"));
    let unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    out.push_str(&format!("# timestamp: unix {unix}\n"));
    for note in notes {
        out.push_str(&format!("# note: {note}\n"));
    }
    out.push_str(&spec.columns.join(","));
    out.push('\n');
    for row in rows {
        if row.len() != spec.columns.len() {
            return Err(CliError::config(format!(
                "row has {} cells, schema '{}' has {} columns",
                row.len(),
                spec.schema,
                spec.columns.len()
            )));
        }
        for cell in row {
            check_cell(cell)?;
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Read a result table back, validating the magic line, the schema tag, and
/// the exact column list.
pub fn read_table(path: &Path, spec: &TableSpec) -> Result<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let mut schema = None;
    let mut config_hash = None;
    let mut notes = Vec::new();
    let mut header: Option<(usize, &str)> = None;
    let bad = |lineno: usize, msg: String| {
        CliError::config(format!("{} line {}: {msg}", path.display(), lineno + 1))
    };

    match lines.next() {
        Some((_, line)) if line == MAGIC => {}
        Some((n, line)) => return Err(bad(n, format!("expected '{MAGIC}', found '{line}'"))),
        None => return Err(CliError::config(format!("{} is empty", path.display()))),
    }
    for (n, line) in lines.by_ref() {
        if let Some(rest) = line.strip_prefix("# ") {
            match rest.split_once(": ") {
                Some(("schema", v)) => schema = Some(v.to_string()),
                Some(("config-hash", v)) => config_hash = Some(v.to_string()),
                Some(("note", v)) => notes.push(v.to_string()),
                Some(("tool", _)) | Some(("timestamp", _)) => {}
                _ => return Err(bad(n, format!("malformed header comment '{line}'"))),
            }
        } else {
            header = Some((n, line));
            break;
        }
    }
    let schema = schema.ok_or_else(|| CliError::config("missing schema header"))?;
    if schema != spec.schema {
        return Err(CliError::config(format!(
            "{}: schema is '{schema}', expected '{}'",
            path.display(),
            spec.schema
        )));
    }
    let config_hash =
        config_hash.ok_or_else(|| CliError::config("missing config-hash header"))?;
    let (hn, header) = header.ok_or_else(|| CliError::config("missing column header"))?;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    if columns != spec.columns {
        return Err(bad(
            hn,
            format!("columns are [{}], expected [{}]", header, spec.columns.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(str::to_string).collect();
        if cells.len() != columns.len() {
            return Err(bad(
                n,
                format!("row has {} cells, expected {}", cells.len(), columns.len()),
            ));
        }
        rows.push(cells);
    }
    Ok(Table { schema, config_hash, notes, rows, columns })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: TableSpec = TableSpec { schema: "demo v1", columns: &["a", "b"] };

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_preserves_rows_and_metadata() {
        let d = dir();
        let path = d.path().join("t.csv");
        let rows = vec![
            vec![fmt(1.5), "x".to_string()],
            vec![fmt(f64::NAN), fmt(-2e-9)],
        ];
        write_table(&path, &SPEC, "cafe01", &["diagonal excluded".into()], &rows).unwrap();
        let t = read_table(&path, &SPEC).unwrap();
        assert_eq!(t.config_hash, "cafe01");
        assert_eq!(t.notes, vec!["diagonal excluded".to_string()]);
        assert_eq!(t.rows.len(), 2);
        assert!((t.number(0, "a").unwrap() - 1.5).abs() < 1e-15);
        assert!(t.number(1, "a").unwrap().is_nan());
        assert_eq!(t.number(1, "b").unwrap(), -2e-9);
    }

    #[test]
    fn wrong_schema_and_wrong_columns_are_rejected() {
        let d = dir();
        let path = d.path().join("t.csv");
        write_table(&path, &SPEC, "h", &[], &[]).unwrap();
        let other = TableSpec { schema: "other v1", columns: &["a", "b"] };
        let err = read_table(&path, &other).unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");
        let cols = TableSpec { schema: "demo v1", columns: &["a", "b", "c"] };
        let err = read_table(&path, &cols).unwrap_err();
        assert!(err.to_string().contains("columns"), "{err}");
    }

    #[test]
    fn ragged_row_is_rejected_with_line_number() {
        let d = dir();
        let path = d.path().join("t.csv");
        write_table(&path, &SPEC, "h", &[], &[vec!["1".into(), "2".into()]]).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("3\n");
        std::fs::write(&path, text).unwrap();
        let err = read_table(&path, &SPEC).unwrap_err();
        assert!(err.to_string().contains("cells"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cells_with_reserved_characters_are_refused() {
        let d = dir();
        let path = d.path().join("t.csv");
        let err =
            write_table(&path, &SPEC, "h", &[], &[vec!["1,2".into(), "3".into()]]).unwrap_err();
        assert!(err.to_string().contains("reserved"), "{err}");
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1e-300, -3.25, 2.0f64.powi(-40), f64::INFINITY] {
            let s = fmt(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt(f64::NAN), "nan");
    }
}

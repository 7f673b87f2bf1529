//! CSV output: `#`-prefixed header comments, a column header row, then
//! numeric rows with 17 significant digits. Missing values are empty cells.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::format_f64;
use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl CsvTable {
    pub fn new(columns: &[&str]) -> Self {
        CsvTable {
            comments: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Appends a column; `values` is padded with blanks to the row count.
    pub fn push_column(&mut self, name: &str, values: &[Option<f64>]) {
        self.columns.push(name.to_string());
        for (i, row) in self.rows.iter_mut().enumerate() {
            row.push(values.get(i).copied().flatten());
        }
    }

    /// Header lines and column names, without the data rows.
    pub fn render_header(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        out
    }

    /// Data rows only. Byte-identical for identical values.
    pub fn render_body(&self) -> String {
        let mut out = String::new();
        let integer: Vec<bool> = self.columns.iter().map(|c| is_integer_column(c)).collect();
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&integer)
                .map(|(v, &int)| match v {
                    Some(x) if int => format!("{}", *x as i64),
                    Some(x) => format_f64(*x),
                    None => String::new(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn render(&self) -> String {
        self.render_header() + &self.render_body()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}

fn is_integer_column(name: &str) -> bool {
    matches!(name, "round" | "client" | "point" | "seed" | "clients" | "diverged")
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

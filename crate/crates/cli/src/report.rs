//! Tab-separated report files.
//!
//! ```text
//! # bd3 <kind> report, version 0.1.0
//! field_a<TAB>field_b
//! 1.5<TAB>x
//! ```
//!
//! Appending to an existing report requires an identical header.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use anyhow::Result;
use bd3lm::Bd3Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct Report {
    kind: &'static str,
    fields: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(kind: &'static str, fields: &[&'static str]) -> Self {
        Self {
            kind,
            fields: fields.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.fields.len(), "report row width");
        self.rows.push(row.into_iter().map(|c| c.replace(['\t', '\n'], " ")).collect());
    }

    fn header(&self) -> String {
        format!("# bd3 {} report, version {VERSION}\n{}\n", self.kind, self.fields.join("\t"))
    }

    /// Aligned text for the terminal.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = self.fields.iter().map(|f| f.len()).collect();
        for row in &self.rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: Vec<&str>| -> String {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
            padded.join("  ").trim_end().to_string()
        };
        let mut out = line(self.fields.clone());
        for row in &self.rows {
            out.push('\n');
            out.push_str(&line(row.iter().map(String::as_str).collect()));
        }
        out
    }

    /// Writes the header if `path` is new, then appends the rows.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let header = self.header();
        if path.exists() {
            let existing = fs::read_to_string(path)?;
            if !existing.is_empty() && !existing.starts_with(&header) {
                return Err(Bd3Error::Config(format!("{} holds a different report layout", path.display())).into());
            }
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if f.metadata()?.len() == 0 {
            f.write_all(header.as_bytes())?;
        }
        for row in &self.rows {
            writeln!(f, "{}", row.join("\t"))?;
        }
        Ok(())
    }
}

/// Parses a report written by [`Report::append_to`] into field names and rows.
#[cfg(test)]
pub fn read(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let fields = lines.next().unwrap_or_default().split('\t').map(String::from).collect();
    let rows = lines.map(|l| l.split('\t').map(String::from).collect()).collect();
    Ok((fields, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appends_under_one_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.tsv");
        for v in ["1", "2"] {
            let mut r = Report::new("test", &["a", "b"]);
            r.push(vec![v.into(), "x\ty".into()]);
            r.append_to(&path).unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("# bd3").count(), 1);
        let (fields, rows) = read(&path).unwrap();
        assert_eq!(fields, ["a", "b"]);
        assert_eq!(rows, [["1", "x y"], ["2", "x y"]]);

        let other = Report::new("test", &["c"]);
        assert!(other.append_to(&path).is_err());
    }

    #[test]
    fn renders_aligned() {
        let mut r = Report::new("t", &["name", "v"]);
        r.push(vec!["long-name".into(), "1".into()]);
        assert_eq!(r.render(), "name       v\nlong-name  1");
    }
}

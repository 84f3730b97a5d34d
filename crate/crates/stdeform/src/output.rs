//! Report formats and destinations.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    Csv,
    #[default]
    Json,
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format `{s}` (expected csv or json)")),
        }
    }
}

/// One CSV table. Reports with several tables name each one.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: Option<String>,
    pub text: String,
}

/// Serializes `rows` with a header taken from the row type's field names.
pub fn csv_table<R: Serialize>(name: Option<&str>, rows: &[R]) -> CliResult<CsvTable> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Csv(e.into_error().into()))?;
    Ok(CsvTable {
        name: name.map(str::to_string),
        text: String::from_utf8(bytes).expect("csv output is utf-8"),
    })
}

/// A command result that can be emitted in either format.
pub trait Report: Serialize {
    fn passed(&self) -> bool;
    fn csv(&self) -> CliResult<Vec<CsvTable>>;

    fn json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Where reports go: a file or standard output.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Sink {
    pub path: Option<PathBuf>,
    pub format: Format,
}

impl Sink {
    /// JSON is written whole. A single CSV table is written as is. Several
    /// tables go to `<stem>.<name>.<ext>` next to `path`, or to standard
    /// output as `# <name>` sections separated by blank lines.
    pub fn emit<R: Report>(&self, report: &R) -> CliResult<Vec<PathBuf>> {
        match self.format {
            Format::Json => self.write(self.path.as_deref(), &report.json()?),
            Format::Csv => {
                let tables = report.csv()?;
                match (&self.path, tables.len()) {
                    (_, 1) => self.write(self.path.as_deref(), &tables[0].text),
                    (Some(path), _) => {
                        let mut written = Vec::new();
                        for t in &tables {
                            let name = t.name.as_deref().unwrap_or("table");
                            written.extend(self.write(Some(&suffixed(path, name)), &t.text)?);
                        }
                        Ok(written)
                    }
                    (None, _) => {
                        let body: Vec<String> = tables
                            .iter()
                            .map(|t| {
                                format!("# {}\n{}", t.name.as_deref().unwrap_or("table"), t.text)
                            })
                            .collect();
                        self.write(None, &body.join("\n"))
                    }
                }
            }
        }
    }

    fn write(&self, path: Option<&Path>, text: &str) -> CliResult<Vec<PathBuf>> {
        match path {
            Some(p) => {
                std::fs::write(p, text).map_err(|source| CliError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Ok(vec![p.to_path_buf()])
            }
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(text.as_bytes())
                    .and_then(|_| out.flush())
                    .map_err(|source| CliError::Io {
                        path: "<stdout>".into(),
                        source,
                    })?;
                Ok(Vec::new())
            }
        }
    }
}

/// `dir/report.csv` + `dense` → `dir/report.dense.csv`.
pub fn suffixed(path: &Path, name: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = match path.extension() {
        Some(ext) => format!("{stem}.{name}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{name}"),
    };
    path.with_file_name(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        a: u64,
        b: f64,
    }

    #[test]
    fn csv_header_follows_fields() {
        let t = csv_table(None, &[Row { a: 1, b: 0.5 }, Row { a: 2, b: 1.0 }]).unwrap();
        assert_eq!(t.text, "a,b\n1,0.5\n2,1.0\n");
    }

    #[test]
    fn suffix_goes_before_extension() {
        assert_eq!(
            suffixed(Path::new("/x/r.csv"), "dense"),
            PathBuf::from("/x/r.dense.csv")
        );
        assert_eq!(suffixed(Path::new("r"), "dense"), PathBuf::from("r.dense"));
    }

    #[test]
    fn formats_parse() {
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
        assert!("xml".parse::<Format>().is_err());
    }
}

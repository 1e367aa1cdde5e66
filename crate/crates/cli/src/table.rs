//! Versioned CSV tables: a `# prior-attn v1` line, optional `# ` notes,
//! then a header row and records.

use std::path::Path;

use crate::error::{CliError, CliResult};

pub const CSV_HEADER: &str = "# prior-attn v1";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Table {
    /// Comment lines after the version line, without the `# ` prefix.
    pub notes: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            notes: Vec::new(),
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cell `name` of `row`, failing with the column name when absent.
    pub fn get<'a>(&'a self, row: &'a [String], name: &str) -> CliResult<&'a str> {
        let i = self
            .column(name)
            .ok_or_else(|| CliError::config(name, "column missing from table"))?;
        Ok(row[i].as_str())
    }

    pub fn get_f64(&self, row: &[String], name: &str) -> CliResult<f64> {
        let cell = self.get(row, name)?;
        cell.parse()
            .map_err(|_| CliError::config(name, format!("cannot parse `{cell}` as a number")))
    }

    pub fn get_opt(&self, row: &[String], name: &str) -> CliResult<Option<f64>> {
        match self.get(row, name)? {
            "" => Ok(None),
            _ => self.get_f64(row, name).map(Some),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for n in &self.notes {
            out.push_str("# ");
            out.push_str(n);
            out.push('\n');
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.columns).expect("writing to memory");
        for r in &self.rows {
            w.write_record(r).expect("writing to memory");
        }
        let body = w.into_inner().expect("flushing to memory");
        out.push_str(std::str::from_utf8(&body).expect("csv of utf-8 cells"));
        out
    }

    pub fn from_text(text: &str) -> CliResult<Table> {
        let mut lines = text.split_inclusive('\n');
        let first = lines.next().map(str::trim_end);
        if first != Some(CSV_HEADER) {
            return Err(CliError::config("csv", format!("missing `{CSV_HEADER}` version line")));
        }
        let mut notes = Vec::new();
        let mut consumed = CSV_HEADER.len() + 1;
        for line in lines {
            match line.strip_prefix("# ") {
                Some(n) => {
                    notes.push(n.trim_end_matches('\n').to_string());
                    consumed += line.len();
                }
                None => break,
            }
        }
        let body = text.get(consumed..).unwrap_or("");
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let bad = |e: csv::Error| CliError::config("csv", e.to_string());
        let columns = r.headers().map_err(bad)?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()
            .map_err(bad)?;
        Ok(Table { notes, columns, rows })
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_file(path, &self.to_text())
    }

    pub fn read(path: &Path) -> CliResult<Table> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Table::from_text(&text).map_err(|e| match e {
            CliError::Config { key, detail } => CliError::config(key, format!("{}: {detail}", path.display())),
            other => other,
        })
    }
}

/// Writes `text`, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

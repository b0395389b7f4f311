//! Result tables rendered as CSV or Markdown with fixed number formats.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Cell {
    /// A fraction in [0, 1], shown as an integer percentage.
    Percent(f64),
    /// Shown with two decimals.
    Rate(f64),
    Int(i64),
    Text(String),
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Cell::Percent(x) => format!("{:.0}%", (x * 100.0).round()),
            Cell::Rate(x) => format!("{x:.2}"),
            Cell::Int(n) => n.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Markdown,
}

impl Format {
    pub fn parse(s: &str) -> Option<Format> {
        match s {
            "csv" => Some(Format::Csv),
            "md" | "markdown" => Some(Format::Markdown),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Markdown => "md",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub caption: String,
    /// Includes the label column.
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Cell>)>,
}

impl ReportTable {
    pub fn new(caption: impl Into<String>, columns: &[&str]) -> Self {
        ReportTable {
            caption: caption.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, cells: Vec<Cell>) -> Result<()> {
        if cells.len() + 1 != self.columns.len() {
            return Err(Error::InconsistentState(format!(
                "row has {} cells, table has {} value columns",
                cells.len(),
                self.columns.len() - 1
            )));
        }
        self.rows.push((label.into(), cells));
        Ok(())
    }

    pub fn rendered_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(label, cells)| std::iter::once(label.clone()).chain(cells.iter().map(Cell::render)).collect())
            .collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn emit_report(table: &ReportTable, format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Csv => {
            let header: Vec<String> = table.columns.iter().map(|c| csv_field(c)).collect();
            out.push_str(&header.join(","));
            out.push('\n');
            for row in table.rendered_rows() {
                let row: Vec<String> = row.iter().map(|c| csv_field(c)).collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        Format::Markdown => {
            if !table.caption.is_empty() {
                let _ = writeln!(out, "**{}**\n", table.caption);
            }
            let _ = writeln!(out, "| {} |", table.columns.join(" | "));
            let rule: Vec<&str> = table
                .columns
                .iter()
                .enumerate()
                .map(|(i, _)| if i == 0 { "---" } else { "---:" })
                .collect();
            let _ = writeln!(out, "| {} |", rule.join(" | "));
            for row in table.rendered_rows() {
                let _ = writeln!(out, "| {} |", row.join(" | "));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats() {
        let mut t = ReportTable::new("demo", &["run", "Success", "Wasted"]);
        assert_eq!(emit_report(&t, Format::Csv), "run,Success,Wasted\n");
        t.push("a", vec![Cell::Percent(0.95), Cell::Rate(1.0)]).unwrap();
        assert_eq!(emit_report(&t, Format::Csv), "run,Success,Wasted\na,95%,1.00\n");
        assert!(emit_report(&t, Format::Markdown).contains("| a | 95% | 1.00 |"));
        assert!(t.push("b", vec![]).is_err());
    }
}

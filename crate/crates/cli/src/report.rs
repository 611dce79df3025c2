//! Method-by-metric tables merged from per-run metric reports.

use egmt::metrics::{lower_is_better, MetricReport};

/// Mean of each metric per method; a cell is `None` when the method's report
/// lacks that column.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

/// Columns are the union over all reports, in order of first appearance.
pub fn merge_reports(named: &[(String, MetricReport)]) -> Result<ReportTable, String> {
    let mut columns: Vec<String> = Vec::new();
    for (name, report) in named {
        if report.is_empty() {
            return Err(format!("report `{name}` has no rows"));
        }
        if named.iter().filter(|(n, _)| n == name).count() > 1 {
            return Err(format!("method name `{name}` given twice"));
        }
        for c in &report.columns {
            if !columns.contains(c) {
                columns.push(c.clone());
            }
        }
    }
    let rows = named
        .iter()
        .map(|(name, report)| {
            let cells = columns
                .iter()
                .map(|c| report.columns.iter().position(|rc| rc == c).map(|i| report.mean[i]))
                .collect();
            (name.clone(), cells)
        })
        .collect();
    Ok(ReportTable { columns, rows })
}

impl ReportTable {
    /// Index of the best row in column `c`, if any row has a value there.
    pub fn best(&self, c: usize) -> Option<usize> {
        let lower = lower_is_better(&self.columns[c]);
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, (_, cells))| cells[c].map(|v| (i, v)))
            .reduce(|a, b| {
                let better = if lower { b.1 < a.1 } else { b.1 > a.1 };
                if better {
                    b
                } else {
                    a
                }
            })
            .map(|(i, _)| i)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("method,{}\n", self.columns.join(","));
        for (name, cells) in &self.rows {
            let cells: Vec<String> = cells.iter().map(|v| v.map(|v| format!("{v:.6}")).unwrap_or_default()).collect();
            out += &format!("{name},{}\n", cells.join(","));
        }
        out
    }

    /// Markdown table; the best value of each column is bold and
    /// lower-is-better columns carry a down arrow.
    pub fn to_markdown(&self) -> String {
        let best: Vec<Option<usize>> = (0..self.columns.len()).map(|c| self.best(c)).collect();
        let heads: Vec<String> = self
            .columns
            .iter()
            .map(|c| if lower_is_better(c) { format!("{c} ↓") } else { format!("{c} ↑") })
            .collect();
        let mut out = format!("| Method | {} |\n", heads.join(" | "));
        out += &format!("|---|{}\n", "---:|".repeat(self.columns.len()));
        for (r, (name, cells)) in self.rows.iter().enumerate() {
            let cells: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, v)| match v {
                    None => "-".to_string(),
                    Some(v) if best[c] == Some(r) && self.rows.len() > 1 => format!("**{v:.4}**"),
                    Some(v) => format!("{v:.4}"),
                })
                .collect();
            out += &format!("| {name} | {} |\n", cells.join(" | "));
        }
        out
    }
}

/// Long-form `method,stem,metric,value` rows of every per-image value.
pub fn plot_csv(named: &[(String, MetricReport)]) -> String {
    let mut out = String::from("method,stem,metric,value\n");
    for (name, report) in named {
        for (stem, values) in &report.rows {
            for (c, v) in report.columns.iter().zip(values) {
                out += &format!("{name},{stem},{c},{v}\n");
            }
        }
    }
    out
}

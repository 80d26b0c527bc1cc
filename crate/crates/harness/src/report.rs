//! Tabular experiment output as CSV or JSON, echoing the configuration.

use std::path::Path;

use serde::{Serialize, Serializer};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
    Missing,
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Cell::Int(v) => Some(v as f64),
            Cell::Num(v) => Some(v),
            _ => None,
        }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
            Cell::Missing => Ok(()),
        }
    }
}

impl Serialize for Cell {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Cell::Int(v) => s.serialize_i64(*v),
            Cell::Num(v) if v.is_finite() => s.serialize_f64(*v),
            Cell::Text(t) => s.serialize_str(t),
            _ => s.serialize_none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub notes: Vec<String>,
    pub config: ExperimentConfig,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig, columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            notes: Vec::new(),
            config: cfg.clone(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Value of `column` in row `row`.
    pub fn get(&self, row: usize, column: &str) -> Option<&Cell> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows.get(row).map(|r| &r[j])
    }

    /// CSV with a leading `#` comment naming the experiment and seed.
    pub fn to_csv(&self) -> csv::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string()))?;
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)
            .expect("csv output is UTF-8");
        let mut head =
            format!("# {:?} seed={}\n", self.config.experiment, self.config.seed).to_lowercase();
        for n in &self.notes {
            head.push_str(&format!("# {n}\n"));
        }
        Ok(head + &body)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn render(&self, format: Format) -> anyhow::Result<String> {
        Ok(match format {
            Format::Csv => self.to_csv()?,
            Format::Json => self.to_json()? + "\n",
        })
    }

    pub fn write(&self, path: &Path, format: Format) -> anyhow::Result<()> {
        std::fs::write(path, self.render(format)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Experiment;
    use crn_core::alloc::AllocMode;

    #[test]
    fn csv_and_json_layout() {
        let cfg = ExperimentConfig::new(Experiment::Markov, AllocMode::FdmFdma);
        let mut r = Report::new(&cfg, &["n", "inv_T", "P_n", "Gamma_n"]);
        r.push(vec![
            Cell::Int(1),
            Cell::Num(0.5),
            Cell::Num(0.25),
            Cell::Missing,
        ]);
        assert_eq!(
            r.to_csv().unwrap(),
            "# markov seed=1\nn,inv_T,P_n,Gamma_n\n1,0.5,0.25,\n"
        );
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["rows"][0], serde_json::json!([1, 0.5, 0.25, null]));
        assert_eq!(json["config"]["seed"], 1);
        assert_eq!(r.get(0, "P_n").and_then(Cell::as_f64), Some(0.25));
    }

    #[test]
    fn writes_files() {
        let cfg = ExperimentConfig::new(Experiment::Markov, AllocMode::FdmFdma);
        let r = Report::new(&cfg, &["n"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        r.write(&path, Format::Json).unwrap();
        assert!(std::fs::read_to_string(path)
            .unwrap()
            .contains("\"columns\""));
    }
}

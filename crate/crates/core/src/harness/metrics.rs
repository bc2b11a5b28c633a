//! Append-only metrics CSV: `run_id, phase, step, <named scalars...>`.
//!
//! The column set is fixed by the first record, steps must increase
//! strictly within the file's phase and every value must be finite.

use std::fs::File;
use std::path::Path;

use crate::error::{MoanError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub phase: String,
    pub step: usize,
    pub values: Vec<(String, f64)>,
}

pub struct MetricsWriter {
    writer: csv::Writer<File>,
    run_id: String,
    phase: String,
    columns: Option<Vec<String>>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path, run_id: &str, phase: &str) -> Result<Self> {
        Ok(MetricsWriter {
            writer: csv::Writer::from_path(path)?,
            run_id: run_id.into(),
            phase: phase.into(),
            columns: None,
            last_step: None,
        })
    }

    pub fn write(&mut self, step: usize, values: &[(&str, f64)]) -> Result<()> {
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(MoanError::Domain(format!(
                    "{} metrics step {step} does not follow {last}",
                    self.phase
                )));
            }
        }
        if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(MoanError::NonFinite(format!("{} metric `{name}` = {v} at step {step}", self.phase)));
        }
        let names: Vec<String> = values.iter().map(|(n, _)| n.to_string()).collect();
        match &self.columns {
            None => {
                let mut header = vec!["run_id".to_string(), "phase".into(), "step".into()];
                header.extend(names.iter().cloned());
                self.writer.write_record(&header)?;
                self.columns = Some(names);
            }
            Some(cols) if *cols != names => {
                return Err(MoanError::Domain(format!("{} metrics columns changed mid-file", self.phase)));
            }
            Some(_) => {}
        }
        let mut row = vec![self.run_id.clone(), self.phase.clone(), step.to_string()];
        row.extend(values.iter().map(|(_, v)| format!("{v:?}")));
        self.writer.write_record(&row)?;
        self.writer.flush()?;
        self.last_step = Some(step);
        Ok(())
    }
}

/// Reads a metrics CSV back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let names: Vec<String> = headers.iter().skip(3).map(String::from).collect();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let parse = |i: usize| -> Result<f64> {
            row[i]
                .parse()
                .map_err(|_| MoanError::Domain(format!("bad number `{}` in {}", &row[i], path.display())))
        };
        let mut values = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            values.push((name.clone(), parse(3 + k)?));
        }
        out.push(MetricsRecord {
            run_id: row[0].to_string(),
            phase: row[1].to_string(),
            step: row[2]
                .parse()
                .map_err(|_| MoanError::Domain(format!("bad step in {}", path.display())))?,
            values,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&p, "r", "policy").unwrap();
        w.write(1, &[("loss", 0.5), ("ret", 10.0)]).unwrap();
        w.write(2, &[("loss", 0.25), ("ret", 1.0 / 3.0)]).unwrap();
        assert!(w.write(2, &[("loss", 0.1), ("ret", 1.0)]).is_err(), "non-increasing step");
        assert!(w.write(3, &[("loss", f64::NAN), ("ret", 1.0)]).is_err(), "non-finite");
        assert!(w.write(3, &[("other", 1.0)]).is_err(), "column change");
        drop(w);
        let back = read_metrics(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].values[1], ("ret".to_string(), 1.0 / 3.0));
        assert_eq!(back[0].phase, "policy");
    }
}

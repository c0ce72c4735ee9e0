use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One meta step. `meta_loss` is evaluated after the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub phase: u8,
    pub meta_loss: f64,
    pub grad_norm: f64,
    pub wall_seconds: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    rows: Vec<RunRow>,
}

pub const RUN_CSV_HEADER: [&str; 6] = [
    "step",
    "phase",
    "meta_loss",
    "grad_norm",
    "wall_seconds",
    "seed",
];

impl RunRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> &[RunRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&RunRow> {
        self.rows.last()
    }

    pub fn meta_losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.meta_loss).collect()
    }

    pub fn push(&mut self, row: RunRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::invalid(format!(
                    "run record step {} after {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        writer.write_record(RUN_CSV_HEADER).map_err(csv_err)?;
        for row in &self.rows {
            writer.serialize(row).map_err(csv_err)?;
        }
        writer.flush().map_err(|e| Error::Io(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers().map_err(csv_err)?.clone();
        if header.iter().ne(RUN_CSV_HEADER) {
            return Err(Error::Format(format!(
                "unexpected run.csv header {header:?}"
            )));
        }
        let mut record = Self::new();
        for row in reader.deserialize() {
            record.push(row.map_err(csv_err)?)?;
        }
        Ok(record)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, loss: f64) -> RunRow {
        RunRow {
            step,
            phase: 2,
            meta_loss: loss,
            grad_norm: 0.1 / 3.0,
            wall_seconds: 1e-3,
            seed: u64::MAX - step as u64,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rec = RunRecord::new();
        rec.push(row(1, 1.0 / 7.0)).unwrap();
        rec.push(row(2, 1e-300)).unwrap();
        rec.push(row(3, f64::NAN)).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,phase,meta_loss,grad_norm,wall_seconds,seed\n"));
        let back = RunRecord::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in rec.rows().iter().zip(back.rows()) {
            assert_eq!(a.meta_loss.to_bits(), b.meta_loss.to_bits());
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
            assert_eq!(a.seed, b.seed);
        }
    }

    #[test]
    fn steps_must_increase() {
        let mut rec = RunRecord::new();
        rec.push(row(2, 0.0)).unwrap();
        assert!(rec.push(row(2, 0.0)).is_err());
        assert!(rec.push(row(1, 0.0)).is_err());
    }

    #[test]
    fn empty_record_writes_header_only() {
        let mut buf = Vec::new();
        RunRecord::new().write_csv(&mut buf).unwrap();
        assert_eq!(RunRecord::read_csv(buf.as_slice()).unwrap().len(), 0);
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(RunRecord::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Mean losses over the steps of one epoch plus end-of-epoch accuracies.
///
/// Distillation terms that were not enabled are `None` and serialize as
/// empty CSV fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub lc: Option<f64>,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub lc: Option<f64>,
    /// Soft-target term of the KD baseline, already multiplied by `T²`.
    pub kd: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Test accuracy of the initial model, before any update.
    pub initial_test_acc: f64,
}

impl TrainReport {
    pub fn final_test_acc(&self) -> f64 {
        self.epochs.last().map_or(self.initial_test_acc, |e| e.test_acc)
    }

    pub fn write_epochs_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.epochs {
            out.serialize(e)?;
        }
        if self.epochs.is_empty() {
            out.write_record(["epoch", "ce", "l1", "l2", "l3", "lc", "total", "train_acc", "test_acc"])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_steps_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.steps {
            out.serialize(s)?;
        }
        if self.steps.is_empty() {
            out.write_record(["epoch", "step", "ce", "l1", "l2", "l3", "lc", "kd", "total"])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_epochs_csv<R: Read>(r: R) -> Result<Vec<EpochRecord>> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut out = Vec::new();
        for rec in rdr.deserialize() {
            out.push(rec?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_csv_round_trip() {
        let report = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 0,
                ce: 1.25,
                l1: None,
                l2: Some(0.1 + 0.2),
                l3: Some(1e-17),
                lc: Some(3.0),
                total: 4.5,
                train_acc: 0.5,
                test_acc: 1.0 / 3.0,
            }],
            ..Default::default()
        };
        let mut buf = Vec::new();
        report.write_epochs_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,ce,l1,l2,l3,lc,total,train_acc,test_acc\n"));
        assert!(text.contains("1.25,,"));
        let back = TrainReport::read_epochs_csv(&buf[..]).unwrap();
        assert_eq!(back, report.epochs);
    }
}

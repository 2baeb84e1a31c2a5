//! CSV outputs. Floats use Rust's shortest round-trip formatting.

use std::path::Path;

use metasgd::train::{AdaptationCurve, TrainLog};

use crate::checkpoint::write_atomic;
use crate::error::CliError;

/// One row of the evaluation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub setting: String,
    pub mean: f64,
    pub ci95_half: f64,
}

fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn train_log_csv(log: &TrainLog) -> Result<Vec<u8>, CliError> {
    to_csv(
        &["iteration", "mean_test_loss_or_return", "wall_ms"],
        log.records
            .iter()
            .map(|r| vec![r.iteration.to_string(), r.value.to_string(), r.wall_ms.to_string()]),
    )
}

pub fn eval_csv(rows: &[EvalRow]) -> Result<Vec<u8>, CliError> {
    to_csv(
        &["setting", "mean", "ci95_half"],
        rows.iter()
            .map(|r| vec![r.setting.clone(), r.mean.to_string(), r.ci95_half.to_string()]),
    )
}

/// Grid rows with truth and both predictions, followed by the K training
/// points with the prediction columns empty.
pub fn curve_csv(c: &AdaptationCurve) -> Result<Vec<u8>, CliError> {
    let grid = (0..c.x.len()).map(|i| {
        vec![
            "grid".to_string(),
            c.x[i].to_string(),
            c.truth[i].to_string(),
            c.pre[i].to_string(),
            c.post[i].to_string(),
        ]
    });
    let train = c.train_x.iter().zip(&c.train_y).map(|(x, y)| {
        vec!["train".to_string(), x.to_string(), y.to_string(), String::new(), String::new()]
    });
    to_csv(&["kind", "x", "truth", "pre_adaptation", "post_adaptation"], grid.chain(train))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use metasgd::train::LogRecord;

    #[test]
    fn floats_round_trip_through_text() {
        let log = TrainLog {
            records: vec![
                LogRecord { iteration: 1, value: 0.1 + 0.2, wall_ms: 0 },
                LogRecord { iteration: 2, value: -1e-300, wall_ms: 5 },
            ],
        };
        let text = String::from_utf8(train_log_csv(&log).unwrap()).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(
            rdr.headers().unwrap(),
            vec!["iteration", "mean_test_loss_or_return", "wall_ms"]
        );
        let values: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
        assert_eq!(values[0].to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(values[1], -1e-300);
    }

    #[test]
    fn eval_layout() {
        let rows = [EvalRow { setting: "5-shot".into(), mean: 0.5, ci95_half: 0.25 }];
        assert_eq!(
            String::from_utf8(eval_csv(&rows).unwrap()).unwrap(),
            "setting,mean,ci95_half\n5-shot,0.5,0.25\n"
        );
    }
}

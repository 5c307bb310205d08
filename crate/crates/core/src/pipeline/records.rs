use std::fs;
use std::path::Path;

use crate::data::format_target;
use crate::error::{Error, Result};
use crate::metrics::LabelMatrix;

/// One line of `metrics.csv`. Validation cells are empty for runs without
/// a validation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub lr: f64,
}

const METRICS_HEADER: [&str; 5] = ["epoch", "train_loss", "val_loss", "val_macro_f1", "lr"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Corpus(format!("{}: {e}", path.display()))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Rewrites the whole file, so a resumed run leaves no stale rows behind.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            cell(r.val_loss),
            cell(r.val_macro_f1),
            r.lr.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let bad = |what: &str| Error::Corpus(format!("{}: malformed {what}", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(bad("row"));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("number"))
            }
        };
        rows.push(MetricsRow {
            epoch: rec[0].parse().map_err(|_| bad("epoch"))?,
            train_loss: rec[1].parse().map_err(|_| bad("train_loss"))?,
            val_loss: opt(&rec[2])?,
            val_macro_f1: opt(&rec[3])?,
            lr: rec[4].parse().map_err(|_| bad("lr"))?,
        });
    }
    Ok(rows)
}

/// `epoch,mean_lambda` lines of a mixing run.
pub fn write_mix_stats(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    let mut s = String::from("epoch,mean_lambda\n");
    for (e, m) in rows {
        s.push_str(&format!("{e},{m}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_mix_stats(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let (e, m) = line
                .split_once(',')
                .ok_or_else(|| Error::Corpus(format!("{}: malformed line {line:?}", path.display())))?;
            match (e.parse(), m.parse()) {
                (Ok(e), Ok(m)) => Ok((e, m)),
                _ => Err(Error::Corpus(format!("{}: malformed line {line:?}", path.display()))),
            }
        })
        .collect()
}

/// `Id,Predicted` with space-separated class ids; rows with no predicted
/// class have an empty cell.
pub fn write_predictions(path: &Path, ids: &[String], preds: &LabelMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["Id", "Predicted"]).map_err(|e| csv_err(path, e))?;
    for (row, id) in ids.iter().enumerate() {
        w.write_record([id.as_str(), &format_target(&preds.row_labels(row))])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip_with_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![
            MetricsRow { epoch: 1, train_loss: 0.1 + 0.2, val_loss: None, val_macro_f1: None, lr: 1e-4 },
            MetricsRow { epoch: 2, train_loss: 1.0 / 3.0, val_loss: Some(0.5), val_macro_f1: Some(0.25), lr: 1e-3 },
        ];
        write_metrics(&path, &rows).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,val_macro_f1,lr\n1,0.30000000000000004,,,0.0001\n"));
    }

    #[test]
    fn predictions_allow_empty_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        let m = LabelMatrix::from_rows(&[vec![true, false, true], vec![false; 3]]).unwrap();
        write_predictions(&path, &["a".into(), "b".into()], &m).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "Id,Predicted\na,0 2\nb,\n");
    }

    #[test]
    fn mix_stats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mix_stats.csv");
        write_mix_stats(&path, &[(1, 0.5), (2, 0.123456789)]).unwrap();
        assert_eq!(read_mix_stats(&path).unwrap(), vec![(1, 0.5), (2, 0.123456789)]);
    }
}

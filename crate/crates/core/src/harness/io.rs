//! CSV and JSON writers for datasets, records, metrics and plot grids.
//!
//! Dataset reals are written with 17 significant digits; everything else
//! uses the shortest representation that parses back to the same value.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::pipeline::{GridRow, SetRecords};
use super::report::{ExperimentReport, MetricRow, SummaryRow};
use crate::data::{ClassificationSample, RegressionSample};
use crate::error::Result;

fn real17(v: f64) -> String {
    format!("{v:.16e}")
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_regression_dataset(path: &Path, samples: &[RegressionSample]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["x", "y", "region"])?;
    for s in samples {
        w.write_record([real17(s.x), real17(s.y), s.region.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_classification_dataset(path: &Path, samples: &[ClassificationSample]) -> Result<()> {
    let mut w = writer(path)?;
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    header.extend(["class".to_string(), "is_ood".to_string()]);
    w.write_record(&header)?;
    for s in samples {
        let mut rec: Vec<String> = s.features.iter().map(|&v| real17(v)).collect();
        rec.push(s.class.to_string());
        rec.push(u8::from(s.is_ood).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records(path: &Path, sets: &[SetRecords]) -> Result<()> {
    let mut w = writer(path)?;
    let k = sets.first().and_then(|s| s.records.first()).map_or(0, |r| r.y_hat.len());
    let with_mc = sets.iter().any(|s| s.mc_dropout.is_some());
    let mut header: Vec<String> = ["input_id", "set", "is_ood", "u_alea", "u_epis", "error"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|j| format!("y_hat_{j}")));
    if with_mc {
        header.push("mc_dropout".into());
    }
    w.write_record(&header)?;
    for set in sets {
        for (i, r) in set.records.iter().enumerate() {
            let mut rec = vec![
                r.input_id.to_string(),
                set.set.clone(),
                u8::from(set.is_ood).to_string(),
                r.u_alea.to_string(),
                r.u_epis.to_string(),
                r.error.map_or(String::new(), |e| e.to_string()),
            ];
            rec.extend(r.y_hat.iter().map(|v| v.to_string()));
            if with_mc {
                rec.push(set.mc_dropout.as_ref().map_or(String::new(), |u| u[i].to_string()));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_metric_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["seed", "score_type", "metric", "value", "n", "params"])?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.score_type.as_str().to_string(),
            r.metric.clone(),
            r.value.to_string(),
            r.n.to_string(),
            r.params.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn summary_fields(s: &SummaryRow) -> [String; 6] {
    [
        s.score_type.as_str().to_string(),
        s.metric.clone(),
        s.params.clone(),
        s.mean.to_string(),
        s.std.map_or(String::new(), |v| v.to_string()),
        s.n_seeds.to_string(),
    ]
}

const SUMMARY_HEADER: [&str; 6] = ["score_type", "metric", "params", "mean", "std", "n_seeds"];

pub fn write_summary(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for s in summary {
        w.write_record(summary_fields(s))?;
    }
    w.flush()?;
    Ok(())
}

/// Summary rows of several reports stacked under a leading key column.
pub fn write_comparison(path: &Path, key: &str, reports: &[(String, &ExperimentReport)]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![key];
    header.extend(SUMMARY_HEADER);
    w.write_record(&header)?;
    for (name, report) in reports {
        for s in &report.summary {
            let mut rec = vec![name.clone()];
            rec.extend(summary_fields(s));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_grid(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["x", "y_hat", "u_alea", "u_epis"])?;
    for r in rows {
        w.write_record([r.x.to_string(), r.y_hat.to_string(), r.u_alea.to_string(), r.u_epis.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `epoch,loss` per curve; several curves get a leading `stage` column.
pub fn write_curves(path: &Path, curves: &[(&str, &[f64])]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["stage", "epoch", "loss"])?;
    for (stage, curve) in curves {
        for (epoch, loss) in curve.iter().enumerate() {
            w.write_record([stage.to_string(), epoch.to_string(), loss.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

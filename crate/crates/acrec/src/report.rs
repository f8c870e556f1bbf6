//! Report files: nested JSON plus a flat CSV (one row per metric, bucket or
//! layer) for plotting.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::DataError;
use crate::eval::MetricsReport;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| DataError::Io(parent.display().to_string(), e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DataError::Io(path.display().to_string(), e))
}

/// Flatten a metrics report to `metric,k,bucket,layer,value` rows.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("metric,k,bucket,layer,value\n");
    for (k, v) in &report.recall {
        writeln!(out, "recall,{k},,,{v}").unwrap();
    }
    for (k, v) in &report.ndcg {
        writeln!(out, "ndcg,{k},,,{v}").unwrap();
    }
    if let Some(slices) = &report.slices {
        for (bucket, m) in slices {
            for (k, v) in &m.recall {
                writeln!(out, "recall,{k},{bucket},,{v}").unwrap();
            }
            for (k, v) in &m.ndcg {
                writeln!(out, "ndcg,{k},{bucket},,{v}").unwrap();
            }
            writeln!(out, "count,,{bucket},,{}", m.count).unwrap();
        }
    }
    if let Some(kendall) = &report.kendall {
        for (layer, v) in kendall.iter().enumerate() {
            writeln!(out, "kendall,,,{layer},{v}").unwrap();
        }
    }
    writeln!(out, "count,,,,{}", report.count).unwrap();
    out
}

pub fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io(dir.display().to_string(), e))?;
    write_json(&dir.join("metrics.json"), report)?;
    let csv_path = dir.join("metrics.csv");
    std::fs::write(&csv_path, metrics_csv(report))
        .map_err(|e| DataError::Io(csv_path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn csv_has_one_row_per_metric() {
        let report = MetricsReport {
            recall: BTreeMap::from([(10, 0.5), (20, 0.75)]),
            ndcg: BTreeMap::from([(10, 0.3), (20, 0.4)]),
            count: 8,
            slices: None,
            kendall: Some(vec![0.1, -0.2]),
        };
        let csv = metrics_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,k,bucket,layer,value");
        assert!(lines.contains(&"recall,10,,,0.5"));
        assert!(lines.contains(&"ndcg,20,,,0.4"));
        assert!(lines.contains(&"kendall,,,1,-0.2"));
        assert!(lines.contains(&"count,,,,8"));
    }
}

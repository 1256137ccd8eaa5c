//! Report directory emission.
//!
//! Layout under `<out>/<experiment>/`:
//! - `<seed>/metrics.csv` (or `<seed>/metrics_<variant>.csv` when a seed has several runs)
//! - `summary.csv`
//! - `accuracy_seed<seed>[_<variant>].svg`, `jsd_seed<seed>[_<variant>].svg`
//! - any experiment-specific charts passed in by the caller

use std::fs;
use std::path::{Path, PathBuf};

use super::svg::{LineChart, Series};
use crate::error::{Error, Result};
use crate::trainer::{metrics_to_csv, MetricsRecord};

/// One run's epoch records to be written under its seed directory.
#[derive(Debug, Clone, Copy)]
pub struct ReportRun<'a> {
    pub seed: u64,
    pub variant: Option<&'a str>,
    pub classes: usize,
    pub records: &'a [MetricsRecord],
}

fn write(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn series(name: &str, records: &[MetricsRecord], f: impl Fn(&MetricsRecord) -> f64) -> Series {
    Series::new(name, records.iter().map(|r| (r.epoch as f64, f(r))).collect())
}

pub fn accuracy_chart(title: &str, records: &[MetricsRecord]) -> LineChart {
    let mut c = LineChart::new(title, "epoch", "accuracy").with_y_range(0.0, 1.0);
    c.push(series("student", records, |r| r.student_acc));
    c.push(series("teacher", records, |r| r.teacher_acc));
    c.push(series("region", records, |r| r.region_acc));
    c
}

pub fn jsd_chart(title: &str, records: &[MetricsRecord]) -> LineChart {
    let mut c = LineChart::new(title, "epoch", "JSD (bits)").with_y_range(0.0, 1.0);
    c.push(series("noise JSD", records, |r| r.noise_jsd));
    if records.iter().any(|r| r.prediction_jsd.is_some()) {
        let pts = records
            .iter()
            .filter_map(|r| r.prediction_jsd.map(|j| (r.epoch as f64, j)))
            .collect();
        c.push(Series::new("prediction JSD", pts));
    }
    c
}

/// Writes per-run CSVs and charts, the summary CSV and extra charts. Returns the
/// written paths in creation order.
pub fn emit_report(
    out_dir: &Path,
    experiment: &str,
    runs: &[ReportRun<'_>],
    summary_csv: &str,
    extra_charts: &[(String, LineChart)],
) -> Result<Vec<PathBuf>> {
    if runs.is_empty() || runs.iter().any(|r| r.records.is_empty()) {
        return Err(Error::Input(format!(
            "report {experiment}: nothing to emit (empty record set)"
        )));
    }
    let root = out_dir.join(experiment);
    let mut written = Vec::new();
    for run in runs {
        let (csv_name, suffix) = match run.variant {
            Some(v) => (format!("metrics_{v}.csv"), format!("seed{}_{v}", run.seed)),
            None => ("metrics.csv".to_string(), format!("seed{}", run.seed)),
        };
        let dir = root.join(run.seed.to_string());
        write(dir.join(csv_name), &metrics_to_csv(run.records, run.classes), &mut written)?;
        let title = format!("{experiment} {suffix}");
        write(
            root.join(format!("accuracy_{suffix}.svg")),
            &accuracy_chart(&title, run.records).render(),
            &mut written,
        )?;
        write(
            root.join(format!("jsd_{suffix}.svg")),
            &jsd_chart(&title, run.records).render(),
            &mut written,
        )?;
    }
    write(root.join("summary.csv"), summary_csv, &mut written)?;
    for (name, chart) in extra_charts {
        write(root.join(format!("{name}.svg")), &chart.render(), &mut written)?;
    }
    Ok(written)
}

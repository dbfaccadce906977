use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::{AnalysisError, BenchReport, Result, SensitivityEntry, SensitivityMap};
use crate::training::MetricReport;

pub const SENSITIVITY_HEADER: [&str; 5] = ["vertex_index", "hemisphere", "mode", "delta", "zscore"];
const METRICS_HEADER: [&str; 5] = ["split", "subject_id", "prediction", "target", "abs_error"];
const BENCH_HEADER: [&str; 5] = ["block", "patch_order", "tokens", "median_seconds", "peak_bytes"];
const SCHEMA: &str = "sphere-ssm-report/1";

/// Everything one run may want written out; absent parts still get
/// header-only tables.
#[derive(Debug, Clone, Default)]
pub struct ReportSet {
    pub metrics: Vec<MetricReport>,
    pub sensitivity: Option<SensitivityMap>,
    pub bench: Option<BenchReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub metrics_csv: PathBuf,
    pub sensitivity_csv: PathBuf,
    pub bench_csv: PathBuf,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn write_table<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|source| AnalysisError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, s).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `summary.json`, `metrics.csv`, `sensitivity.csv` and `bench.csv`
/// (plus `sensitivity.json` / `bench.json` when present) into `out_dir`.
pub fn emit_report(results: &ReportSet, out_dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(out_dir).map_err(|source| AnalysisError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let files = ReportFiles {
        summary: out_dir.join("summary.json"),
        metrics_csv: out_dir.join("metrics.csv"),
        sensitivity_csv: out_dir.join("sensitivity.csv"),
        bench_csv: out_dir.join("bench.csv"),
    };

    let metric_rows = results.metrics.iter().flat_map(|m| {
        (0..m.subject_ids.len()).map(move |i| {
            (
                m.split.as_str(),
                m.subject_ids[i].as_str(),
                m.predictions[i],
                m.targets[i],
                m.abs_errors[i],
            )
        })
    });
    write_table(&files.metrics_csv, &METRICS_HEADER, metric_rows)?;

    let sens: &[SensitivityEntry] = results.sensitivity.as_ref().map_or(&[], |s| &s.entries);
    write_table(&files.sensitivity_csv, &SENSITIVITY_HEADER, sens)?;

    let bench_rows = results.bench.iter().flat_map(|b| {
        b.rows
            .iter()
            .map(|r| (r.block.name(), r.patch_order, r.tokens, r.median_seconds, r.peak_bytes))
    });
    write_table(&files.bench_csv, &BENCH_HEADER, bench_rows)?;

    if let Some(s) = &results.sensitivity {
        write_json(&out_dir.join("sensitivity.json"), s)?;
    }
    if let Some(b) = &results.bench {
        write_json(&out_dir.join("bench.json"), b)?;
    }

    let metrics: Vec<_> = results
        .metrics
        .iter()
        .map(|m| {
            json!({
                "split": m.split,
                "n": m.subject_ids.len(),
                "mae_mean": m.mae_mean,
                "mae_std": m.mae_std,
                "mse_mean": m.mse_mean,
                "mse_std": m.mse_std,
            })
        })
        .collect();
    let sensitivity = results.sensitivity.as_ref().map(|s| {
        let mut modes: Vec<&str> = s.entries.iter().map(|e| e.mode.as_str()).collect();
        modes.dedup();
        json!({
            "baseline_mae": s.baseline_mae,
            "subjects": s.subjects,
            "entries": s.entries.len(),
            "modes": modes,
        })
    });
    let bench = results.bench.as_ref().map(|b| {
        json!({
            "host": b.host,
            "timer_tick_seconds": b.timer_tick_seconds,
            "fits": b.fits.iter().map(|(k, f)| json!({
                "block": k.name(),
                "exponent": f.exponent,
                "intercept": f.intercept,
                "r2": f.r2,
            })).collect::<Vec<_>>(),
        })
    });
    write_json(
        &files.summary,
        &json!({
            "schema": SCHEMA,
            "metrics": metrics,
            "sensitivity": sensitivity,
            "bench": bench,
        }),
    )?;
    Ok(files)
}

/// Parse a sensitivity table written by [`emit_report`].
pub fn read_sensitivity_csv(path: &Path) -> Result<Vec<SensitivityEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(String::from)
        .collect();
    if header != SENSITIVITY_HEADER {
        return Err(AnalysisError::Invalid(format!(
            "{}: header {header:?} is not {SENSITIVITY_HEADER:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{BenchConfig, BenchRow, BlockKind, HostInfo, PowerFit};

    fn sample_map() -> SensitivityMap {
        let mut entries = Vec::new();
        for (i, mode) in ["all", "sulc"].iter().enumerate() {
            for v in 0..5u32 {
                entries.push(SensitivityEntry {
                    vertex_index: v * 7,
                    hemisphere: (v % 2) as usize,
                    mode: mode.to_string(),
                    delta: 0.1 * v as f64 - 1.0 / 3.0 + i as f64 * 1e-17,
                    zscore: (v as f64 - 2.0) / 2f64.sqrt() * std::f64::consts::PI.fract(),
                });
            }
        }
        SensitivityMap {
            baseline_mae: 1.25,
            subjects: 3,
            entries,
        }
    }

    #[test]
    fn empty_set_writes_headers() {
        let dir = tempfile::tempdir().unwrap();
        let f = emit_report(&ReportSet::default(), dir.path()).unwrap();
        assert_eq!(
            fs::read_to_string(&f.sensitivity_csv).unwrap().trim(),
            SENSITIVITY_HEADER.join(",")
        );
        assert_eq!(fs::read_to_string(&f.metrics_csv).unwrap().trim(), METRICS_HEADER.join(","));
        assert_eq!(fs::read_to_string(&f.bench_csv).unwrap().trim(), BENCH_HEADER.join(","));
        assert!(read_sensitivity_csv(&f.sensitivity_csv).unwrap().is_empty());
        let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(&f.summary).unwrap()).unwrap();
        assert_eq!(s["schema"], SCHEMA);
        assert!(s["metrics"].as_array().unwrap().is_empty());
        assert!(s["sensitivity"].is_null() && s["bench"].is_null());
    }

    #[test]
    fn sensitivity_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = sample_map();
        let set = ReportSet {
            sensitivity: Some(map.clone()),
            ..ReportSet::default()
        };
        let f = emit_report(&set, dir.path()).unwrap();
        let back = SensitivityMap {
            baseline_mae: map.baseline_mae,
            subjects: map.subjects,
            entries: read_sensitivity_csv(&f.sensitivity_csv).unwrap(),
        };
        assert_eq!(back, map);
        let j: SensitivityMap =
            serde_json::from_str(&fs::read_to_string(dir.path().join("sensitivity.json")).unwrap()).unwrap();
        assert_eq!(j, map);
    }

    #[test]
    fn summary_schema_with_all_parts() {
        let dir = tempfile::tempdir().unwrap();
        let m = MetricReport::new("test", vec!["a".into(), "b".into()], vec![1.0, 2.0], vec![1.5, 1.0]);
        let bench = BenchReport {
            host: HostInfo {
                cpu_model: "x".into(),
                cores: 1,
                os: "linux".into(),
                arch: "x86_64".into(),
            },
            config: BenchConfig::default(),
            timer_tick_seconds: 1e-8,
            rows: vec![BenchRow {
                block: BlockKind::Scan,
                patch_order: 1,
                tokens: 161,
                median_seconds: 0.01,
                times: vec![0.01],
                peak_bytes: Some(1024),
            }],
            fits: vec![(
                BlockKind::Scan,
                PowerFit {
                    intercept: 0.0,
                    exponent: 1.0,
                    r2: 1.0,
                },
            )],
        };
        let set = ReportSet {
            metrics: vec![m],
            sensitivity: Some(sample_map()),
            bench: Some(bench.clone()),
        };
        let f = emit_report(&set, dir.path()).unwrap();
        let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(&f.summary).unwrap()).unwrap();
        assert_eq!(s["metrics"][0]["n"], 2);
        assert_eq!(s["metrics"][0]["mae_mean"], 0.75);
        assert_eq!(s["sensitivity"]["modes"], json!(["all", "sulc"]));
        assert_eq!(s["bench"]["fits"][0]["block"], "scan");
        assert_eq!(s["bench"]["host"]["cores"], 1);
        let csv = fs::read_to_string(&f.bench_csv).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "scan,1,161,0.01,1024");
        let b: BenchReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
        assert_eq!(b, bench);
        assert_eq!(fs::read_to_string(&f.metrics_csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn unwritable_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, "x").unwrap();
        assert!(emit_report(&ReportSet::default(), &file.join("sub")).is_err());
    }
}

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::loops::EpochRecord;
use super::{Result, TrainError};

/// Mean and sample standard deviation (`n - 1` denominator, 0 for n < 2).
fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let ss: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    (m, (ss / (n - 1.0)).sqrt())
}

/// Per-sample errors on one split. The `±` figures are spreads across
/// samples of that split, not across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub subject_ids: Vec<String>,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub abs_errors: Vec<f64>,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
    #[serde(default)]
    pub curves: Vec<EpochRecord>,
}

impl MetricReport {
    pub fn new(split: &str, ids: Vec<String>, predictions: Vec<f64>, targets: Vec<f64>) -> Self {
        let abs_errors: Vec<f64> = predictions
            .iter()
            .zip(&targets)
            .map(|(p, t)| (p - t).abs())
            .collect();
        let sq: Vec<f64> = abs_errors.iter().map(|e| e * e).collect();
        let (mae_mean, mae_std) = mean_std(&abs_errors);
        let (mse_mean, mse_std) = mean_std(&sq);
        MetricReport {
            split: split.into(),
            subject_ids: ids,
            predictions,
            targets,
            abs_errors,
            mae_mean,
            mae_std,
            mse_mean,
            mse_std,
            curves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| TrainError::Stats(e.to_string()))?;
        fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_json(path: &Path) -> Result<MetricReport> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| TrainError::Stats(format!("{}: {e}", path.display())))
    }

    /// Per-epoch curves as CSV.
    pub fn write_curves_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| TrainError::Stats(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["epoch", "lr", "train_loss", "val_loss", "val_mae"])
            .map_err(err)?;
        for r in &self.curves {
            let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.lr),
                format!("{:?}", r.train_loss),
                opt(r.val_loss),
                opt(r.val_mae),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p_two_sided: f64,
}

/// Paired t-test on `d_i = pred_i - actual_i`.
pub fn paired_t_test(pred: &[f64], actual: &[f64]) -> Result<TTest> {
    if pred.len() != actual.len() || pred.len() < 2 {
        return Err(TrainError::Stats(format!(
            "paired t-test needs two equal-length samples of size >= 2, got {} and {}",
            pred.len(),
            actual.len()
        )));
    }
    let d: Vec<f64> = pred.iter().zip(actual).map(|(p, a)| p - a).collect();
    let (m, sd) = mean_std(&d);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(TrainError::Stats(
            "differences have zero variance; the t statistic is undefined".into(),
        ));
    }
    let n = d.len();
    let t = m / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| TrainError::Stats(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest {
        t,
        df: n - 1,
        p_two_sided: p.clamp(0.0, 1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_test_example() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((r.t - 3.4641).abs() < 1e-4);
        assert_eq!(r.df, 2);
        // two-sided p for t = 2√3 with 2 df: 1 - t/√(t² + 2)
        let want = 1.0 - r.t / (r.t * r.t + 2.0).sqrt();
        assert!((r.p_two_sided - want).abs() < 1e-9, "{}", r.p_two_sided);
        let s = paired_t_test(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.t, -r.t);
    }

    #[test]
    fn zero_variance_is_an_error() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(paired_t_test(&[2.0, 3.0], &[1.0, 2.0]).is_err());
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn report_matches_brute_force() {
        let r = MetricReport::new(
            "test",
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 4.0, -2.0],
            vec![2.0, 2.0, -2.0],
        );
        assert_eq!(r.abs_errors, vec![1.0, 2.0, 0.0]);
        assert!((r.mae_mean - 1.0).abs() < 1e-15);
        assert!((r.mae_std - 1.0).abs() < 1e-15);
        assert!((r.mse_mean - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricReport::new("val", vec!["x".into(), "y".into()], vec![0.1, 0.7], vec![0.3, 0.2]);
        r.curves.push(EpochRecord {
            epoch: 0,
            lr: 1e-3,
            train_loss: 0.5,
            val_loss: Some(0.25),
            val_mae: None,
        });
        let p = dir.path().join("r.json");
        r.write_json(&p).unwrap();
        assert_eq!(MetricReport::read_json(&p).unwrap(), r);
        let c = dir.path().join("c.csv");
        r.write_curves_csv(&c).unwrap();
        let text = fs::read_to_string(&c).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().ends_with("0.25,"));
    }
}

//! Percentile bootstrap over jointly resampled rows.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Attempts allowed per replicate after the first one fails.
pub const MAX_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMethod {
    #[default]
    Percentile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub method: BootstrapMethod,
    pub seed: u64,
    pub stream: String,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 1000,
            level: 0.95,
            method: BootstrapMethod::Percentile,
            seed: 0,
            stream: "bootstrap".into(),
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("bootstrap needs at least one replicate".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }

    pub fn with_stream(&self, stream: impl Into<String>) -> Self {
        BootstrapConfig {
            stream: stream.into(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    #[serde(rename = "B")]
    pub replicates: usize,
}

impl ConfidenceInterval {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Sample quantile by linear interpolation between order statistics
/// (the usual "type 7" definition). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equal-tailed percentile interval of `values`.
pub fn percentile_interval(values: &[f64], level: f64) -> Result<ConfidenceInterval> {
    if values.is_empty() {
        return Err(Error::Domain("no bootstrap values".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Invariant("NaN among bootstrap values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok(ConfidenceInterval {
        lower: quantile_sorted(&sorted, tail),
        upper: quantile_sorted(&sorted, 1.0 - tail),
        level,
        replicates: values.len(),
    })
}

fn resample(columns: &[&[f64]], idx: &[usize]) -> Vec<Vec<f64>> {
    columns
        .iter()
        .map(|c| idx.iter().map(|&k| c[k]).collect())
        .collect()
}

fn common_len(columns: &[&[f64]]) -> Result<usize> {
    let n = columns
        .first()
        .ok_or_else(|| Error::Domain("no columns to resample".into()))?
        .len();
    if n == 0 || columns.iter().any(|c| c.len() != n) {
        return Err(Error::Domain("bootstrap columns must be non-empty and aligned".into()));
    }
    Ok(n)
}

/// Estimator re-evaluations for each replicate, in replicate order.
///
/// Every replicate draws one vector of row indices and applies it to all
/// columns. A failing estimator gets a fresh index vector, up to
/// [`MAX_RETRIES`] times, before the failure is returned.
pub fn bootstrap_replicates<F>(columns: &[&[f64]], estimator: F, cfg: &BootstrapConfig) -> Result<Vec<f64>>
where
    F: Fn(&[&[f64]]) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let n = common_len(columns)?;
    (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng::substream(cfg.seed, &format!("{}/{r}", cfg.stream));
            let mut last = None;
            for _ in 0..=MAX_RETRIES {
                let idx: Vec<usize> = (0..n).map(|_| stream.random_range(0..n)).collect();
                let cols = resample(columns, &idx);
                let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
                match estimator(&refs) {
                    Ok(v) => return Ok(v),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect()
}

pub fn bootstrap_ci<F>(columns: &[&[f64]], estimator: F, cfg: &BootstrapConfig) -> Result<ConfidenceInterval>
where
    F: Fn(&[&[f64]]) -> Result<f64> + Sync,
{
    let values = bootstrap_replicates(columns, estimator, cfg)?;
    percentile_interval(&values, cfg.level)
}

/// Percentile interval from caller-supplied row index vectors (0-based).
pub fn bootstrap_with_indices<F>(
    columns: &[&[f64]],
    estimator: F,
    index_sets: &[Vec<usize>],
    level: f64,
) -> Result<ConfidenceInterval>
where
    F: Fn(&[&[f64]]) -> Result<f64>,
{
    let n = common_len(columns)?;
    let mut values = Vec::with_capacity(index_sets.len());
    for idx in index_sets {
        if idx.iter().any(|&k| k >= n) {
            return Err(Error::Domain(format!("resample index out of range for N = {n}")));
        }
        let cols = resample(columns, idx);
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        values.push(estimator(&refs)?);
    }
    percentile_interval(&values, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::oracle2_value;

    fn data() -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..50).map(|k| ((k * 37) % 50) as f64 / 7.0).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(k, v)| v + ((k * 13) % 11) as f64).collect();
        (x, y)
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert!((quantile_sorted(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn identity_resample_gives_point_interval() {
        let (x, y) = data();
        let cols = [x.as_slice(), y.as_slice()];
        let v = oracle2_value(&x, &y).unwrap();
        let idx: Vec<usize> = (0..x.len()).collect();
        let ci = bootstrap_with_indices(&cols, |c| oracle2_value(c[0], c[1]), &[idx], 0.95).unwrap();
        assert_eq!((ci.lower, ci.upper), (v, v));
    }

    #[test]
    fn constant_estimator() {
        let (x, _) = data();
        for b in [1, 7, 200] {
            let cfg = BootstrapConfig {
                replicates: b,
                ..Default::default()
            };
            let ci = bootstrap_ci(&[&x], |_| Ok(0.3), &cfg).unwrap();
            assert_eq!((ci.lower, ci.upper), (0.3, 0.3));
        }
    }

    #[test]
    fn deterministic_and_nested() {
        let (x, y) = data();
        let cols = [x.as_slice(), y.as_slice()];
        let est = |c: &[&[f64]]| oracle2_value(c[0], c[1]);
        let cfg = BootstrapConfig {
            replicates: 400,
            seed: 5,
            ..Default::default()
        };
        let a = bootstrap_ci(&cols, est, &cfg).unwrap();
        let b = bootstrap_ci(&cols, est, &cfg).unwrap();
        assert_eq!(a, b);
        let wide = bootstrap_ci(&cols, est, &BootstrapConfig { level: 0.99, ..cfg }).unwrap();
        assert!(wide.lower <= a.lower && a.upper <= wide.upper);
    }

    #[test]
    fn rows_are_resampled_jointly() {
        // second column is the first plus a row tag; any misalignment shows up
        let x: Vec<f64> = (0..64).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 1000.0 + 1.0).collect();
        let cfg = BootstrapConfig {
            replicates: 300,
            ..Default::default()
        };
        let vals = bootstrap_replicates(
            &[&x, &y],
            |c| {
                for (a, b) in c[0].iter().zip(c[1]) {
                    if *b != a * 1000.0 + 1.0 {
                        return Err(Error::Invariant("rows out of step".into()));
                    }
                }
                Ok(1.0)
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(vals.len(), 300);
    }

    #[test]
    fn persistent_failure_is_reported() {
        let x = [1.0, 2.0, 3.0];
        let cfg = BootstrapConfig {
            replicates: 3,
            ..Default::default()
        };
        let r = bootstrap_ci(&[&x], |_| Err(Error::DegenerateModel), &cfg);
        assert!(matches!(r, Err(Error::DegenerateModel)));
    }

    #[test]
    fn occasional_failure_is_retried() {
        // constant except one row; resamples that miss that row are degenerate
        let mut x = vec![1.0; 10];
        x[3] = 2.0;
        let cfg = BootstrapConfig {
            replicates: 50,
            ..Default::default()
        };
        let ci = bootstrap_ci(
            &[&x],
            |c| {
                if c[0].iter().all(|v| *v == 1.0) {
                    Err(Error::DegenerateModel)
                } else {
                    Ok(1.0)
                }
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(ci.lower, 1.0);
    }

    #[test]
    fn config_validation() {
        let bad = BootstrapConfig {
            replicates: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BootstrapConfig {
            level: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

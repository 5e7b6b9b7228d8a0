//! Replication studies: RMSE against analytic truth, raw estimate samples for
//! box plots, and the oracle1 / oracle2 variance crossover.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::campaign::{AutoPolicy, CampaignConfig, CampaignState, Ranking};
use crate::designs::RlhdFamily;
use crate::error::{Error, Result};
use crate::estimators::{estimate, oracle1_known, oracle1_value, oracle2_known, oracle2_value, EstimateKind, FamilyOutputs};
use crate::designs::SimulationBatch;
use crate::models::{builtin, BuiltinModel, Model};
use crate::rng;
use crate::runner::{evaluate_rows, ProblemSpec, Runner};

/// Model evaluations charged per index by one estimate at design size `N`,
/// as a multiple of `N`.
pub fn runs_per_n(kind: EstimateKind, d: usize) -> usize {
    match kind {
        EstimateKind::Oracle2Pooled | EstimateKind::Oracle2Pearson | EstimateKind::TotalOrder => 2,
        EstimateKind::Oracle1 | EstimateKind::Oracle1Triple | EstimateKind::Oracle2Triple => 3,
        EstimateKind::Oracle2Averaged => d + 2,
    }
}

fn needs_z(kind: EstimateKind) -> bool {
    runs_per_n(kind, 0) != 2
}

/// Family of size `n` with every `Z_i`, and all outputs, evaluated directly.
pub fn evaluated_family(model: &dyn Model, n: usize, seed: u64, with_z: bool) -> Result<(RlhdFamily, FamilyOutputs)> {
    let d = model.dim();
    let mut fam = RlhdFamily::generate(n, d, seed)?;
    let x = SimulationBatch::new("X", model.id(), evaluate_rows(model, fam.x())?)?;
    let w = SimulationBatch::new("W", model.id(), evaluate_rows(model, fam.w())?)?;
    let mut outputs = FamilyOutputs::new(x, w);
    if with_z {
        for i in 0..d {
            let z = fam.ensure_z(i)?;
            let batch = SimulationBatch::new(z.id(), model.id(), evaluate_rows(model, z)?)?;
            outputs.z.insert(i, batch);
        }
    }
    Ok((fam, outputs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub model: String,
    pub kind: EstimateKind,
    /// 0-based input index.
    pub input: usize,
    pub n_runs: usize,
    pub n: usize,
    pub rmse: f64,
    pub reps: usize,
    pub seed: u64,
}

/// Root mean square error of each estimator column against `truth`.
/// `samples[r][i]` is replicate `r`'s estimate of index `i`.
pub fn rmse_from_samples(samples: &[Vec<f64>], truth: &[f64]) -> Vec<f64> {
    let reps = samples.len() as f64;
    (0..truth.len())
        .map(|i| {
            let sse: f64 = samples.iter().map(|s| (s[i] - truth[i]).powi(2)).sum();
            (sse / reps).sqrt()
        })
        .collect()
}

/// RMSE per (estimator, index, evaluation budget). Each estimator gets the
/// design size `N = n_runs / runs_per_n`, and estimators with equal `N` share
/// the same replicate families.
pub fn rmse_study(
    model_id: &str,
    kinds: &[EstimateKind],
    n_runs_grid: &[usize],
    n_reps: usize,
    seed: u64,
) -> Result<Vec<RmseRow>> {
    let model = builtin(model_id)?;
    rmse_study_with(&model, kinds, n_runs_grid, n_reps, seed)
}

pub fn rmse_study_with(
    model: &BuiltinModel,
    kinds: &[EstimateKind],
    n_runs_grid: &[usize],
    n_reps: usize,
    seed: u64,
) -> Result<Vec<RmseRow>> {
    let d = model.dim();
    let truth = model.analytic_indices()?;
    let mut rows = Vec::new();
    for &n_runs in n_runs_grid {
        // group estimators by design size
        let mut groups: Vec<(usize, Vec<EstimateKind>)> = Vec::new();
        for &k in kinds {
            let n = n_runs / runs_per_n(k, d);
            if n < 2 {
                return Err(Error::Domain(format!("budget {n_runs} is too small for {k}")));
            }
            match groups.iter_mut().find(|g| g.0 == n) {
                Some(g) => g.1.push(k),
                None => groups.push((n, vec![k])),
            }
        }
        for (n, group) in groups {
            let with_z = group.iter().any(|k| needs_z(*k));
            let per_rep: Vec<Vec<Vec<f64>>> = (0..n_reps)
                .into_par_iter()
                .map(|r| {
                    let s = rng::child_seed(seed, &format!("rep/{n}/{r}"));
                    let (fam, out) = evaluated_family(model, n, s, with_z)?;
                    group
                        .iter()
                        .map(|&k| (0..d).map(|i| Ok(estimate(&fam, &out, k, i)?.value)).collect())
                        .collect()
                })
                .collect::<Result<_>>()?;
            for (g, &kind) in group.iter().enumerate() {
                let samples: Vec<Vec<f64>> = per_rep.iter().map(|r| r[g].clone()).collect();
                let target = if kind == EstimateKind::TotalOrder {
                    &truth.total_order
                } else {
                    &truth.first_order
                };
                for (input, rmse) in rmse_from_samples(&samples, target).into_iter().enumerate() {
                    rows.push(RmseRow {
                        model: model.id.clone(),
                        kind,
                        input,
                        n_runs,
                        n,
                        rmse,
                        reps: n_reps,
                        seed,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    /// Oracle2 on one `X`, `W` pair of size `n`.
    OneShot { n: usize },
    /// Stage one at size `n` followed by `steps` automatic stage-two steps.
    Adaptive { n: usize, steps: usize, ranking: Ranking },
}

impl Strategy {
    pub fn budget(&self) -> usize {
        match *self {
            Strategy::OneShot { n } => 2 * n,
            Strategy::Adaptive { n, steps, .. } => n * (steps + 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxplotResult {
    pub model: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub flag_cutoff: f64,
    /// Inputs whose estimates are checked against `flag_cutoff`.
    pub watched: Vec<usize>,
    /// `estimates[r][i]`: replicate `r`, input `i`.
    pub estimates: Vec<Vec<f64>>,
    pub flagged: Vec<bool>,
    pub flagged_fraction: f64,
    pub budget_per_rep: usize,
}

impl BoxplotResult {
    pub fn rmse(&self, truth: &[f64]) -> Vec<f64> {
        rmse_from_samples(&self.estimates, truth)
    }
}

/// Raw per-replicate estimates under a strategy, flagging replicates where
/// any watched input's estimate exceeds `flag_cutoff`.
pub fn boxplot_study(
    model_id: &str,
    strategy: &Strategy,
    n_reps: usize,
    seed: u64,
    watched: &[usize],
    flag_cutoff: f64,
) -> Result<BoxplotResult> {
    let model = builtin(model_id)?;
    let d = model.dim();
    if let Some(bad) = watched.iter().find(|&&i| i >= d) {
        return Err(Error::Domain(format!("watched input {bad} out of range for d = {d}")));
    }
    let estimates: Vec<Vec<f64>> = (0..n_reps)
        .into_par_iter()
        .map(|r| {
            let s = rng::child_seed(seed, &format!("rep/{r}"));
            match *strategy {
                Strategy::OneShot { n } => {
                    let (fam, out) = evaluated_family(&model, n, s, false)?;
                    (0..d)
                        .map(|i| Ok(estimate(&fam, &out, EstimateKind::Oracle2Pooled, i)?.value))
                        .collect()
                }
                Strategy::Adaptive { n, steps, ranking } => {
                    let spec = ProblemSpec::builtin(model_id, n, s);
                    let runner = Runner::new(spec.clone())?;
                    let mut state = CampaignState::new(spec, CampaignConfig::without_bootstrap())?;
                    state.auto_run(
                        &runner,
                        &AutoPolicy {
                            max_steps: steps,
                            exit_band: None,
                            ranking,
                        },
                    )?;
                    Ok(state.records.iter().map(|r| r.current.value).collect())
                }
            }
        })
        .collect::<Result<_>>()?;
    let flagged: Vec<bool> = estimates
        .iter()
        .map(|e| watched.iter().any(|&i| e[i] > flag_cutoff))
        .collect();
    let flagged_fraction = flagged.iter().filter(|f| **f).count() as f64 / n_reps.max(1) as f64;
    Ok(BoxplotResult {
        model: model_id.to_string(),
        strategy: strategy.clone(),
        seed,
        flag_cutoff,
        watched: watched.to_vec(),
        estimates,
        flagged,
        flagged_fraction,
        budget_per_rep: strategy.budget(),
    })
}

/// Where the oracle1 and oracle2 estimators get their output moments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentMode {
    /// The exact mean and variance of the model output.
    #[default]
    Known,
    /// Moments pooled over the estimator's own batches.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub target: f64,
    pub alpha: f64,
    pub var_oracle1: f64,
    pub var_oracle2: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossoverResult {
    pub d: usize,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub mode: MomentMode,
    pub rows: Vec<CrossoverRow>,
    /// First target where `var_oracle1 / var_oracle2` reaches 1, by linear
    /// interpolation of the log ratio between neighbouring targets.
    pub crossover: Option<f64>,
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_crossover_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Empirical variances of simple oracle1 and oracle2 for input 1 of a linear
/// two-part model tuned so that `S₁` hits each target.
pub fn crossover_study(
    targets: &[f64],
    d: usize,
    n: usize,
    n_reps: usize,
    seed: u64,
    mode: MomentMode,
) -> Result<CrossoverResult> {
    if n_reps < 2 {
        return Err(Error::Domain("crossover study needs at least two replicates".into()));
    }
    let mut rows = Vec::with_capacity(targets.len());
    for (t, &target) in targets.iter().enumerate() {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::Domain(format!("target index {target} outside (0, 1)")));
        }
        let alpha = (target / (1.0 - target)).sqrt();
        let model = BuiltinModel::two_part(alpha, d)?;
        let variance = alpha * alpha + 1.0;
        let pairs: Vec<(f64, f64)> = (0..n_reps)
            .into_par_iter()
            .map(|r| {
                let s = rng::child_seed(seed, &format!("crossover/{t}/{r}"));
                let mut fam = RlhdFamily::generate(n, d, s)?;
                let z = fam.ensure_z(0)?.clone();
                let x = evaluate_rows(&model, fam.x())?;
                let wmi = fam.w_to_x(0)?.apply_rows(&evaluate_rows(&model, fam.w())?)?;
                let z = evaluate_rows(&model, &z)?;
                Ok(match mode {
                    MomentMode::Known => (
                        oracle1_known(&x, &z, &wmi, 0.0, variance)?,
                        oracle2_known(&x, &wmi, 0.0, variance)?,
                    ),
                    MomentMode::Pooled => (oracle1_value(&x, &z, &wmi)?, oracle2_value(&x, &wmi)?),
                })
            })
            .collect::<Result<_>>()?;
        let o1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let o2: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (v1, v2) = (sample_variance(&o1), sample_variance(&o2));
        rows.push(CrossoverRow {
            target,
            alpha,
            var_oracle1: v1,
            var_oracle2: v2,
            ratio: v1 / v2,
        });
    }
    let crossover = rows.windows(2).find_map(|w| {
        let (a, b) = (w[0].ratio.ln(), w[1].ratio.ln());
        (a < 0.0 && b >= 0.0).then(|| w[0].target + (w[1].target - w[0].target) * (-a) / (b - a))
    });
    Ok(CrossoverResult {
        d,
        n,
        reps: n_reps,
        seed,
        mode,
        rows,
        crossover,
    })
}

pub fn write_rmse_csv(path: &Path, rows: &[RmseRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "kind", "input", "n_runs", "n", "rmse", "reps", "seed"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.kind.to_string(),
            (r.input + 1).to_string(),
            r.n_runs.to_string(),
            r.n.to_string(),
            r.rmse.to_string(),
            r.reps.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_boxplot_csv(path: &Path, result: &BoxplotResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = result.estimates.first().map_or(0, Vec::len);
    let mut header = vec!["model".to_string(), "seed".into(), "budget".into(), "rep".into(), "flagged".into()];
    header.extend((1..=d).map(|i| format!("S{i}")));
    w.write_record(&header)?;
    for (r, (est, flag)) in result.estimates.iter().zip(&result.flagged).enumerate() {
        let mut rec = vec![
            result.model.clone(),
            result.seed.to_string(),
            result.budget_per_rep.to_string(),
            r.to_string(),
            flag.to_string(),
        ];
        rec.extend(est.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_crossover_csv(path: &Path, result: &CrossoverResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["target", "alpha", "var_oracle1", "var_oracle2", "ratio", "n", "d", "reps", "seed", "moments"])?;
    let mode = match result.mode {
        MomentMode::Known => "known",
        MomentMode::Pooled => "pooled",
    };
    for r in &result.rows {
        w.write_record([
            r.target.to_string(),
            r.alpha.to_string(),
            r.var_oracle1.to_string(),
            r.var_oracle2.to_string(),
            r.ratio.to_string(),
            result.n.to_string(),
            result.d.to_string(),
            result.reps.to_string(),
            result.seed.to_string(),
            mode.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

//! First-order and total-order Sobol' index estimators.
//!
//! The slice kernels at the top take output vectors that are already aligned
//! row by row. [`EstimatorPlan`] builds those aligned vectors from an
//! [`RlhdFamily`] and its evaluated batches using only output reordering, so a
//! plan can be evaluated once or re-evaluated under bootstrap resampling.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_ci, BootstrapConfig, ConfidenceInterval};
use crate::designs::{RlhdFamily, SimulationBatch};
use crate::error::{Error, Result};

/// Grand mean and (1/n) variance of several output batches taken together.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledMoments {
    pub mean: f64,
    pub variance: f64,
    pub pool_size: usize,
}

fn check_lengths(batches: &[&[f64]]) -> Result<usize> {
    let n = batches
        .first()
        .ok_or_else(|| Error::Domain("no batches to pool".into()))?
        .len();
    if batches.iter().any(|b| b.len() != n) {
        return Err(Error::Domain("batches have different lengths".into()));
    }
    if n < 2 {
        return Err(Error::Domain(format!("N = {n}; estimators need N >= 2")));
    }
    Ok(n)
}

fn is_degenerate(mean: f64, variance: f64) -> bool {
    variance <= 0.0 || variance <= (1e-12 * mean).powi(2)
}

/// Moments over all values of all batches.
///
/// Sums are accumulated per batch and then added, so the result does not
/// depend on batch order for two batches. The variance is the mean squared
/// deviation from the pooled mean, which equals the mean of squares minus the
/// squared mean without the cancellation.
pub fn pooled_moments(batches: &[&[f64]]) -> Result<PooledMoments> {
    let n = check_lengths(batches)?;
    let count = (n * batches.len()) as f64;
    let mean = batches.iter().map(|b| b.iter().sum::<f64>()).sum::<f64>() / count;
    let variance = batches
        .iter()
        .map(|b| b.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
        .sum::<f64>()
        / count;
    if !mean.is_finite() || !variance.is_finite() {
        return Err(Error::eval(None, "non-finite pooled moments"));
    }
    if is_degenerate(mean, variance) {
        return Err(Error::DegenerateModel);
    }
    Ok(PooledMoments {
        mean,
        variance,
        pool_size: batches.len(),
    })
}

fn centered_product(a: &[f64], b: &[f64], mean: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - mean) * (y - mean)).sum()
}

/// Pick-freeze correlation with moments pooled over both batches.
pub fn oracle2_value(x: &[f64], wmi: &[f64]) -> Result<f64> {
    let m = pooled_moments(&[x, wmi])?;
    oracle2_known(x, wmi, m.mean, m.variance)
}

/// [`oracle2_value`] with the output mean and variance supplied.
pub fn oracle2_known(x: &[f64], wmi: &[f64], mean: f64, variance: f64) -> Result<f64> {
    let n = check_lengths(&[x, wmi])?;
    Ok(centered_product(x, wmi, mean) / (n as f64 * variance))
}

/// Empirical Pearson correlation of the two batches.
pub fn oracle2_pearson_value(x: &[f64], wmi: &[f64]) -> Result<f64> {
    let n = check_lengths(&[x, wmi])? as f64;
    let mx = x.iter().sum::<f64>() / n;
    let mw = wmi.iter().sum::<f64>() / n;
    let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let vw = wmi.iter().map(|v| (v - mw).powi(2)).sum::<f64>() / n;
    if is_degenerate(mx, vx) || is_degenerate(mw, vw) {
        return Err(Error::DegenerateModel);
    }
    let cov = x.iter().zip(wmi).map(|(a, b)| (a - mx) * (b - mw)).sum::<f64>() / n;
    Ok(cov / (vx.sqrt() * vw.sqrt()))
}

/// Σ (x − μ)(w₋ᵢ − w) / (N σ²) with moments pooled over all three batches.
///
/// `x` and `wmi` share input `i`; `w` and `wmi` share every other input.
pub fn oracle1_value(x: &[f64], w: &[f64], wmi: &[f64]) -> Result<f64> {
    let m = pooled_moments(&[x, w, wmi])?;
    oracle1_known(x, w, wmi, m.mean, m.variance)
}

pub fn oracle1_known(x: &[f64], w: &[f64], wmi: &[f64], mean: f64, variance: f64) -> Result<f64> {
    let n = check_lengths(&[x, w, wmi])?;
    let s: f64 = x
        .iter()
        .zip(w)
        .zip(wmi)
        .map(|((a, b), c)| (a - mean) * (c - b))
        .sum();
    Ok(s / (n as f64 * variance))
}

/// 1 − Σ (w − μ)(w₋ᵢ − μ) / (N σ²); `w` and `wmi` differ only in input `i`.
pub fn total_order_value(w: &[f64], wmi: &[f64]) -> Result<f64> {
    let m = pooled_moments(&[w, wmi])?;
    let n = w.len() as f64;
    Ok(1.0 - centered_product(w, wmi, m.mean) / (n * m.variance))
}

/// The three Oracle 1 components of the triple estimator, all sharing one
/// set of moments pooled over `x`, `wmi` and `z`.
///
/// Inputs are aligned rows of `X`, `W₋ᵢ`, `Z_i`, `X̃` and `W̃₋ᵢ`.
pub fn triple_oracle1_components(
    x: &[f64],
    wmi: &[f64],
    z: &[f64],
    x_tilde: &[f64],
    wmi_tilde: &[f64],
) -> Result<[f64; 3]> {
    let n = check_lengths(&[x, wmi, z, x_tilde, wmi_tilde])? as f64;
    let m = pooled_moments(&[x, wmi, z])?;
    let mu = m.mean;
    let (mut c1, mut c2, mut c3) = (0.0, 0.0, 0.0);
    for k in 0..x.len() {
        let diff = z[k] - wmi[k];
        c1 -= (x[k] - mu) * diff;
        c2 += (x_tilde[k] - mu) * diff;
        c3 += (wmi_tilde[k] - mu) * diff;
    }
    let scale = n * m.variance;
    Ok([c1 / scale, c2 / scale, c3 / scale])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateKind {
    Oracle2Pooled,
    Oracle2Pearson,
    Oracle1,
    Oracle1Triple,
    Oracle2Averaged,
    Oracle2Triple,
    TotalOrder,
}

impl EstimateKind {
    pub const ALL: [EstimateKind; 7] = [
        EstimateKind::Oracle2Pooled,
        EstimateKind::Oracle2Pearson,
        EstimateKind::Oracle1,
        EstimateKind::Oracle1Triple,
        EstimateKind::Oracle2Averaged,
        EstimateKind::Oracle2Triple,
        EstimateKind::TotalOrder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimateKind::Oracle2Pooled => "oracle2_pooled",
            EstimateKind::Oracle2Pearson => "oracle2_pearson",
            EstimateKind::Oracle1 => "oracle1",
            EstimateKind::Oracle1Triple => "oracle1_triple",
            EstimateKind::Oracle2Averaged => "oracle2_averaged",
            EstimateKind::Oracle2Triple => "oracle2_triple",
            EstimateKind::TotalOrder => "total_order",
        }
    }
}

impl fmt::Display for EstimateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        let alias = match norm.as_str() {
            "oracle2" => Some(EstimateKind::Oracle2Pooled),
            "triple_oracle1" => Some(EstimateKind::Oracle1Triple),
            "triple_oracle2" => Some(EstimateKind::Oracle2Triple),
            "averaged_oracle2" => Some(EstimateKind::Oracle2Averaged),
            "total" => Some(EstimateKind::TotalOrder),
            _ => None,
        };
        alias
            .or_else(|| EstimateKind::ALL.into_iter().find(|k| k.as_str() == norm))
            .ok_or_else(|| Error::Config(format!("unknown estimator kind {s:?}")))
    }
}

/// One index estimate with its cost accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolEstimate {
    /// 0-based input index.
    pub input: usize,
    pub kind: EstimateKind,
    pub value: f64,
    pub ci: Option<ConfidenceInterval>,
    /// Component values of averaged estimators; empty for simple ones.
    pub components: Vec<f64>,
    pub batches_used: Vec<String>,
    pub evaluations_charged: usize,
}

impl SobolEstimate {
    /// Copy with value and interval clipped to [0, 1]. Never applied implicitly.
    pub fn clamped(&self) -> Self {
        let clip = |v: f64| v.clamp(0.0, 1.0);
        SobolEstimate {
            value: clip(self.value),
            ci: self.ci.map(|c| ConfidenceInterval {
                lower: clip(c.lower),
                upper: clip(c.upper),
                ..c
            }),
            ..self.clone()
        }
    }
}

/// Outputs of the evaluated members of a family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyOutputs {
    pub x: SimulationBatch,
    pub w: SimulationBatch,
    #[serde(default)]
    pub z: BTreeMap<usize, SimulationBatch>,
}

impl FamilyOutputs {
    pub fn new(x: SimulationBatch, w: SimulationBatch) -> Self {
        FamilyOutputs {
            x,
            w,
            z: BTreeMap::new(),
        }
    }

    fn require_z(&self, i: usize) -> Result<&SimulationBatch> {
        self.z
            .get(&i)
            .ok_or_else(|| Error::Precondition(format!("no outputs for design Z{}", i + 1)))
    }

    /// Outputs of base member `id` (`X`, `W` or `Z{i}`).
    pub fn member(&self, id: &str) -> Option<&SimulationBatch> {
        match id {
            "X" => Some(&self.x),
            "W" => Some(&self.w),
            _ => self.z.values().find(|b| b.design_id == id),
        }
    }
}

type Kernel = fn(&[&[f64]]) -> Result<Vec<f64>>;

/// Aligned output columns plus the estimator that combines them.
#[derive(Clone)]
pub struct EstimatorPlan {
    pub input: usize,
    pub kind: EstimateKind,
    pub columns: Vec<Vec<f64>>,
    pub batches_used: Vec<String>,
    pub evaluations_charged: usize,
    kernel: Kernel,
}

impl fmt::Debug for EstimatorPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EstimatorPlan")
            .field("input", &self.input)
            .field("kind", &self.kind)
            .field("batches_used", &self.batches_used)
            .field("evaluations_charged", &self.evaluations_charged)
            .finish()
    }
}

fn k_oracle2(c: &[&[f64]]) -> Result<Vec<f64>> {
    Ok(vec![oracle2_value(c[0], c[1])?])
}

fn k_pearson(c: &[&[f64]]) -> Result<Vec<f64>> {
    Ok(vec![oracle2_pearson_value(c[0], c[1])?])
}

fn k_oracle1(c: &[&[f64]]) -> Result<Vec<f64>> {
    Ok(vec![oracle1_value(c[0], c[1], c[2])?])
}

fn k_triple1(c: &[&[f64]]) -> Result<Vec<f64>> {
    Ok(triple_oracle1_components(c[0], c[1], c[2], c[3], c[4])?.to_vec())
}

fn k_averaged2(c: &[&[f64]]) -> Result<Vec<f64>> {
    c[1..].iter().map(|p| oracle2_value(c[0], p)).collect()
}

fn k_triple2(c: &[&[f64]]) -> Result<Vec<f64>> {
    Ok(vec![
        oracle2_value(c[0], c[1])?,
        oracle2_value(c[0], c[2])?,
        oracle2_value(c[1], c[2])?,
    ])
}

fn k_total(c: &[&[f64]]) -> Result<Vec<f64>> {
    Ok(vec![total_order_value(c[0], c[1])?])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl EstimatorPlan {
    fn new(
        input: usize,
        kind: EstimateKind,
        columns: Vec<Vec<f64>>,
        batches_used: &[&str],
        base_batches: usize,
        kernel: Kernel,
    ) -> Self {
        let n = columns[0].len();
        EstimatorPlan {
            input,
            kind,
            columns,
            batches_used: batches_used.iter().map(|s| s.to_string()).collect(),
            evaluations_charged: base_batches * n,
            kernel,
        }
    }

    /// Run the estimator on arbitrary aligned columns (e.g. a resample).
    /// Returns the value and the components it averages.
    pub fn apply(&self, columns: &[&[f64]]) -> Result<(f64, Vec<f64>)> {
        let comps = (self.kernel)(columns)?;
        let v = if comps.len() == 1 { comps[0] } else { mean(&comps) };
        Ok((v, comps))
    }

    pub fn column_refs(&self) -> Vec<&[f64]> {
        self.columns.iter().map(Vec::as_slice).collect()
    }

    pub fn evaluate(&self) -> Result<SobolEstimate> {
        let (value, comps) = self.apply(&self.column_refs())?;
        Ok(SobolEstimate {
            input: self.input,
            kind: self.kind,
            value,
            ci: None,
            components: if comps.len() > 1 { comps } else { Vec::new() },
            batches_used: self.batches_used.clone(),
            evaluations_charged: self.evaluations_charged,
        })
    }

    /// Point estimate plus a bootstrap interval over jointly resampled rows.
    pub fn evaluate_with_ci(&self, cfg: &BootstrapConfig) -> Result<SobolEstimate> {
        let mut est = self.evaluate()?;
        let ci = bootstrap_ci(&self.column_refs(), |c| Ok(self.apply(c)?.0), cfg)?;
        est.ci = Some(ci);
        Ok(est)
    }

    /// Pick-freeze correlation of `x` and `w₋ᵢ` (no reordering).
    pub fn from_pick_freeze(i: usize, x: &SimulationBatch, wmi: &SimulationBatch) -> Self {
        Self::new(
            i,
            EstimateKind::Oracle2Pooled,
            vec![x.outputs.clone(), wmi.outputs.clone()],
            &[&x.design_id, &wmi.design_id],
            2,
            k_oracle2,
        )
    }

    /// Build the plan for `kind` on input `i` of a family.
    pub fn for_family(
        family: &RlhdFamily,
        outputs: &FamilyOutputs,
        kind: EstimateKind,
        i: usize,
    ) -> Result<Self> {
        check_outputs(family, outputs)?;
        if i >= family.d() {
            return Err(Error::Domain(format!("input index {i} out of range for d = {}", family.d())));
        }
        let tag = i + 1;
        let x = outputs.x.outputs.clone();
        let wmi = family.w_to_x(i)?.apply_rows(&outputs.w.outputs)?;
        let wm_id = format!("W-{tag}");
        let z_id = format!("Z{tag}");
        let plan = match kind {
            EstimateKind::Oracle2Pooled => {
                Self::new(i, kind, vec![x, wmi], &["X", &wm_id], 2, k_oracle2)
            }
            EstimateKind::Oracle2Pearson => {
                Self::new(i, kind, vec![x, wmi], &["X", &wm_id], 2, k_pearson)
            }
            EstimateKind::Oracle1 => {
                let z = z_outputs(family, outputs, i)?;
                Self::new(i, kind, vec![x, z, wmi], &["X", &z_id, &wm_id], 3, k_oracle1)
            }
            EstimateKind::Oracle1Triple => {
                let z = z_outputs(family, outputs, i)?;
                let q = family.x_to_z(i)?;
                let x_t = q.apply_rows(&x)?;
                let wmi_t = q.apply_rows(&wmi)?;
                let xt_id = format!("X~{tag}");
                let wt_id = format!("W-{tag}~");
                Self::new(
                    i,
                    kind,
                    vec![x, wmi, z, x_t, wmi_t],
                    &["X", &wm_id, &z_id, &xt_id, &wt_id],
                    3,
                    k_triple1,
                )
            }
            EstimateKind::Oracle2Triple => {
                z_outputs(family, outputs, i)?;
                let zt = family.z_to_x(i)?.apply_rows(&outputs.require_z(i)?.outputs)?;
                let zt_id = format!("Z{tag}~");
                Self::new(
                    i,
                    kind,
                    vec![x, wmi, zt],
                    &["X", &wm_id, &zt_id],
                    3,
                    k_triple2,
                )
            }
            EstimateKind::TotalOrder => {
                let z = z_outputs(family, outputs, i)?;
                Self::new(i, kind, vec![wmi, z], &[&wm_id, &z_id], 2, k_total)
            }
            EstimateKind::Oracle2Averaged => {
                let mut partners = vec!["W".to_string()];
                partners.extend(outputs.z.keys().map(|k| format!("Z{}", k + 1)));
                let refs: Vec<&str> = partners.iter().map(String::as_str).collect();
                return Self::averaged_oracle2(family, outputs, i, &refs);
            }
        };
        Ok(plan)
    }

    /// Mean of `oracle2(X, partner)` over the named partners (`W`, `Z{k}`),
    /// each partner's outputs reordered onto `X`'s column `j`.
    pub fn averaged_oracle2(
        family: &RlhdFamily,
        outputs: &FamilyOutputs,
        j: usize,
        partners: &[&str],
    ) -> Result<Self> {
        check_outputs(family, outputs)?;
        if partners.is_empty() {
            return Err(Error::Precondition("averaged estimator needs at least one partner".into()));
        }
        let mut columns = vec![outputs.x.outputs.clone()];
        let mut used = vec!["X".to_string()];
        for (k, &p) in partners.iter().enumerate() {
            if p == "X" || partners[..k].contains(&p) {
                return Err(Error::Invariant(format!(
                    "{p} is not an independent partner of X here"
                )));
            }
            let batch = outputs
                .member(p)
                .filter(|_| family.member(p).is_some())
                .ok_or_else(|| Error::Invariant(format!("{p} is not an evaluated member of this family")))?;
            columns.push(family.to_x(p, j)?.apply_rows(&batch.outputs)?);
            used.push(format!("{p}~{}", j + 1));
        }
        let refs: Vec<&str> = used.iter().map(String::as_str).collect();
        Ok(Self::new(
            j,
            EstimateKind::Oracle2Averaged,
            columns,
            &refs,
            partners.len() + 1,
            k_averaged2,
        ))
    }
}

fn check_outputs(family: &RlhdFamily, outputs: &FamilyOutputs) -> Result<()> {
    let n = family.n();
    let all = std::iter::once(&outputs.x)
        .chain(std::iter::once(&outputs.w))
        .chain(outputs.z.values());
    for b in all {
        if b.len() != n {
            return Err(Error::Invariant(format!(
                "{} has {} outputs for a design of {n} rows",
                b.design_id,
                b.len()
            )));
        }
    }
    Ok(())
}

fn z_outputs(family: &RlhdFamily, outputs: &FamilyOutputs, i: usize) -> Result<Vec<f64>> {
    if family.z(i).is_none() {
        return Err(Error::Precondition(format!("design Z{} has not been built", i + 1)));
    }
    Ok(outputs.require_z(i)?.outputs.clone())
}

/// Convenience: evaluate `kind` for input `i`.
pub fn estimate(
    family: &RlhdFamily,
    outputs: &FamilyOutputs,
    kind: EstimateKind,
    i: usize,
) -> Result<SobolEstimate> {
    EstimatorPlan::for_family(family, outputs, kind, i)?.evaluate()
}

/// First-order oracle2 estimates for every input from the `X`, `W` pair.
pub fn oracle2_all(family: &RlhdFamily, outputs: &FamilyOutputs) -> Result<Vec<SobolEstimate>> {
    (0..family.d())
        .map(|i| estimate(family, outputs, EstimateKind::Oracle2Pooled, i))
        .collect()
}

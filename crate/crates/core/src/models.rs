//! Built-in benchmark models with closed-form Sobol' indices.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analytic_reference::{pick_freeze, MonteCarloValue};
use crate::error::{Error, Result};

/// A deterministic map from a point of the input space to a scalar output.
pub trait Model: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;

    /// Evaluate every row of a row-major point array.
    fn eval_rows(&self, points: &[f64]) -> Vec<f64> {
        points.chunks(self.dim()).map(|r| self.eval(r)).collect()
    }
}

/// First-order and total indices plus the total variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticIndices {
    pub first_order: Vec<f64>,
    pub total_order: Vec<f64>,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ModelForm {
    /// `∏ (|4xᵢ − 2| + cᵢ)/(1 + aᵢ)` over the first `a.len()` inputs, plus
    /// `Σ tailⱼ · x` over the inputs that follow.
    GProduct {
        a: Vec<f64>,
        c: Vec<f64>,
        tail: Vec<f64>,
    },
    /// `intercept + Σ bᵢ xᵢ`.
    Linear { coeffs: Vec<f64>, intercept: f64 },
    /// `x₁ · x₂`.
    Product2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuiltinModel {
    pub id: String,
    pub form: ModelForm,
}

fn check_a(a: &[f64]) -> Result<()> {
    if let Some(bad) = a.iter().find(|v| **v == -1.0 || !v.is_finite()) {
        return Err(Error::Domain(format!("g-function coefficient a = {bad} (needs a != -1)")));
    }
    Ok(())
}

fn gfactor(x: f64, a: f64, c: f64) -> f64 {
    ((4.0 * x - 2.0).abs() + c) / (1.0 + a)
}

/// `∏ (|4xᵢ − 2| + 2 + 3aᵢ)/(1 + aᵢ)`; each factor has mean 3.
pub fn modified_g(x: &[f64], a: &[f64]) -> Result<f64> {
    check_a(a)?;
    if x.len() != a.len() {
        return Err(Error::Domain(format!("{} inputs for {} coefficients", x.len(), a.len())));
    }
    Ok(x.iter().zip(a).map(|(&x, &a)| gfactor(x, a, 2.0 + 3.0 * a)).product())
}

/// Modified g-function on the first `a.len()` inputs plus `ε · Σ` of the rest.
pub fn modified_g_linear(x: &[f64], a: &[f64], eps: f64) -> Result<f64> {
    if x.len() < a.len() {
        return Err(Error::Domain(format!("{} inputs for {} coefficients", x.len(), a.len())));
    }
    let (head, rest) = x.split_at(a.len());
    Ok(modified_g(head, a)? + eps * rest.iter().sum::<f64>())
}

/// `∏ (|4xᵢ − 2| + aᵢ)/(1 + aᵢ)`; each factor has mean 1.
pub fn g_sobol(x: &[f64], a: &[f64]) -> Result<f64> {
    check_a(a)?;
    if x.len() != a.len() {
        return Err(Error::Domain(format!("{} inputs for {} coefficients", x.len(), a.len())));
    }
    Ok(x.iter().zip(a).map(|(&x, &a)| gfactor(x, a, a)).product())
}

impl BuiltinModel {
    pub fn modified_g(a: Vec<f64>) -> Result<Self> {
        Self::modified_g_linear(a, 0.0, 0)
    }

    pub fn modified_g_linear(a: Vec<f64>, eps: f64, tail_len: usize) -> Result<Self> {
        check_a(&a)?;
        let id = if tail_len == 0 {
            format!("mod-g-{}", join(&a))
        } else {
            format!("mod-g-{}-lin-eps{eps:.2}-d{}", join(&a), a.len() + tail_len)
        };
        Ok(BuiltinModel {
            id,
            form: ModelForm::GProduct {
                c: a.iter().map(|a| 2.0 + 3.0 * a).collect(),
                a,
                tail: vec![eps; tail_len],
            },
        })
    }

    pub fn g_sobol(a: Vec<f64>) -> Result<Self> {
        check_a(&a)?;
        let id = if a.iter().all(|v| *v == a[0]) {
            format!("g-sobol-d{}-a{}", a.len(), a[0])
        } else {
            format!("g-sobol-{}", join(&a))
        };
        Ok(BuiltinModel {
            id,
            form: ModelForm::GProduct {
                c: a.clone(),
                a,
                tail: Vec::new(),
            },
        })
    }

    pub fn linear(id: impl Into<String>, coeffs: Vec<f64>, intercept: f64) -> Self {
        BuiltinModel {
            id: id.into(),
            form: ModelForm::Linear { coeffs, intercept },
        }
    }

    /// Zero-mean, linear model whose first input explains `α²/(α²+1)` of the
    /// variance and the other `d − 1` inputs share the rest equally.
    pub fn two_part(alpha: f64, d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::Domain("two-part model needs d >= 2".into()));
        }
        let s12 = 12f64.sqrt();
        let rest = s12 / ((d - 1) as f64).sqrt();
        let mut coeffs = vec![alpha * s12];
        coeffs.extend(std::iter::repeat_n(rest, d - 1));
        let intercept = -0.5 * coeffs.iter().sum::<f64>();
        Ok(Self::linear(format!("two-part-a{alpha}-d{d}"), coeffs, intercept))
    }

    pub fn product2() -> Self {
        BuiltinModel {
            id: "product-d2".into(),
            form: ModelForm::Product2,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn shared(self) -> Arc<dyn Model> {
        Arc::new(self)
    }

    /// Closed-form indices (all built-in forms have them).
    pub fn analytic_indices(&self) -> Result<AnalyticIndices> {
        match &self.form {
            ModelForm::GProduct { a, c, tail } => Ok(gproduct_indices(a, c, tail)),
            ModelForm::Linear { coeffs, .. } => {
                let parts: Vec<f64> = coeffs.iter().map(|b| b * b / 12.0).collect();
                let variance: f64 = parts.iter().sum();
                if variance == 0.0 {
                    return Err(Error::DegenerateModel);
                }
                let s: Vec<f64> = parts.iter().map(|p| p / variance).collect();
                Ok(AnalyticIndices {
                    first_order: s.clone(),
                    total_order: s,
                    variance,
                })
            }
            ModelForm::Product2 => Ok(AnalyticIndices {
                first_order: vec![3.0 / 7.0; 2],
                total_order: vec![4.0 / 7.0; 2],
                variance: 7.0 / 144.0,
            }),
        }
    }

    /// E[Y] under independent U(0, 1) inputs.
    pub fn analytic_mean(&self) -> f64 {
        match &self.form {
            ModelForm::GProduct { a, c, tail } => {
                a.iter().zip(c).map(|(a, c)| (1.0 + c) / (1.0 + a)).product::<f64>()
                    + 0.5 * tail.iter().sum::<f64>()
            }
            ModelForm::Linear { coeffs, intercept } => intercept + 0.5 * coeffs.iter().sum::<f64>(),
            ModelForm::Product2 => 0.25,
        }
    }
}

fn join(a: &[f64]) -> String {
    a.iter().map(f64::to_string).collect::<Vec<_>>().join("-")
}

fn gproduct_indices(a: &[f64], c: &[f64], tail: &[f64]) -> AnalyticIndices {
    // factor (|4x−2| + c)/(1 + a): |4x−2| is U(0, 2) with mean 1, variance 1/3
    let m: Vec<f64> = a.iter().zip(c).map(|(a, c)| (1.0 + c) / (1.0 + a)).collect();
    let v: Vec<f64> = a.iter().map(|a| (1.0 / 3.0) / ((1.0 + a) * (1.0 + a))).collect();
    let prod_m2: f64 = m.iter().map(|m| m * m).product();
    let prod_second: f64 = m.iter().zip(&v).map(|(m, v)| m * m + v).product();
    let tail_var: Vec<f64> = tail.iter().map(|e| e * e / 12.0).collect();
    let variance = prod_second - prod_m2 + tail_var.iter().sum::<f64>();
    let mut first = Vec::with_capacity(a.len() + tail.len());
    let mut total = Vec::with_capacity(a.len() + tail.len());
    for i in 0..a.len() {
        let others = |f: &dyn Fn(usize) -> f64| (0..a.len()).filter(|&j| j != i).map(f).product::<f64>();
        first.push(v[i] * others(&|j| m[j] * m[j]) / variance);
        total.push(v[i] * others(&|j| m[j] * m[j] + v[j]) / variance);
    }
    for tv in tail_var {
        first.push(tv / variance);
        total.push(tv / variance);
    }
    AnalyticIndices {
        first_order: first,
        total_order: total,
        variance,
    }
}

impl Model for BuiltinModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        match &self.form {
            ModelForm::GProduct { a, tail, .. } => a.len() + tail.len(),
            ModelForm::Linear { coeffs, .. } => coeffs.len(),
            ModelForm::Product2 => 2,
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        match &self.form {
            ModelForm::GProduct { a, c, tail } => {
                let (head, rest) = x.split_at(a.len());
                let g: f64 = head
                    .iter()
                    .zip(a.iter().zip(c))
                    .map(|(&x, (&a, &c))| gfactor(x, a, c))
                    .product();
                g + rest.iter().zip(tail).map(|(x, e)| x * e).sum::<f64>()
            }
            ModelForm::Linear { coeffs, intercept } => {
                intercept + x.iter().zip(coeffs).map(|(x, b)| x * b).sum::<f64>()
            }
            ModelForm::Product2 => x[0] * x[1],
        }
    }
}

/// Ids accepted by [`builtin`].
pub const BUILTIN_IDS: &[&str] = &[
    "mod-g-19-9-4",
    "mod-g-lin-eps0.10",
    "mod-g-10-10-4",
    "g-sobol-d10-a0",
    "g-sobol-d2-a0",
    "additive-d3",
    "product-d2",
];

/// Look up a registered model, or one of the parametric families
/// `two-part-a{α}-d{d}`, `g-sobol-d{d}-a{a}`, `additive-d{d}`.
pub fn builtin(id: &str) -> Result<BuiltinModel> {
    let m = match id {
        "mod-g-19-9-4" => BuiltinModel::modified_g(vec![19.0, 9.0, 4.0])?,
        "mod-g-lin-eps0.10" => BuiltinModel::modified_g_linear(vec![19.0, 9.0, 4.0], 0.10, 7)?,
        "mod-g-10-10-4" => BuiltinModel::modified_g_linear(vec![10.0, 10.0, 4.0], 0.10, 7)?,
        "product-d2" => BuiltinModel::product2(),
        _ => return parametric(id),
    };
    Ok(m.with_id(id))
}

fn parametric(id: &str) -> Result<BuiltinModel> {
    let unknown = || Error::Config(format!("unknown model id {id:?}"));
    let num = |s: &str| s.parse::<f64>().map_err(|_| unknown());
    let count = |s: &str| s.parse::<usize>().ok().filter(|d| *d >= 1).ok_or_else(unknown);
    if let Some(rest) = id.strip_prefix("two-part-a") {
        let (alpha, d) = rest.split_once("-d").ok_or_else(unknown)?;
        return Ok(BuiltinModel::two_part(num(alpha)?, count(d)?)?.with_id(id));
    }
    if let Some(rest) = id.strip_prefix("g-sobol-d") {
        let (d, a) = rest.split_once("-a").ok_or_else(unknown)?;
        return Ok(BuiltinModel::g_sobol(vec![num(a)?; count(d)?])?.with_id(id));
    }
    if let Some(d) = id.strip_prefix("additive-d") {
        return Ok(BuiltinModel::linear(id, vec![1.0; count(d)?], 0.0));
    }
    Err(unknown())
}

/// Monte Carlo indices with standard errors, from i.i.d. (non-LHD) sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForceIndices {
    pub first_order: Vec<MonteCarloValue>,
    pub total_order: Vec<MonteCarloValue>,
    pub variance: f64,
}

impl BruteForceIndices {
    pub fn first_values(&self) -> Vec<f64> {
        self.first_order.iter().map(|v| v.value).collect()
    }

    pub fn total_values(&self) -> Vec<f64> {
        self.total_order.iter().map(|v| v.value).collect()
    }
}

/// Two-matrix pick-freeze estimates of every first-order and total index.
pub fn brute_force_indices(model: &dyn Model, n_mc: usize, seed: u64) -> Result<BruteForceIndices> {
    let d = model.dim();
    let singletons: Vec<Vec<usize>> = (0..d).map(|i| vec![i]).collect();
    let pf = pick_freeze(model, &singletons, n_mc, seed)?;
    Ok(BruteForceIndices {
        first_order: pf.closed,
        total_order: pf.total,
        variance: pf.variance,
    })
}

//! Marginal input laws and the inverse-CDF map from the unit hypercube to
//! physical input space.

use serde::{Deserialize, Serialize};

use crate::designs::{DesignMatrix, Space};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Uniform,
    Normal,
    /// `ln X` uniform on `[params[0], params[1]]`.
    LogUniform,
    /// `ln X` normal with mean `params[0]` and standard deviation `params[1]`.
    LogNormal,
}

/// A validated one-dimensional input law, optionally truncated to
/// `[lower, upper]` in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarginalRecord", into = "MarginalRecord")]
pub struct MarginalDistribution {
    kind: DistributionKind,
    params: [f64; 2],
    truncation: Option<(f64, f64)>,
    // CDF values at the truncation bounds, cached at construction.
    mass: (f64, f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MarginalRecord {
    kind: DistributionKind,
    params: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truncation: Option<[f64; 2]>,
}

impl TryFrom<MarginalRecord> for MarginalDistribution {
    type Error = Error;

    fn try_from(r: MarginalRecord) -> Result<Self> {
        let dist = MarginalDistribution::new(r.kind, r.params[0], r.params[1])?;
        match r.truncation {
            Some([lo, hi]) => dist.truncated(lo, hi),
            None => Ok(dist),
        }
    }
}

impl From<MarginalDistribution> for MarginalRecord {
    fn from(d: MarginalDistribution) -> Self {
        MarginalRecord {
            kind: d.kind,
            params: d.params,
            truncation: d.truncation.map(|(lo, hi)| [lo, hi]),
        }
    }
}

impl MarginalDistribution {
    pub fn new(kind: DistributionKind, p0: f64, p1: f64) -> Result<Self> {
        if !p0.is_finite() || !p1.is_finite() {
            return Err(Error::Config(format!("non-finite parameters ({p0}, {p1})")));
        }
        match kind {
            DistributionKind::Uniform | DistributionKind::LogUniform if p0 >= p1 => {
                return Err(Error::Config(format!(
                    "{kind:?} needs lower < upper, got ({p0}, {p1})"
                )))
            }
            DistributionKind::Normal | DistributionKind::LogNormal if p1 <= 0.0 => {
                return Err(Error::Config(format!(
                    "{kind:?} needs a positive standard deviation, got {p1}"
                )))
            }
            _ => {}
        }
        Ok(MarginalDistribution {
            kind,
            params: [p0, p1],
            truncation: None,
            mass: (0.0, 1.0),
        })
    }

    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        Self::new(DistributionKind::Uniform, lower, upper)
    }

    pub fn normal(mean: f64, std: f64) -> Result<Self> {
        Self::new(DistributionKind::Normal, mean, std)
    }

    pub fn log_uniform(ln_lower: f64, ln_upper: f64) -> Result<Self> {
        Self::new(DistributionKind::LogUniform, ln_lower, ln_upper)
    }

    pub fn log_normal(ln_mean: f64, ln_std: f64) -> Result<Self> {
        Self::new(DistributionKind::LogNormal, ln_mean, ln_std)
    }

    /// Restrict to `[lower, upper]`; the bounds must enclose positive mass.
    pub fn truncated(mut self, lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) {
            return Err(Error::Config(format!(
                "truncation needs lower < upper, got ({lower}, {upper})"
            )));
        }
        let (fa, fb) = (self.base_cdf(lower), self.base_cdf(upper));
        if !(fb - fa > 0.0) {
            return Err(Error::Config(format!(
                "truncation [{lower}, {upper}] holds no probability mass"
            )));
        }
        self.truncation = Some((lower, upper));
        self.mass = (fa, fb);
        Ok(self)
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn params(&self) -> [f64; 2] {
        self.params
    }

    pub fn truncation(&self) -> Option<(f64, f64)> {
        self.truncation
    }

    fn base_cdf(&self, x: f64) -> f64 {
        let [p0, p1] = self.params;
        match self.kind {
            DistributionKind::Uniform => ((x - p0) / (p1 - p0)).clamp(0.0, 1.0),
            DistributionKind::Normal => standard_normal_cdf((x - p0) / p1),
            DistributionKind::LogUniform if x <= 0.0 => 0.0,
            DistributionKind::LogUniform => ((x.ln() - p0) / (p1 - p0)).clamp(0.0, 1.0),
            DistributionKind::LogNormal if x <= 0.0 => 0.0,
            DistributionKind::LogNormal => standard_normal_cdf((x.ln() - p0) / p1),
        }
    }

    fn base_quantile(&self, u: f64) -> f64 {
        let [p0, p1] = self.params;
        match self.kind {
            DistributionKind::Uniform => p0 + u * (p1 - p0),
            DistributionKind::Normal => p0 + p1 * standard_normal_quantile(u),
            DistributionKind::LogUniform => (p0 + u * (p1 - p0)).exp(),
            DistributionKind::LogNormal => (p0 + p1 * standard_normal_quantile(u)).exp(),
        }
    }

    /// Cumulative distribution function of the (possibly truncated) law.
    pub fn cdf(&self, x: f64) -> f64 {
        match self.truncation {
            None => self.base_cdf(x),
            Some((lo, _)) if x <= lo => 0.0,
            Some((_, hi)) if x >= hi => 1.0,
            Some(_) => {
                let (fa, fb) = self.mass;
                ((self.base_cdf(x) - fa) / (fb - fa)).clamp(0.0, 1.0)
            }
        }
    }

    /// `F⁻¹(u)` for `u ∈ [0, 1)`.
    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&u) {
            return Err(Error::Domain(format!("quantile level {u} outside [0, 1)")));
        }
        Ok(match self.truncation {
            None => self.base_quantile(u),
            Some((lo, hi)) => {
                let (fa, fb) = self.mass;
                self.base_quantile(fa + u * (fb - fa)).clamp(lo, hi)
            }
        })
    }
}

/// Inverse-CDF transform of a unit-space design, column by column.
///
/// Everything except the points (identity, permutations, jitter, provenance)
/// is carried over unchanged.
pub fn transform_design(
    unit: &DesignMatrix,
    marginals: &[MarginalDistribution],
) -> Result<DesignMatrix> {
    if unit.space() != Space::Unit {
        return Err(Error::Config(format!(
            "design {} is already in physical space",
            unit.id()
        )));
    }
    if marginals.len() != unit.d() {
        return Err(Error::Config(format!(
            "design {} has {} columns but {} marginals were given",
            unit.id(),
            unit.d(),
            marginals.len()
        )));
    }
    let d = unit.d();
    let mut points = Vec::with_capacity(unit.points().len());
    for (idx, &u) in unit.points().iter().enumerate() {
        points.push(marginals[idx % d].inverse_cdf(u)?);
    }
    Ok(unit.with_physical_points(points))
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn standard_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile: Acklam's rational approximation followed by one
/// Newton step on the erfc-based CDF.
pub fn standard_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        // 1 - p is exact here, and the lower tail keeps the CDF accurate.
        return -standard_normal_quantile(1.0 - p);
    }
    let x = acklam(p);
    x - (standard_normal_cdf(x) - p) / standard_normal_pdf(x)
}

fn acklam(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: Simpson integration of the density, then bisection.
    fn simpson_normal_cdf(z: f64) -> f64 {
        let n = 20_000;
        let (a, b) = (0.0, z.abs());
        let h = (b - a) / n as f64;
        let mut s = standard_normal_pdf(a) + standard_normal_pdf(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * standard_normal_pdf(a + k as f64 * h);
        }
        let half = s * h / 3.0;
        if z >= 0.0 {
            0.5 + half
        } else {
            0.5 - half
        }
    }

    fn bisect_quantile(p: f64, cdf: impl Fn(f64) -> f64) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn erfc_cdf_matches_quadrature() {
        for z in [-3.5, -1.96, -0.3, 0.0, 0.7, 1.959964, 3.0] {
            assert!((standard_normal_cdf(z) - simpson_normal_cdf(z)).abs() < 1e-12, "z={z}");
        }
    }

    #[test]
    fn normal_975_quantile() {
        let oracle = bisect_quantile(0.975, simpson_normal_cdf);
        assert!((oracle - 1.959964).abs() < 1e-6);
        let n01 = MarginalDistribution::normal(0.0, 1.0).unwrap();
        let q = n01.inverse_cdf(0.975).unwrap();
        assert!((q - oracle).abs() < 1e-9, "{q} vs {oracle}");
        assert!((q - 1.959964).abs() < 1e-6);
    }

    #[test]
    fn quantile_accuracy_in_probability_space() {
        let mut p = 1e-12;
        while p < 1.0 {
            let x = standard_normal_quantile(p);
            assert!((standard_normal_cdf(x) - p).abs() <= 1e-12 * p.max(1e-3), "p={p}");
            p *= 1.7;
        }
    }

    #[test]
    fn uniform_examples() {
        let u01 = MarginalDistribution::uniform(0.0, 1.0).unwrap();
        assert_eq!(u01.inverse_cdf(0.4375).unwrap(), 0.4375);
        let u24 = MarginalDistribution::uniform(2.0, 4.0).unwrap();
        assert_eq!(u24.inverse_cdf(0.5).unwrap(), 3.0);
    }

    #[test]
    fn quartiles() {
        let n01 = MarginalDistribution::normal(0.0, 1.0).unwrap();
        let lo = bisect_quantile(0.25, simpson_normal_cdf);
        assert!((n01.inverse_cdf(0.25).unwrap() - lo).abs() < 1e-9);
        assert!((n01.inverse_cdf(0.25).unwrap() + 0.674490).abs() < 1e-6);
        assert!((n01.inverse_cdf(0.75).unwrap() - 0.674490).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_levels() {
        let n01 = MarginalDistribution::normal(0.0, 1.0).unwrap();
        for u in [f64::NAN, -0.1, 1.0, 1.5] {
            assert!(matches!(n01.inverse_cdf(u), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(MarginalDistribution::uniform(1.0, 1.0).is_err());
        assert!(MarginalDistribution::normal(0.0, 0.0).is_err());
        assert!(MarginalDistribution::log_uniform(2.0, 1.0).is_err());
        assert!(MarginalDistribution::log_normal(0.0, -1.0).is_err());
        // no mass between the bounds
        assert!(MarginalDistribution::uniform(0.0, 1.0).unwrap().truncated(2.0, 3.0).is_err());
        assert!(MarginalDistribution::log_normal(0.0, 1.0).unwrap().truncated(-2.0, -1.0).is_err());
    }

    #[test]
    fn round_trip_each_kind() {
        let laws = [
            MarginalDistribution::uniform(-2.0, 5.0).unwrap(),
            MarginalDistribution::normal(1.0, 0.08).unwrap(),
            MarginalDistribution::log_uniform(0.3f64.ln(), 3.0f64.ln()).unwrap(),
            MarginalDistribution::log_normal(0.1, 0.4).unwrap(),
            MarginalDistribution::normal(1.0, 0.1).unwrap().truncated(0.85, 1.15).unwrap(),
            MarginalDistribution::log_normal(0.0, 0.5).unwrap().truncated(0.5, 2.0).unwrap(),
        ];
        for law in &laws {
            for k in 1..400 {
                let u = 1e-3 + (1.0 - 2e-3) * k as f64 / 400.0;
                let x = law.inverse_cdf(u).unwrap();
                let back = law.inverse_cdf(law.cdf(x)).unwrap();
                assert!((back - x).abs() <= 1e-10 * x.abs().max(1e-300), "{law:?} u={u}");
            }
        }
    }

    #[test]
    fn truncated_outputs_stay_inside() {
        let law = MarginalDistribution::normal(0.0, 1.0).unwrap().truncated(-0.5, 2.0).unwrap();
        for k in 0..1000 {
            let x = law.inverse_cdf(k as f64 / 1000.0).unwrap();
            assert!((-0.5..=2.0).contains(&x));
        }
    }

    #[test]
    fn json_shape() {
        let law: MarginalDistribution = serde_json::from_str(
            r#"{"kind":"normal","params":[1.0,0.05],"truncation":[0.92,1.08]}"#,
        )
        .unwrap();
        assert_eq!(law.truncation(), Some((0.92, 1.08)));
        let bad = serde_json::from_str::<MarginalDistribution>(r#"{"kind":"uniform","params":[1,0]}"#);
        assert!(bad.is_err());
    }
}

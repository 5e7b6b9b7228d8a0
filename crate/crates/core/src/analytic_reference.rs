//! Brute-force Monte Carlo references for closed, interaction and total
//! indices, using plain i.i.d. sampling (no Latin hypercubes) so they are
//! independent of the design machinery they are used to check.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng;

/// Number of independent sub-runs used for standard errors.
const BATCHES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloValue {
    pub value: f64,
    pub std_error: f64,
}

/// A non-empty sorted set of 0-based input indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn new(mut u: Vec<usize>, d: usize) -> Result<Self> {
        u.sort_unstable();
        u.dedup();
        if u.is_empty() || u.iter().any(|&i| i >= d) {
            return Err(Error::Domain(format!("{u:?} is not a non-empty subset of 0..{d}")));
        }
        Ok(IndexSet(u))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Closed and total indices of several input subsets from one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickFreeze {
    /// `V[E(Y | X_u)] / V[Y]` per subset.
    pub closed: Vec<MonteCarloValue>,
    /// `1 − V[E(Y | X_{−u})] / V[Y]` per subset.
    pub total: Vec<MonteCarloValue>,
    pub variance: f64,
    /// Closed-index values of each independent sub-run, for standard errors
    /// of combinations.
    #[serde(skip)]
    pub batch_closed: Vec<Vec<f64>>,
}

fn std_error(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

#[derive(Clone, Default)]
struct Sums {
    count: f64,
    sum: f64,
    sum_sq: f64,
    closed: Vec<f64>,
    // Σ (f_C − f_A), to centre f_B in the closed-index sum
    shift: Vec<f64>,
    total: Vec<f64>,
}

impl Sums {
    fn finish(&self) -> (f64, Vec<f64>, Vec<f64>) {
        let mean = self.sum / self.count;
        let var = self.sum_sq / self.count - mean * mean;
        let half = self.count / 2.0;
        (
            var,
            self.closed
                .iter()
                .zip(&self.shift)
                .map(|(c, s)| (c - mean * s) / half / var)
                .collect(),
            self.total.iter().map(|t| t / half / (2.0 * var)).collect(),
        )
    }

    fn add(&mut self, other: &Sums) {
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        for (a, b) in self.closed.iter_mut().zip(&other.closed) {
            *a += b;
        }
        for (a, b) in self.shift.iter_mut().zip(&other.shift) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
    }
}

/// Two independent samples `A`, `B`; for each subset `u`, `C_u` takes the
/// columns in `u` from `B` and the rest from `A`. Closed index:
/// `mean((f_B − f̄) (f_{C_u} − f_A)) / D`; total index: `mean((f_A − f_{C_u})²) / (2D)`.
pub fn pick_freeze(model: &dyn Model, subsets: &[Vec<usize>], n_mc: usize, seed: u64) -> Result<PickFreeze> {
    let d = model.dim();
    if n_mc < BATCHES * 2 {
        return Err(Error::Domain(format!("n_mc = {n_mc} is too small")));
    }
    for u in subsets {
        IndexSet::new(u.clone(), d)?;
    }
    let per = n_mc / BATCHES;
    let parts: Vec<Sums> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut s = rng::substream(seed, &format!("pick-freeze/{b}"));
            let mut acc = Sums {
                closed: vec![0.0; subsets.len()],
                shift: vec![0.0; subsets.len()],
                total: vec![0.0; subsets.len()],
                ..Default::default()
            };
            let mut a = vec![0.0; d];
            let mut bb = vec![0.0; d];
            let mut c = vec![0.0; d];
            for _ in 0..per {
                a.iter_mut().for_each(|v| *v = s.random());
                bb.iter_mut().for_each(|v| *v = s.random());
                let fa = model.eval(&a);
                let fb = model.eval(&bb);
                acc.count += 2.0;
                acc.sum += fa + fb;
                acc.sum_sq += fa * fa + fb * fb;
                for (k, u) in subsets.iter().enumerate() {
                    c.copy_from_slice(&a);
                    for &i in u {
                        c[i] = bb[i];
                    }
                    let fc = model.eval(&c);
                    acc.closed[k] += fb * (fc - fa);
                    acc.shift[k] += fc - fa;
                    acc.total[k] += (fa - fc) * (fa - fc);
                }
            }
            acc
        })
        .collect();

    let mut all = Sums {
        closed: vec![0.0; subsets.len()],
        shift: vec![0.0; subsets.len()],
        total: vec![0.0; subsets.len()],
        ..Default::default()
    };
    parts.iter().for_each(|p| all.add(p));
    let (variance, closed, total) = all.finish();
    if !(variance > 0.0) {
        return Err(Error::DegenerateModel);
    }
    let finished: Vec<_> = parts.iter().map(Sums::finish).collect();
    let pack = |values: &[f64], pick: fn(&(f64, Vec<f64>, Vec<f64>), usize) -> f64| {
        values
            .iter()
            .enumerate()
            .map(|(k, &value)| MonteCarloValue {
                value,
                std_error: std_error(&finished.iter().map(|f| pick(f, k)).collect::<Vec<_>>()),
            })
            .collect()
    };
    Ok(PickFreeze {
        closed: pack(&closed, |f, k| f.1[k]),
        total: pack(&total, |f, k| f.2[k]),
        variance,
        batch_closed: finished.iter().map(|f| f.1.clone()).collect(),
    })
}

/// `V[E(Y | X_u)] / V[Y]` for `|u| ≤ 3`.
pub fn closed_index_bruteforce(model: &dyn Model, u: &IndexSet, n_mc: usize, seed: u64) -> Result<MonteCarloValue> {
    if u.len() > 3 {
        return Err(Error::Unsupported(format!("closed index of {} inputs (at most 3)", u.len())));
    }
    Ok(pick_freeze(model, &[u.indices().to_vec()], n_mc, seed)?.closed[0])
}

/// Pairwise interaction index `S_u − S_i − S_j` for `u = {i, j}`.
///
/// All three closed indices come from the same sample.
pub fn interaction_index_bruteforce(model: &dyn Model, u: &IndexSet, n_mc: usize, seed: u64) -> Result<MonteCarloValue> {
    if u.len() != 2 {
        return Err(Error::Unsupported(format!("interaction index of {} inputs (exactly 2)", u.len())));
    }
    let (i, j) = (u.indices()[0], u.indices()[1]);
    let pf = pick_freeze(model, &[vec![i, j], vec![i], vec![j]], n_mc, seed)?;
    let combo = |c: &[f64]| c[0] - c[1] - c[2];
    let per_batch: Vec<f64> = pf.batch_closed.iter().map(|c| combo(c)).collect();
    let values: Vec<f64> = pf.closed.iter().map(|v| v.value).collect();
    Ok(MonteCarloValue {
        value: combo(&values),
        std_error: std_error(&per_batch),
    })
}

//! Randomized replicated Latin Hypercube designs.
//!
//! A design column is a permutation of stratum levels `1..=N`; the point in row
//! `k` of column `i` is `(π_i(k) − 0.5 + U[i][π_i(k)]) / N` where the jitter `U`
//! is indexed by *level*, not by row. Every member of an [`RlhdFamily`] shares
//! one [`JitterArray`], so any two members' columns hold bit-identical values in
//! a different row order. That is what lets outputs be reordered instead of
//! re-simulated.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// A bijection on `{1, …, N}`, stored by its images `π(1), …, π(N)`.
///
/// Serialized as a 0-based array.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    images: Vec<usize>,
}

impl fmt::Debug for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Permutation{:?}", self.images)
    }
}

impl Permutation {
    /// Build from 1-based images.
    pub fn new(images: Vec<usize>) -> Result<Self> {
        let n = images.len();
        if n == 0 {
            return Err(Error::Domain("empty permutation".into()));
        }
        let mut seen = vec![false; n];
        for &v in &images {
            if v == 0 || v > n || std::mem::replace(&mut seen[v - 1], true) {
                return Err(Error::Domain(format!(
                    "{images:?} is not a permutation of 1..={n}"
                )));
            }
        }
        Ok(Permutation { images })
    }

    pub fn from_zero_based(images: Vec<usize>) -> Result<Self> {
        Self::new(images.into_iter().map(|v| v + 1).collect())
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            images: (1..=n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `π(k)` for 1-based `k`.
    pub fn image(&self, k: usize) -> usize {
        self.images[k - 1]
    }

    /// The 1-based images in row order.
    pub fn images(&self) -> &[usize] {
        &self.images
    }

    pub fn zero_based(&self) -> Vec<usize> {
        self.images.iter().map(|v| v - 1).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.images.iter().enumerate().all(|(k, &v)| v == k + 1)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (k, &v) in self.images.iter().enumerate() {
            inv[v - 1] = k + 1;
        }
        Permutation { images: inv }
    }

    /// `(self ∘ other)(k) = self(other(k))`.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Domain(format!(
                "cannot compose permutations of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Permutation {
            images: other.images.iter().map(|&k| self.images[k - 1]).collect(),
        })
    }

    /// Row reordering: `out[k] = rows[π(k)]` (1-based), i.e. row `k` of the
    /// result is row `π(k)` of the source.
    pub fn apply_rows<T: Clone>(&self, rows: &[T]) -> Result<Vec<T>> {
        if rows.len() != self.len() {
            return Err(Error::Domain(format!(
                "permutation of length {} applied to {} rows",
                self.len(),
                rows.len()
            )));
        }
        Ok(self.images.iter().map(|&k| rows[k - 1].clone()).collect())
    }
}

impl Serialize for Permutation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.zero_based().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Permutation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<usize>::deserialize(d)?;
        Permutation::from_zero_based(raw).map_err(serde::de::Error::custom)
    }
}

/// Uniformly random permutation of `1..=n` (Fisher–Yates).
pub fn sample_permutation(n: usize, rng: &mut impl Rng) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::Domain("cannot sample a permutation of size 0".into()));
    }
    let mut images: Vec<usize> = (1..=n).collect();
    images.shuffle(rng);
    Ok(Permutation { images })
}

/// The row reordering `p` with `source[p(k)] = target[k]` for every row `k`.
///
/// Applying `p` to the rows of a design whose column has levels `source`
/// yields a design whose column has levels `target`.
pub fn match_permutation(target: &Permutation, source: &Permutation) -> Result<Permutation> {
    if target.len() != source.len() {
        return Err(Error::Domain(format!(
            "cannot match permutations of lengths {} and {}",
            target.len(),
            source.len()
        )));
    }
    source.inverse().compose(target)
}

/// Shared jitter `U[i][ℓ]`, i.i.d. uniform on the open interval (−1/2, 1/2),
/// one value per (column, stratum level).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JitterRecord", into = "JitterRecord")]
pub struct JitterArray {
    n: usize,
    d: usize,
    // column-major: values[i * n + (level - 1)]
    values: Vec<f64>,
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct JitterRecord {
    n: usize,
    d: usize,
    #[serde(default)]
    seed: Option<u64>,
    /// One array per column, indexed by 0-based stratum level.
    columns: Vec<Vec<f64>>,
}

impl TryFrom<JitterRecord> for JitterArray {
    type Error = Error;

    fn try_from(r: JitterRecord) -> Result<Self> {
        let mut j = JitterArray::from_columns(r.columns)?;
        if j.n != r.n || j.d != r.d {
            return Err(Error::Config(format!(
                "jitter declares {}x{} but holds {}x{}",
                r.n, r.d, j.n, j.d
            )));
        }
        j.seed = r.seed;
        Ok(j)
    }
}

impl From<JitterArray> for JitterRecord {
    fn from(j: JitterArray) -> Self {
        JitterRecord {
            n: j.n,
            d: j.d,
            seed: j.seed,
            columns: j.values.chunks(j.n).map(<[f64]>::to_vec).collect(),
        }
    }
}

impl JitterArray {
    pub fn sample(n: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Domain(format!("jitter dimensions {n}x{d}")));
        }
        let values = (0..n * d)
            .map(|_| loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break u - 0.5;
                }
            })
            .collect();
        Ok(JitterArray {
            n,
            d,
            values,
            seed: None,
        })
    }

    /// Jitter drawn from the `"jitter"` substream of `seed`.
    pub fn seeded(n: usize, d: usize, seed: u64) -> Result<Self> {
        let mut j = Self::sample(n, d, &mut rng::substream(seed, "jitter"))?;
        j.seed = Some(seed);
        Ok(j)
    }

    /// Explicit jitter, one vector per column indexed by 0-based level.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let d = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if n == 0 || columns.iter().any(|c| c.len() != n) {
            return Err(Error::Config("jitter columns must be non-empty and of equal length".into()));
        }
        let values: Vec<f64> = columns.into_iter().flatten().collect();
        if let Some(bad) = values.iter().find(|u| !(-0.5 < **u && **u < 0.5)) {
            return Err(Error::Domain(format!("jitter value {bad} outside (-1/2, 1/2)")));
        }
        Ok(JitterArray {
            n,
            d,
            values,
            seed: None,
        })
    }

    /// All-zero jitter: every point sits at its stratum midpoint.
    pub fn centered(n: usize, d: usize) -> Self {
        JitterArray {
            n,
            d,
            values: vec![0.0; n * d],
            seed: None,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `U[column][level]` with a 1-based level.
    pub fn get(&self, column: usize, level: usize) -> f64 {
        self.values[column * self.n + level - 1]
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.n as u64).to_le_bytes());
        h.update((self.d as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
    }
}

/// Point in stratum `level` of `n`, kept inside `[(level-1)/n, level/n)` even
/// when rounding would land on the boundary.
fn stratum_point(level: usize, u: f64, n: usize) -> f64 {
    let nf = n as f64;
    let v = (level as f64 - 0.5 + u) / nf;
    let lo = (level - 1) as f64 / nf;
    let hi = level as f64 / nf;
    if v >= hi {
        hi.next_down()
    } else if v < lo {
        lo
    } else {
        v
    }
}

/// 1-based stratum containing `v` among `n` equal strata of `[0, 1)`.
pub fn stratum_of(v: f64, n: usize) -> Option<usize> {
    if !(0.0..1.0).contains(&v) {
        return None;
    }
    let nf = n as f64;
    let mut s = ((v * nf).floor() as usize).min(n - 1);
    while s > 0 && v < s as f64 / nf {
        s -= 1;
    }
    while s + 1 < n && v >= (s + 1) as f64 / nf {
        s += 1;
    }
    Some(s + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Unit,
    Physical,
}

/// How a design came to be.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Column permutations drawn from a labeled substream.
    Sampled { stream: String },
    /// Column permutations supplied by the caller.
    Injected,
    /// Rows of `parent` reordered: row `k` is parent row `rows(k)`.
    /// Outputs are obtained by reordering the parent's outputs.
    Reordered { parent: String, rows: Permutation },
    /// The `Z_i` design: `W₋ᵢ` except column `index`, which gets a fresh
    /// permutation. `rows` reorders the rows of `parent` into `W₋ᵢ`.
    Replicate {
        index: usize,
        parent: String,
        rows: Permutation,
        stream: Option<String>,
    },
}

/// An `N × d` design with its construction record.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    id: String,
    family: String,
    space: Space,
    n: usize,
    d: usize,
    // row-major
    points: Vec<f64>,
    column_perms: Vec<Permutation>,
    jitter: Arc<JitterArray>,
    provenance: Provenance,
}

impl PartialEq for DesignMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.family == other.family
            && self.space == other.space
            && self.column_perms == other.column_perms
            && self.provenance == other.provenance
            && self.points.len() == other.points.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Unit-space randomized LHD from `d` column permutations and shared jitter.
pub fn build_randomized_lhd(
    id: impl Into<String>,
    family: impl Into<String>,
    perms: Vec<Permutation>,
    jitter: Arc<JitterArray>,
    provenance: Provenance,
) -> Result<DesignMatrix> {
    let (n, d) = (jitter.n(), jitter.d());
    if perms.len() != d {
        return Err(Error::Config(format!(
            "{} column permutations for jitter with {d} columns",
            perms.len()
        )));
    }
    if let Some(p) = perms.iter().find(|p| p.len() != n) {
        return Err(Error::Config(format!(
            "permutation of length {} for jitter with {n} strata",
            p.len()
        )));
    }
    let mut points = Vec::with_capacity(n * d);
    for k in 1..=n {
        for (i, p) in perms.iter().enumerate() {
            let level = p.image(k);
            points.push(stratum_point(level, jitter.get(i, level), n));
        }
    }
    Ok(DesignMatrix {
        id: id.into(),
        family: family.into(),
        space: Space::Unit,
        n,
        d,
        points,
        column_perms: perms,
        jitter,
        provenance,
    })
}

impl DesignMatrix {
    pub fn id(&self) -> &str {
        &self.id
    }

    /// Fingerprint of the family this design belongs to.
    pub fn family(&self) -> &str {
        &self.family
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Row-major points.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.points[k * self.d..(k + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.d)
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows().map(|r| r[i]).collect()
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.points[row * self.d + col]
    }

    /// Stratum levels of column `i`, row by row.
    pub fn column_perm(&self, i: usize) -> &Permutation {
        &self.column_perms[i]
    }

    pub fn column_perms(&self) -> &[Permutation] {
        &self.column_perms
    }

    pub fn jitter(&self) -> &Arc<JitterArray> {
        &self.jitter
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Whether outputs for this design come from reordering a parent's.
    pub fn is_view(&self) -> bool {
        matches!(self.provenance, Provenance::Reordered { .. })
    }

    pub(crate) fn with_physical_points(&self, points: Vec<f64>) -> DesignMatrix {
        DesignMatrix {
            space: Space::Physical,
            points,
            ..self.clone()
        }
    }

    /// Row reordering `rows` of this design, recorded as a view on it.
    pub fn reordered(&self, rows: &Permutation, id: impl Into<String>) -> Result<DesignMatrix> {
        if rows.len() != self.n {
            return Err(Error::Domain(format!(
                "row permutation of length {} for a design of {} rows",
                rows.len(),
                self.n
            )));
        }
        let mut points = Vec::with_capacity(self.points.len());
        for &k in rows.images() {
            points.extend_from_slice(self.row(k - 1));
        }
        let column_perms = self
            .column_perms
            .iter()
            .map(|p| p.compose(rows))
            .collect::<Result<Vec<_>>>()?;
        Ok(DesignMatrix {
            id: id.into(),
            family: self.family.clone(),
            space: self.space,
            n: self.n,
            d: self.d,
            points,
            column_perms,
            jitter: Arc::clone(&self.jitter),
            provenance: Provenance::Reordered {
                parent: self.id.clone(),
                rows: rows.clone(),
            },
        })
    }

    /// One-point-per-stratum check for every column (unit space only).
    pub fn latin_columns(&self) -> Vec<bool> {
        (0..self.d)
            .map(|i| {
                let mut hit = vec![false; self.n];
                self.rows().all(|r| match stratum_of(r[i], self.n) {
                    Some(s) => !std::mem::replace(&mut hit[s - 1], true),
                    None => false,
                })
            })
            .collect()
    }
}

/// `W₋ᵢ`: the rows of `w` reordered so that column `i` coincides with
/// column `i` of `x`.
pub fn reorder_to_match(w: &DesignMatrix, x: &DesignMatrix, i: usize) -> Result<DesignMatrix> {
    if w.family != x.family {
        return Err(Error::Invariant(format!(
            "{} and {} belong to different design families",
            w.id, x.id
        )));
    }
    if i >= w.d {
        return Err(Error::Domain(format!("column {i} out of range for d = {}", w.d)));
    }
    let p = match_permutation(x.column_perm(i), w.column_perm(i))?;
    w.reordered(&p, format!("{}-{}", w.id, i + 1))
}

/// Per column: does some row permutation map `b`'s column onto `a`'s exactly?
pub fn is_replicated(a: &DesignMatrix, b: &DesignMatrix) -> Vec<bool> {
    if a.n != b.n || a.d != b.d {
        return vec![false; a.d];
    }
    (0..a.d)
        .map(|i| sorted_bits(&a.column(i)) == sorted_bits(&b.column(i)))
        .collect()
}

pub(crate) fn sorted_bits(values: &[f64]) -> Vec<u64> {
    let mut bits: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
    bits.sort_unstable();
    bits
}

/// The `N` outputs of one model run over one design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationBatch {
    pub design_id: String,
    pub model_id: String,
    pub outputs: Vec<f64>,
}

impl SimulationBatch {
    pub fn new(
        design_id: impl Into<String>,
        model_id: impl Into<String>,
        outputs: Vec<f64>,
    ) -> Result<Self> {
        if let Some(row) = outputs.iter().position(|y| !y.is_finite()) {
            return Err(Error::eval(Some(row), format!("non-finite output {}", outputs[row])));
        }
        Ok(SimulationBatch {
            design_id: design_id.into(),
            model_id: model_id.into(),
            outputs,
        })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn relabel(mut self, design_id: impl Into<String>) -> Self {
        self.design_id = design_id.into();
        self
    }
}

/// Outputs of a row-reordered design, obtained without evaluating anything:
/// output `k` of the result is parent output `p(k)`.
pub fn reorder_outputs(batch: &SimulationBatch, p: &Permutation) -> Result<SimulationBatch> {
    Ok(SimulationBatch {
        design_id: format!("{}[reordered]", batch.design_id),
        model_id: batch.model_id.clone(),
        outputs: p.apply_rows(&batch.outputs)?,
    })
}

/// `X`, `W` and any `Z_i` built from independent permutations over one shared
/// jitter array.
#[derive(Clone, Debug, PartialEq)]
pub struct RlhdFamily {
    fingerprint: String,
    seed: Option<u64>,
    jitter: Arc<JitterArray>,
    x: DesignMatrix,
    w: DesignMatrix,
    z: BTreeMap<usize, DesignMatrix>,
}

fn family_fingerprint(jitter: &JitterArray, x: &[Permutation], w: &[Permutation]) -> String {
    let mut h = Sha256::new();
    jitter.hash_into(&mut h);
    for p in x.iter().chain(w) {
        for &v in p.images() {
            h.update((v as u64).to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

fn z_stream(i: usize) -> String {
    format!("design/Z/{i}")
}

impl RlhdFamily {
    /// Fresh `X`, `W` pair: independent permutation sets, one shared jitter.
    pub fn generate(n: usize, d: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!("design size N = {n}; need N >= 2")));
        }
        if d == 0 {
            return Err(Error::Domain("input dimension d = 0".into()));
        }
        let jitter = JitterArray::seeded(n, d, seed)?;
        let draw = |label: &str| -> Result<Vec<Permutation>> {
            let mut s = rng::substream(seed, label);
            (0..d).map(|_| sample_permutation(n, &mut s)).collect()
        };
        let xp = draw("design/X")?;
        let wp = draw("design/W")?;
        let mut fam = Self::assemble(
            xp,
            wp,
            jitter,
            Provenance::Sampled {
                stream: "design/X".into(),
            },
            Provenance::Sampled {
                stream: "design/W".into(),
            },
        )?;
        fam.seed = Some(seed);
        Ok(fam)
    }

    /// Family from explicit permutations (e.g. a worked example).
    pub fn from_permutations(
        x_perms: Vec<Permutation>,
        w_perms: Vec<Permutation>,
        jitter: JitterArray,
    ) -> Result<Self> {
        Self::assemble(x_perms, w_perms, jitter, Provenance::Injected, Provenance::Injected)
    }

    fn assemble(
        xp: Vec<Permutation>,
        wp: Vec<Permutation>,
        jitter: JitterArray,
        x_prov: Provenance,
        w_prov: Provenance,
    ) -> Result<Self> {
        let fingerprint = family_fingerprint(&jitter, &xp, &wp);
        let jitter = Arc::new(jitter);
        let x = build_randomized_lhd("X", &fingerprint, xp, Arc::clone(&jitter), x_prov)?;
        let w = build_randomized_lhd("W", &fingerprint, wp, Arc::clone(&jitter), w_prov)?;
        Ok(RlhdFamily {
            fingerprint,
            seed: jitter.seed(),
            jitter,
            x,
            w,
            z: BTreeMap::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.x.n
    }

    pub fn d(&self) -> usize {
        self.x.d
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn jitter(&self) -> &Arc<JitterArray> {
        &self.jitter
    }

    pub fn x(&self) -> &DesignMatrix {
        &self.x
    }

    pub fn w(&self) -> &DesignMatrix {
        &self.w
    }

    pub fn z(&self, i: usize) -> Option<&DesignMatrix> {
        self.z.get(&i)
    }

    pub fn z_designs(&self) -> impl Iterator<Item = (usize, &DesignMatrix)> {
        self.z.iter().map(|(i, z)| (*i, z))
    }

    /// Base (evaluated) member by id.
    pub fn member(&self, id: &str) -> Option<&DesignMatrix> {
        match id {
            "X" => Some(&self.x),
            "W" => Some(&self.w),
            _ => self.z.values().find(|z| z.id == id),
        }
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.d() {
            return Err(Error::Domain(format!("input index {i} out of range for d = {}", self.d())));
        }
        Ok(())
    }

    /// Row reordering taking `W` to `W₋ᵢ`.
    pub fn w_to_x(&self, i: usize) -> Result<Permutation> {
        self.check_index(i)?;
        match_permutation(self.x.column_perm(i), self.w.column_perm(i))
    }

    pub fn w_minus(&self, i: usize) -> Result<DesignMatrix> {
        reorder_to_match(&self.w, &self.x, i)
    }

    fn require_z(&self, i: usize) -> Result<&DesignMatrix> {
        self.check_index(i)?;
        self.z
            .get(&i)
            .ok_or_else(|| Error::Precondition(format!("design Z{} has not been built", i + 1)))
    }

    /// Row reordering taking `X` (equally `W₋ᵢ`) onto `Z_i`'s column `i`.
    pub fn x_to_z(&self, i: usize) -> Result<Permutation> {
        let z = self.require_z(i)?;
        match_permutation(z.column_perm(i), self.x.column_perm(i))
    }

    /// Row reordering taking `Z_i` onto `X`'s column `i`.
    pub fn z_to_x(&self, i: usize) -> Result<Permutation> {
        let z = self.require_z(i)?;
        match_permutation(self.x.column_perm(i), z.column_perm(i))
    }

    /// Row reordering taking design `member` onto `X`'s column `j`.
    pub fn to_x(&self, member: &str, j: usize) -> Result<Permutation> {
        self.check_index(j)?;
        let m = self
            .member(member)
            .ok_or_else(|| Error::Invariant(format!("{member} is not a member of this family")))?;
        match_permutation(self.x.column_perm(j), m.column_perm(j))
    }

    /// `X̃`: rows of `X` reordered so column `i` matches `Z_i`.
    pub fn x_tilde(&self, i: usize) -> Result<DesignMatrix> {
        self.x.reordered(&self.x_to_z(i)?, format!("X~{}", i + 1))
    }

    /// `W̃₋ᵢ`: rows of `W₋ᵢ` reordered so column `i` matches `Z_i`.
    pub fn w_minus_tilde(&self, i: usize) -> Result<DesignMatrix> {
        let wm = self.w_minus(i)?;
        let z = self.require_z(i)?;
        let q = match_permutation(z.column_perm(i), wm.column_perm(i))?;
        wm.reordered(&q, format!("W-{}~", i + 1))
    }

    /// Register a `Z_i` built by [`make_z_design`].
    pub fn insert_z(&mut self, z: DesignMatrix) -> Result<()> {
        let index = match z.provenance {
            Provenance::Replicate { index, .. } => index,
            _ => return Err(Error::Invariant(format!("{} is not a Z design", z.id))),
        };
        self.check_index(index)?;
        if z.family != self.fingerprint {
            return Err(Error::Invariant(format!("{} belongs to another family", z.id)));
        }
        if self.z.contains_key(&index) {
            return Err(Error::Precondition(format!("Z{} already exists", index + 1)));
        }
        self.z.insert(index, z);
        Ok(())
    }

    /// `Z_i` from the family's own `"design/Z/i"` substream, built if absent.
    pub fn ensure_z(&mut self, i: usize) -> Result<&DesignMatrix> {
        if !self.z.contains_key(&i) {
            let seed = self.seed.ok_or_else(|| {
                Error::Precondition("family has no seed; inject Z permutations instead".into())
            })?;
            let z = make_z_design(self, i, &mut rng::substream(seed, &z_stream(i)))?;
            self.insert_z(z)?;
        }
        Ok(&self.z[&i])
    }
}

/// `Z_i`: `W₋ᵢ` with column `i` replaced by a fresh permutation over the
/// family's shared jitter.
pub fn make_z_design(family: &RlhdFamily, i: usize, stream: &mut Stream) -> Result<DesignMatrix> {
    family.check_index(i)?;
    let fresh = sample_permutation(family.n(), stream)?;
    build_z(family, i, fresh, Some(z_stream(i)))
}

/// `Z_i` with an injected column-`i` permutation.
pub fn make_z_design_with(
    family: &RlhdFamily,
    i: usize,
    column_perm: Permutation,
) -> Result<DesignMatrix> {
    family.check_index(i)?;
    build_z(family, i, column_perm, None)
}

fn build_z(
    family: &RlhdFamily,
    i: usize,
    fresh: Permutation,
    stream: Option<String>,
) -> Result<DesignMatrix> {
    if fresh.len() != family.n() {
        return Err(Error::Config(format!(
            "Z permutation of length {} for N = {}",
            fresh.len(),
            family.n()
        )));
    }
    let rows = family.w_to_x(i)?;
    let wm = family.w.reordered(&rows, "W-")?;
    let mut perms = wm.column_perms;
    perms[i] = fresh;
    build_randomized_lhd(
        format!("Z{}", i + 1),
        &family.fingerprint,
        perms,
        Arc::clone(&family.jitter),
        Provenance::Replicate {
            index: i,
            parent: family.w.id.clone(),
            rows,
            stream,
        },
    )
}

#[derive(Serialize, Deserialize)]
struct DesignRecord {
    id: String,
    column_perms: Vec<Permutation>,
    provenance: Provenance,
}

impl From<&DesignMatrix> for DesignRecord {
    fn from(m: &DesignMatrix) -> Self {
        DesignRecord {
            id: m.id.clone(),
            column_perms: m.column_perms.clone(),
            provenance: m.provenance.clone(),
        }
    }
}

/// On-disk form of a family; permutations are 0-based (`base: 0`).
#[derive(Serialize, Deserialize)]
struct FamilyRecord {
    fingerprint: String,
    base: usize,
    seed: Option<u64>,
    jitter: JitterArray,
    x: DesignRecord,
    w: DesignRecord,
    z: Vec<DesignRecord>,
}

impl Serialize for RlhdFamily {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FamilyRecord {
            fingerprint: self.fingerprint.clone(),
            base: 0,
            seed: self.seed,
            jitter: (*self.jitter).clone(),
            x: (&self.x).into(),
            w: (&self.w).into(),
            z: self.z.values().map(DesignRecord::from).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RlhdFamily {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = FamilyRecord::deserialize(d)?;
        RlhdFamily::from_record(r).map_err(serde::de::Error::custom)
    }
}

impl RlhdFamily {
    /// Parse a serialized family, keeping the typed error when validation fails.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: FamilyRecord = serde_json::from_str(text)?;
        RlhdFamily::from_record(r)
    }

    fn from_record(r: FamilyRecord) -> Result<Self> {
        if r.base != 0 {
            return Err(Error::Config(format!("unsupported permutation base {}", r.base)));
        }
        let mut fam = Self::assemble(
            r.x.column_perms,
            r.w.column_perms,
            r.jitter,
            r.x.provenance,
            r.w.provenance,
        )?;
        if fam.fingerprint != r.fingerprint {
            return Err(Error::Invariant(format!(
                "family fingerprint {} does not match its contents ({})",
                r.fingerprint, fam.fingerprint
            )));
        }
        fam.seed = r.seed;
        for z in r.z {
            let m = build_randomized_lhd(
                z.id,
                &fam.fingerprint,
                z.column_perms,
                Arc::clone(&fam.jitter),
                z.provenance,
            )?;
            fam.insert_z(m)?;
        }
        Ok(fam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perm(v: &[usize]) -> Permutation {
        Permutation::new(v.to_vec()).unwrap()
    }

    #[test]
    fn permutation_basics() {
        let p = perm(&[2, 3, 1]);
        assert!(p.compose(&p.inverse()).unwrap().is_identity());
        assert!(p.inverse().compose(&p).unwrap().is_identity());
        assert!(Permutation::new(vec![1, 1]).is_err());
        assert!(Permutation::new(vec![0, 1]).is_err());
        assert!(Permutation::new(vec![]).is_err());
        assert_eq!(p.apply_rows(&['a', 'b', 'c']).unwrap(), vec!['b', 'c', 'a']);
    }

    #[test]
    fn permutation_serializes_zero_based() {
        let p = perm(&[2, 3, 1]);
        assert_eq!(serde_json::to_string(&p).unwrap(), "[1,2,0]");
        let back: Permutation = serde_json::from_str("[1,2,0]").unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<Permutation>("[1,1,0]").is_err());
    }

    #[test]
    fn sample_permutation_edge_cases() {
        let mut s = rng::substream(1, "t");
        assert_eq!(sample_permutation(1, &mut s).unwrap(), Permutation::identity(1));
        assert!(matches!(sample_permutation(0, &mut s), Err(Error::Domain(_))));
        let a = sample_permutation(8, &mut rng::substream(3, "t")).unwrap();
        let b = sample_permutation(8, &mut rng::substream(3, "t")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_position_is_uniform() {
        // chi-square over the value landing in position 1, 7 dof
        let mut s = rng::substream(11, "chi");
        let draws = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..draws {
            counts[sample_permutation(8, &mut s).unwrap().image(1) - 1] += 1;
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 0.999 quantile of chi-square with 7 dof is 24.32
        assert!(chi2 < 24.32, "chi2 = {chi2}");
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.125).abs() < 0.01);
        }
    }

    #[test]
    fn match_permutation_examples() {
        let t = perm(&[1, 3, 8, 4, 6, 2, 5, 7]);
        assert!(match_permutation(&t, &t).unwrap().is_identity());
        let s = perm(&[3, 1, 4, 5, 8, 2, 7, 6]);
        let p = match_permutation(&t, &s).unwrap();
        assert_eq!(p.apply_rows(s.images()).unwrap(), t.images());
        assert!(match_permutation(&t, &perm(&[1, 2])).is_err());
    }

    #[test]
    fn single_point_design() {
        let j = JitterArray::from_columns(vec![vec![0.25]]).unwrap();
        let m = build_randomized_lhd("X", "f", vec![perm(&[1])], Arc::new(j), Provenance::Injected)
            .unwrap();
        assert_eq!(m.points(), &[0.75]);
    }

    #[test]
    fn build_rejects_shape_mismatch() {
        let j = Arc::new(JitterArray::centered(4, 2));
        let r = build_randomized_lhd("X", "f", vec![Permutation::identity(4)], j.clone(), Provenance::Injected);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = build_randomized_lhd(
            "X",
            "f",
            vec![Permutation::identity(4), Permutation::identity(3)],
            j,
            Provenance::Injected,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn jitter_bounds_enforced() {
        assert!(JitterArray::from_columns(vec![vec![0.5]]).is_err());
        assert!(JitterArray::from_columns(vec![vec![-0.5]]).is_err());
        assert!(JitterArray::from_columns(vec![vec![0.1], vec![]]).is_err());
    }

    #[test]
    fn boundary_jitter_stays_in_stratum() {
        let u = 0.5f64.next_down();
        let j = JitterArray::from_columns(vec![vec![u; 1000], vec![-u; 1000]]).unwrap();
        let p = Permutation::identity(1000);
        let m = build_randomized_lhd("X", "f", vec![p.clone(), p], Arc::new(j), Provenance::Injected)
            .unwrap();
        assert!(m.latin_columns().iter().all(|&ok| ok));
    }

    #[test]
    fn large_designs_are_latin() {
        let fam = RlhdFamily::generate(1000, 5, 4).unwrap();
        assert!(fam.x().latin_columns().iter().all(|&ok| ok));
        assert!(fam.w().latin_columns().iter().all(|&ok| ok));
    }

    #[test]
    fn pair_is_deterministic_and_replicated() {
        let a = RlhdFamily::generate(256, 10, 99).unwrap();
        let b = RlhdFamily::generate(256, 10, 99).unwrap();
        assert_eq!(a, b);
        assert!(is_replicated(a.x(), a.w()).iter().all(|&r| r));
        assert_ne!(a.x().column_perm(0), a.w().column_perm(0));
        assert!(matches!(RlhdFamily::generate(1, 2, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn reorder_identity_when_columns_agree() {
        let j = JitterArray::centered(3, 2);
        let same = vec![perm(&[2, 1, 3]), perm(&[1, 3, 2])];
        let fam = RlhdFamily::from_permutations(same.clone(), vec![same[0].clone(), perm(&[3, 2, 1])], j)
            .unwrap();
        let wm = fam.w_minus(0).unwrap();
        assert_eq!(wm.points(), fam.w().points());
    }

    #[test]
    fn reorder_rejects_foreign_designs() {
        let a = RlhdFamily::generate(8, 2, 1).unwrap();
        let b = RlhdFamily::generate(8, 2, 2).unwrap();
        assert!(matches!(reorder_to_match(a.w(), b.x(), 0), Err(Error::Invariant(_))));
        assert!(matches!(a.w_minus(2), Err(Error::Domain(_))));
    }

    #[test]
    fn z_design_properties() {
        let mut fam = RlhdFamily::generate(64, 3, 5).unwrap();
        let z = fam.ensure_z(0).unwrap().clone();
        let wm = fam.w_minus(0).unwrap();
        for j in 1..3 {
            assert_eq!(z.column(j), wm.column(j));
        }
        assert!(is_replicated(fam.x(), &z).iter().all(|&r| r));
        assert!(is_replicated(fam.w(), &z).iter().all(|&r| r));
        assert!(matches!(fam.x_tilde(1), Err(Error::Precondition(_))));
        assert!(matches!(fam.ensure_z(3), Err(Error::Domain(_))));
        let xt = fam.x_tilde(0).unwrap();
        assert_eq!(xt.column(0), z.column(0));
        let wt = fam.w_minus_tilde(0).unwrap();
        assert_eq!(wt.column(0), z.column(0));
    }

    #[test]
    fn perturbed_column_breaks_replication() {
        let fam = RlhdFamily::generate(16, 2, 3).unwrap();
        let mut pts = fam.w().points().to_vec();
        pts[2 * 2 + 1] += 1e-12;
        let bad = fam.w().with_physical_points(pts);
        assert_eq!(is_replicated(fam.x(), &bad), vec![true, false]);
        assert_eq!(is_replicated(fam.x(), fam.x()), vec![true, true]);
    }

    #[test]
    fn reorder_outputs_small_cases() {
        let b = SimulationBatch::new("X", "m", vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reorder_outputs(&b, &Permutation::identity(3)).unwrap().outputs, b.outputs);
        assert_eq!(reorder_outputs(&b, &perm(&[3, 2, 1])).unwrap().outputs, vec![3.0, 2.0, 1.0]);
        assert!(reorder_outputs(&b, &perm(&[2, 1])).is_err());
        assert!(SimulationBatch::new("X", "m", vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn family_serde_round_trip() {
        let mut fam = RlhdFamily::generate(20, 3, 8).unwrap();
        fam.ensure_z(1).unwrap();
        let json = serde_json::to_string(&fam).unwrap();
        let back: RlhdFamily = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fam);
    }
}

//! Design files: one CSV per design (header = input names) plus a JSON sidecar
//! describing how the design was built. The shared jitter lives once per
//! directory in `jitter.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::designs::{
    build_randomized_lhd, DesignMatrix, JitterArray, Permutation, Provenance, RlhdFamily, Space,
};
use crate::error::{Error, Result};

pub const JITTER_FILE: &str = "jitter.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSidecar {
    pub id: String,
    pub family: String,
    pub space: Space,
    pub seed: Option<u64>,
    /// Index base of `column_perms` (always 0 on write).
    pub base: usize,
    pub column_perms: Vec<Permutation>,
    pub jitter_ref: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

impl DesignSidecar {
    pub fn describe(design: &DesignMatrix) -> Self {
        DesignSidecar {
            id: design.id().to_string(),
            family: design.family().to_string(),
            space: design.space(),
            seed: design.jitter().seed(),
            base: 0,
            column_perms: design.column_perms().to_vec(),
            jitter_ref: JITTER_FILE.to_string(),
            provenance: design.provenance().clone(),
        }
    }
}

/// Default column names `x1, …, xd`.
pub fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

pub fn write_design_csv(path: &Path, design: &DesignMatrix, names: &[String]) -> Result<()> {
    if names.len() != design.d() {
        return Err(Error::Config(format!(
            "{} column names for a design with d = {}",
            names.len(),
            design.d()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for row in design.rows() {
        w.write_record(row.iter().map(f64::to_string))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Header and row-major points of a design CSV.
pub fn read_design_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut points = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Config(format!("{}: row {} has non-numeric value {field:?}", path.display(), k + 1))
            })?;
            points.push(v);
        }
    }
    Ok((names, points))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Write `{id}.csv` and `{id}.json` for one design into `dir`.
pub fn export_design(dir: &Path, design: &DesignMatrix, names: &[String]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{}.csv", design.id()));
    write_design_csv(&csv_path, design, names)?;
    write_json(&dir.join(format!("{}.json", design.id())), &DesignSidecar::describe(design))?;
    Ok(csv_path)
}

/// Export every evaluated member of a family plus the shared jitter.
pub fn export_family(dir: &Path, family: &RlhdFamily, names: &[String]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(JITTER_FILE), family.jitter().as_ref())?;
    let mut written = vec![
        export_design(dir, family.x(), names)?,
        export_design(dir, family.w(), names)?,
    ];
    for (_, z) in family.z_designs() {
        written.push(export_design(dir, z, names)?);
    }
    Ok(written)
}

/// Rebuild one unit-space design from its sidecar and the directory's jitter,
/// checking the CSV agrees bit for bit.
pub fn import_design(dir: &Path, id: &str) -> Result<DesignMatrix> {
    let side: DesignSidecar = read_json(&dir.join(format!("{id}.json")))?;
    if side.base != 0 {
        return Err(Error::Config(format!("{id}: unsupported permutation base {}", side.base)));
    }
    if side.space != Space::Unit {
        return Err(Error::Unsupported(format!("{id}: only unit-space designs can be rebuilt")));
    }
    let jitter: JitterArray = read_json(&dir.join(&side.jitter_ref))?;
    let design = build_randomized_lhd(
        side.id,
        side.family,
        side.column_perms,
        Arc::new(jitter),
        side.provenance,
    )?;
    let (_, points) = read_design_csv(&dir.join(format!("{id}.csv")))?;
    let same = points.len() == design.points().len()
        && points
            .iter()
            .zip(design.points())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err(Error::Invariant(format!(
            "{id}.csv does not match the design described by {id}.json"
        )));
    }
    Ok(design)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut fam = RlhdFamily::generate(16, 3, 21).unwrap();
        fam.ensure_z(2).unwrap();
        let names = default_names(3);
        let files = export_family(dir.path(), &fam, &names).unwrap();
        assert_eq!(files.len(), 3);
        for id in ["X", "W", "Z3"] {
            let back = import_design(dir.path(), id).unwrap();
            assert_eq!(&back, fam.member(id).unwrap());
        }
        let (header, pts) = read_design_csv(&dir.path().join("X.csv")).unwrap();
        assert_eq!(header, names);
        assert_eq!(pts.len(), 48);
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("Z3.json")).unwrap()).unwrap();
        assert_eq!(side["base"], 0);
        assert_eq!(side["kind"], "replicate");
        assert_eq!(side["index"], 2);
    }

    #[test]
    fn tampered_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let fam = RlhdFamily::generate(4, 1, 2).unwrap();
        export_family(dir.path(), &fam, &default_names(1)).unwrap();
        let path = dir.path().join("X.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1] = "0.5";
        fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(import_design(dir.path(), "X"), Err(Error::Invariant(_))));
    }

    #[test]
    fn name_count_must_match() {
        let fam = RlhdFamily::generate(4, 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let r = write_design_csv(&dir.path().join("a.csv"), fam.x(), &default_names(3));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

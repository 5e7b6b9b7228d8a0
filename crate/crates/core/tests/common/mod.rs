#![allow(dead_code)]

use std::path::PathBuf;

use rlhd_core::designs::{make_z_design_with, DesignMatrix, JitterArray, Permutation, RlhdFamily};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// Jitter whose value encodes its own (column, level) label.
fn labelled_jitter(n: usize, d: usize) -> JitterArray {
    let scale = (d * n + 1) as f64;
    let cols = (0..d)
        .map(|c| (1..=n).map(|l| (c * n + l) as f64 / scale - 0.5).collect())
        .collect();
    JitterArray::from_columns(cols).unwrap()
}

/// Decode an entry into (stratum level, jitter column, jitter level).
fn decode(v: f64, n: usize, d: usize) -> (usize, usize, usize) {
    let t = v * n as f64;
    let level = t.floor() as usize + 1;
    let u = t - (level as f64 - 0.5);
    let label = ((u + 0.5) * (d * n + 1) as f64).round() as usize;
    (level, (label - 1) / n, (label - 1) % n + 1)
}

fn perms(v: &serde_json::Value) -> Vec<Permutation> {
    v.as_array()
        .unwrap()
        .iter()
        .map(perm)
        .collect()
}

fn perm(v: &serde_json::Value) -> Permutation {
    let images = v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap() as usize).collect();
    Permutation::new(images).unwrap()
}

/// Rebuild the worked example and compare every matrix against the fixture,
/// both the stratum level and the jitter label of each entry.
pub fn check_worked_example() -> Result<usize, String> {
    let text = std::fs::read_to_string(fixture("worked_example.json")).map_err(|e| e.to_string())?;
    let fx: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let n = fx["n"].as_u64().unwrap() as usize;
    let d = fx["d"].as_u64().unwrap() as usize;
    let mut fam = RlhdFamily::from_permutations(perms(&fx["x_perms"]), perms(&fx["w_perms"]), labelled_jitter(n, d))
        .map_err(|e| e.to_string())?;
    let z = make_z_design_with(&fam, 0, perm(&fx["z1_perm"])).map_err(|e| e.to_string())?;
    fam.insert_z(z).map_err(|e| e.to_string())?;

    let built: Vec<DesignMatrix> = vec![
        fam.x().clone(),
        fam.w().clone(),
        fam.w_minus(0).unwrap(),
        fam.w_minus(1).unwrap(),
        fam.z(0).unwrap().clone(),
        fam.x_tilde(0).unwrap(),
        fam.w_minus_tilde(0).unwrap(),
    ];
    let expected = fx["expected"].as_object().unwrap();
    let mut checked = 0;
    for m in &built {
        let rows = expected
            .get(m.id())
            .ok_or_else(|| format!("fixture has no matrix {}", m.id()))?
            .as_array()
            .unwrap();
        for (k, row) in rows.iter().enumerate() {
            for (c, want) in row.as_array().unwrap().iter().enumerate() {
                let want = want.as_u64().unwrap() as usize;
                let (level, jc, jl) = decode(m.value(k, c), n, d);
                if (level, jc, jl) != (want, c, want) {
                    return Err(format!(
                        "{} row {} col {}: level {level} with jitter U[{}][{jl}], expected level {want}",
                        m.id(),
                        k + 1,
                        c + 1,
                        jc + 1
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

//! Model evaluation: built-in models, an external command bridge, a result
//! cache keyed by design identity, and the evaluation budget ledger.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design_io::write_design_csv;
use crate::designs::{reorder_outputs, DesignMatrix, Provenance, SimulationBatch, Space};
use crate::distributions::{transform_design, MarginalDistribution};
use crate::error::{Error, Result};
use crate::models::{builtin, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub distribution: MarginalDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandSpec {
    /// Shell command with `{input}` and `{output}` placeholders.
    pub template: String,
    /// Working directory for the command and its files.
    #[serde(default)]
    pub workdir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelBinding {
    Builtin(String),
    Command(CommandSpec),
}

/// What to evaluate, over which inputs, at which design size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    /// Input names and laws. May be omitted for built-in models, which then
    /// get `x1..xd` uniform on [0, 1].
    #[serde(default)]
    pub inputs: Vec<InputSpec>,
    pub model: ModelBinding,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ProblemSpec {
    pub fn builtin(id: &str, n: usize, seed: u64) -> Self {
        ProblemSpec {
            inputs: Vec::new(),
            model: ModelBinding::Builtin(id.to_string()),
            n,
            seed,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ProblemSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Inputs with defaults filled in for built-in models.
    pub fn resolved_inputs(&self) -> Result<Vec<InputSpec>> {
        if !self.inputs.is_empty() {
            return Ok(self.inputs.clone());
        }
        match &self.model {
            ModelBinding::Builtin(id) => {
                let d = builtin(id)?.dim();
                Ok((1..=d)
                    .map(|i| InputSpec {
                        name: format!("x{i}"),
                        distribution: MarginalDistribution::uniform(0.0, 1.0)
                            .expect("unit interval is a valid law"),
                    })
                    .collect())
            }
            ModelBinding::Command(_) => Err(Error::Config(
                "a command-bound problem must list its inputs".into(),
            )),
        }
    }

    pub fn d(&self) -> Result<usize> {
        Ok(self.resolved_inputs()?.len())
    }

    pub fn names(&self) -> Result<Vec<String>> {
        Ok(self.resolved_inputs()?.into_iter().map(|i| i.name).collect())
    }

    pub fn model_id(&self) -> String {
        match &self.model {
            ModelBinding::Builtin(id) => id.clone(),
            ModelBinding::Command(c) => format!("command:{}", c.template),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("design size N = {}; need N >= 2", self.n)));
        }
        let inputs = self.resolved_inputs()?;
        if inputs.is_empty() {
            return Err(Error::Config("problem has no inputs".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = inputs.iter().find(|i| !seen.insert(i.name.as_str())) {
            return Err(Error::Config(format!("duplicate input name {:?}", dup.name)));
        }
        match &self.model {
            ModelBinding::Builtin(id) => {
                let d = builtin(id)?.dim();
                if d != inputs.len() {
                    return Err(Error::Config(format!(
                        "model {id} takes {d} inputs but {} are listed",
                        inputs.len()
                    )));
                }
            }
            ModelBinding::Command(c) => {
                if !c.template.contains("{input}") || !c.template.contains("{output}") {
                    return Err(Error::Config(
                        "command template needs {input} and {output} placeholders".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: usize,
    pub design_id: String,
    pub evaluations: usize,
    pub reason: String,
    /// Seconds since the Unix epoch, when stamping is enabled.
    #[serde(default)]
    pub timestamp: Option<u64>,
}

/// Record of every model evaluation charged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub entries: Vec<LedgerEntry>,
    pub total: usize,
}

impl BudgetLedger {
    pub fn charge(&mut self, design_id: &str, evaluations: usize, reason: &str, stamp: bool) {
        let timestamp = stamp.then(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
        self.entries.push(LedgerEntry {
            seq: self.entries.len(),
            design_id: design_id.to_string(),
            evaluations,
            reason: reason.to_string(),
            timestamp,
        });
        self.total += evaluations;
    }

    pub fn is_consistent(&self) -> bool {
        self.total == self.entries.iter().map(|e| e.evaluations).sum::<usize>()
    }
}

/// Evaluates designs for one problem, charging the ledger on cache misses.
pub struct Runner {
    spec: ProblemSpec,
    marginals: Vec<MarginalDistribution>,
    names: Vec<String>,
    model: Option<Arc<dyn Model>>,
    cache_dir: Option<PathBuf>,
    stamp: bool,
    memory: Mutex<HashMap<String, Vec<f64>>>,
    // (family, design id) -> cache key, for resolving row-reordered views
    keys: Mutex<HashMap<(String, String), String>>,
}

impl std::fmt::Debug for Runner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runner")
            .field("model", &self.spec.model_id())
            .field("cache_dir", &self.cache_dir)
            .finish()
    }
}

impl Runner {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        spec.validate()?;
        let model = match &spec.model {
            ModelBinding::Builtin(id) => Some(Arc::new(builtin(id)?) as Arc<dyn Model>),
            ModelBinding::Command(_) => None,
        };
        Self::build(spec, model)
    }

    /// Runner backed by an arbitrary in-process model (the problem's binding is
    /// used only for its id).
    pub fn with_model(spec: ProblemSpec, model: Arc<dyn Model>) -> Result<Self> {
        Self::build(spec, Some(model))
    }

    fn build(spec: ProblemSpec, model: Option<Arc<dyn Model>>) -> Result<Self> {
        let inputs = spec.resolved_inputs()?;
        if let Some(m) = &model {
            if m.dim() != inputs.len() {
                return Err(Error::Config(format!(
                    "model {} takes {} inputs but the problem has {}",
                    m.id(),
                    m.dim(),
                    inputs.len()
                )));
            }
        }
        Ok(Runner {
            marginals: inputs.iter().map(|i| i.distribution.clone()).collect(),
            names: inputs.into_iter().map(|i| i.name).collect(),
            spec,
            model,
            cache_dir: None,
            stamp: false,
            memory: Mutex::new(HashMap::new()),
            keys: Mutex::new(HashMap::new()),
        })
    }

    /// Persist evaluated batches under `dir` as `{key}.json`.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    /// Record wall-clock timestamps in ledger entries.
    pub fn with_timestamps(mut self, stamp: bool) -> Self {
        self.stamp = stamp;
        self
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Cache key of a base design under this problem's model binding.
    pub fn cache_key(&self, design: &DesignMatrix) -> Result<String> {
        let mut h = Sha256::new();
        h.update(design.family().as_bytes());
        h.update([0]);
        h.update(design.id().as_bytes());
        h.update([0]);
        for p in design.column_perms() {
            for &v in p.images() {
                h.update((v as u64).to_le_bytes());
            }
        }
        h.update(serde_json::to_vec(&self.spec.model)?);
        h.update(serde_json::to_vec(&self.marginals)?);
        Ok(hex::encode(h.finalize()))
    }

    fn lookup(&self, key: &str) -> Result<Option<Vec<f64>>> {
        if let Some(v) = self.memory.lock().expect("cache lock").get(key) {
            return Ok(Some(v.clone()));
        }
        let Some(dir) = &self.cache_dir else {
            return Ok(None);
        };
        let path = dir.join(format!("{key}.json"));
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let batch: SimulationBatch = serde_json::from_str(&text)?;
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), batch.outputs.clone());
        Ok(Some(batch.outputs))
    }

    fn store(&self, key: &str, batch: &SimulationBatch) -> Result<()> {
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), batch.outputs.clone());
        if let Some(dir) = &self.cache_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("{key}.json"));
            let tmp = dir.join(format!(".{key}.tmp"));
            fs::write(&tmp, serde_json::to_vec(batch)?).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Outputs for `design`. Base designs are evaluated (charging `N`) unless
    /// cached; row-reordered views are served from their parent's outputs
    /// and never charged.
    pub fn evaluate(
        &self,
        design: &DesignMatrix,
        ledger: &mut BudgetLedger,
        reason: &str,
    ) -> Result<SimulationBatch> {
        if design.space() != Space::Unit {
            return Err(Error::Config(format!(
                "design {} must be given in unit space; the runner applies the marginals",
                design.id()
            )));
        }
        let model_id = self.spec.model_id();
        if let Provenance::Reordered { parent, rows } = design.provenance() {
            let key = self
                .keys
                .lock()
                .expect("key lock")
                .get(&(design.family().to_string(), parent.clone()))
                .cloned()
                .ok_or_else(|| {
                    Error::Precondition(format!(
                        "parent {parent} of view {} has not been evaluated",
                        design.id()
                    ))
                })?;
            let outputs = self
                .lookup(&key)?
                .ok_or_else(|| Error::Precondition(format!("outputs of {parent} are not cached")))?;
            let parent_batch = SimulationBatch::new(parent.clone(), model_id, outputs)?;
            return Ok(reorder_outputs(&parent_batch, rows)?.relabel(design.id()));
        }

        let key = self.cache_key(design)?;
        self.keys
            .lock()
            .expect("key lock")
            .insert((design.family().to_string(), design.id().to_string()), key.clone());
        if let Some(outputs) = self.lookup(&key)? {
            return SimulationBatch::new(design.id(), model_id, outputs);
        }
        let physical = transform_design(design, &self.marginals)?;
        let outputs = match (&self.model, &self.spec.model) {
            (Some(m), _) => evaluate_rows(m.as_ref(), &physical)?,
            (None, ModelBinding::Command(c)) => {
                let workdir = c
                    .workdir
                    .clone()
                    .or_else(|| self.cache_dir.as_ref().map(|d| d.join("work")))
                    .unwrap_or_else(std::env::temp_dir);
                external_bridge(&c.template, &physical, &self.names, &workdir)?
            }
            (None, ModelBinding::Builtin(id)) => {
                return Err(Error::Config(format!("model {id} is not loaded")))
            }
        };
        let batch = SimulationBatch::new(design.id(), model_id, outputs)?;
        self.store(&key, &batch)?;
        ledger.charge(design.id(), design.n(), reason, self.stamp);
        Ok(batch)
    }
}

/// Evaluate every row of a design with an in-process model, in parallel.
pub fn evaluate_rows(model: &dyn Model, design: &DesignMatrix) -> Result<Vec<f64>> {
    let d = design.d();
    let out: Vec<f64> = design.points().par_chunks(d).map(|r| model.eval(r)).collect();
    if let Some(row) = out.iter().position(|y| !y.is_finite()) {
        return Err(Error::eval(Some(row), format!("model returned {}", out[row])));
    }
    Ok(out)
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

/// Run an external command once for a whole design.
///
/// The design is written to `{input}` as CSV with a header of input names;
/// the command must write one value per row to `{output}` (an optional
/// non-numeric header line is skipped; only the first field of each line is
/// read).
pub fn external_bridge(
    template: &str,
    design: &DesignMatrix,
    names: &[String],
    workdir: &Path,
) -> Result<Vec<f64>> {
    fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let input = workdir.join(format!("{}.in.csv", design.id()));
    let output = workdir.join(format!("{}.out.csv", design.id()));
    write_design_csv(&input, design, names)?;
    let _ = fs::remove_file(&output);
    let cmd = template
        .replace("{input}", &shell_quote(&input))
        .replace("{output}", &shell_quote(&output));
    let result = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .current_dir(workdir)
        .output()
        .map_err(|e| Error::io(workdir, e))?;
    if !result.status.success() {
        return Err(Error::eval(
            None,
            format!(
                "command exited with {}: {}",
                result.status,
                String::from_utf8_lossy(&result.stderr).trim()
            ),
        ));
    }
    let text = fs::read_to_string(&output).map_err(|e| Error::io(&output, e))?;
    parse_outputs(&text, design.n())
}

fn parse_outputs(text: &str, expected: usize) -> Result<Vec<f64>> {
    let mut values = Vec::with_capacity(expected);
    for (k, line) in text.lines().map(str::trim).filter(|l| !l.is_empty()).enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        match field.parse::<f64>() {
            Ok(v) if v.is_nan() => return Err(Error::eval(Some(values.len()), "output is NaN")),
            Ok(v) => values.push(v),
            Err(_) if k == 0 => continue,
            Err(_) => {
                return Err(Error::eval(
                    Some(values.len()),
                    format!("cannot parse output {field:?}"),
                ))
            }
        }
    }
    if values.len() != expected {
        return Err(Error::Protocol {
            expected,
            actual: values.len(),
        });
    }
    Ok(values)
}

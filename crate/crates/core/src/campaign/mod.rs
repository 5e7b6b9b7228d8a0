//! The two-stage adaptive strategy as a resumable state machine.
//!
//! Stage one evaluates an `X`, `W` pair and estimates every first-order index
//! by oracle2. Each stage-two step picks one small or moderate index, evaluates
//! its `Z_i` design, re-estimates it by the triple oracle1 estimator, adds its
//! total index, and refreshes every other pending index by averaged oracle2.
//! A campaign with `m` steps costs exactly `N (m + 2)` evaluations.

mod store;

use serde::{Deserialize, Serialize};

pub use store::{CampaignStore, Event, EventKind, StoreLock};

use crate::bootstrap::BootstrapConfig;
use crate::designs::RlhdFamily;
use crate::error::{Error, Result};
use crate::estimators::{EstimateKind, EstimatorPlan, FamilyOutputs, SobolEstimate};
use crate::rng;
use crate::runner::{BudgetLedger, ProblemSpec, Runner};

/// Design sizes outside this range get a guidance note.
pub const SUGGESTED_N: (usize, usize) = (200, 400);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    /// Estimates at or above this are "large" and never candidates.
    pub large_cutoff: f64,
    /// Display threshold for suspicious small-index estimates.
    pub flag_cutoff: f64,
    /// Exit is suggested when the tracked sum lies within `1 ± exit_band`.
    pub exit_band: f64,
    /// ... and the root-sum-square of the CI half-widths is at most this.
    pub exit_halfwidth: f64,
    /// Bootstrap settings for every stored estimate; `None` skips intervals.
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            large_cutoff: 0.5,
            flag_cutoff: 0.10,
            exit_band: 0.05,
            exit_halfwidth: 0.05,
            bootstrap: Some(BootstrapConfig::default()),
        }
    }
}

impl CampaignConfig {
    pub fn without_bootstrap() -> Self {
        CampaignConfig {
            bootstrap: None,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fresh,
    Stage1Done,
    Stage2Active,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Human,
    Auto,
    System,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub seq: usize,
    pub actor: Actor,
    pub action: String,
    pub index: Option<usize>,
    pub from: Stage,
    pub to: Stage,
    pub ledger_total: usize,
}

/// Estimates for one input: the current value, everything it replaced, and
/// the total index once available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub input: usize,
    pub current: SobolEstimate,
    pub history: Vec<SobolEstimate>,
    pub total_order: Option<SobolEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitHint {
    /// Inputs whose estimates enter the sum: large ones and re-estimated ones.
    pub members: Vec<usize>,
    pub sum_of_estimates: f64,
    /// Root-sum-square of the members' CI half-widths, when intervals exist.
    pub half_width: Option<f64>,
    pub within_band: bool,
    pub accurate: bool,
    pub suggests_exit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub stage: Stage,
    pub spec: ProblemSpec,
    pub config: CampaignConfig,
    pub family: Option<RlhdFamily>,
    pub outputs: Option<FamilyOutputs>,
    pub records: Vec<IndexRecord>,
    /// Re-estimated inputs in the order they were stepped.
    pub reestimated: Vec<usize>,
    pub ledger: BudgetLedger,
    pub decision_log: Vec<Decision>,
    pub guidance: Vec<String>,
}

/// How the automatic policy orders its picks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Re-rank by current estimates before every step.
    #[default]
    Current,
    /// Follow the stage-one ranking throughout.
    StageOne,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AutoPolicy {
    pub max_steps: usize,
    /// Stop as soon as the exit hint fires. Off when `None`.
    pub exit_band: Option<f64>,
    pub ranking: Ranking,
}

fn sort_candidates(mut v: Vec<(usize, f64)>) -> Vec<usize> {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(i, _)| i).collect()
}

impl CampaignState {
    pub fn new(spec: ProblemSpec, config: CampaignConfig) -> Result<Self> {
        spec.validate()?;
        if let Some(b) = &config.bootstrap {
            b.validate()?;
        }
        let mut guidance = Vec::new();
        if spec.n < SUGGESTED_N.0 || spec.n > SUGGESTED_N.1 {
            guidance.push(format!(
                "N = {} is outside the suggested range {}..={} for stage one",
                spec.n, SUGGESTED_N.0, SUGGESTED_N.1
            ));
        }
        Ok(CampaignState {
            stage: Stage::Fresh,
            spec,
            config,
            family: None,
            outputs: None,
            records: Vec::new(),
            reestimated: Vec::new(),
            ledger: BudgetLedger::default(),
            decision_log: Vec::new(),
            guidance,
        })
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn d(&self) -> usize {
        self.spec.d().unwrap_or(0)
    }

    fn log(&mut self, actor: Actor, action: &str, index: Option<usize>, from: Stage) {
        self.decision_log.push(Decision {
            seq: self.decision_log.len(),
            actor,
            action: action.to_string(),
            index,
            from,
            to: self.stage,
            ledger_total: self.ledger.total,
        });
    }

    fn estimate(&self, plan: &EstimatorPlan, label: &str) -> Result<SobolEstimate> {
        match &self.config.bootstrap {
            None => plan.evaluate(),
            Some(cfg) => {
                let cfg = BootstrapConfig {
                    seed: rng::child_seed(self.spec.seed, &format!("bootstrap/{}", cfg.seed)),
                    ..cfg.with_stream(format!("bootstrap/{label}"))
                };
                plan.evaluate_with_ci(&cfg)
            }
        }
    }

    /// The evaluated family and its outputs, once stage one has run.
    pub fn evaluated(&self) -> Result<(&RlhdFamily, &FamilyOutputs)> {
        match (&self.family, &self.outputs) {
            (Some(f), Some(o)) => Ok((f, o)),
            _ => Err(Error::Precondition("stage one has not run".into())),
        }
    }

    /// Evaluate `X` and `W` and estimate every first-order index by oracle2.
    ///
    /// On an evaluation failure the ledger keeps whatever was charged and the
    /// stage stays `Fresh`; rerunning reuses cached batches.
    pub fn stage_one(&mut self, runner: &Runner, actor: Actor) -> Result<()> {
        if self.stage != Stage::Fresh {
            return Err(Error::Precondition(format!("stage one needs a fresh campaign, not {:?}", self.stage)));
        }
        let d = self.spec.d()?;
        let family = RlhdFamily::generate(self.spec.n, d, self.spec.seed)?;
        let x = runner.evaluate(family.x(), &mut self.ledger, "stage one: X")?;
        let w = runner.evaluate(family.w(), &mut self.ledger, "stage one: W")?;
        let outputs = FamilyOutputs::new(x, w);
        let mut records = Vec::with_capacity(d);
        for i in 0..d {
            let plan = EstimatorPlan::for_family(&family, &outputs, EstimateKind::Oracle2Pooled, i)?;
            let est = self.estimate(&plan, &format!("stage1/{i}"))?;
            records.push(IndexRecord {
                input: i,
                current: est,
                history: Vec::new(),
                total_order: None,
            });
        }
        self.family = Some(family);
        self.outputs = Some(outputs);
        self.records = records;
        let from = self.stage;
        self.stage = Stage::Stage1Done;
        self.log(actor, "stage_one", None, from);
        Ok(())
    }

    /// Pending small or moderate inputs, highest estimate first (ties by index).
    pub fn candidates(&self) -> Vec<usize> {
        if !matches!(self.stage, Stage::Stage1Done | Stage::Stage2Active) {
            return Vec::new();
        }
        sort_candidates(
            self.records
                .iter()
                .filter(|r| r.current.value < self.config.large_cutoff && !self.reestimated.contains(&r.input))
                .map(|r| (r.input, r.current.value))
                .collect(),
        )
    }

    /// Candidates ranked by their stage-one estimates.
    pub fn stage_one_ranking(&self) -> Vec<usize> {
        let first = |r: &IndexRecord| r.history.first().unwrap_or(&r.current).value;
        sort_candidates(
            self.records
                .iter()
                .filter(|r| first(r) < self.config.large_cutoff && !self.reestimated.contains(&r.input))
                .map(|r| (r.input, first(r)))
                .collect(),
        )
    }

    /// Re-estimate input `i` from a new `Z_i` batch.
    pub fn stage_two_step(&mut self, runner: &Runner, i: usize, actor: Actor) -> Result<()> {
        match self.stage {
            Stage::Stage1Done | Stage::Stage2Active => {}
            Stage::Closed => return Err(Error::Precondition("campaign is closed".into())),
            Stage::Fresh => return Err(Error::Precondition("stage one has not run".into())),
        }
        if i >= self.records.len() {
            return Err(Error::Domain(format!("input index {i} out of range for d = {}", self.records.len())));
        }
        if self.reestimated.contains(&i) {
            return Err(Error::Precondition(format!("input {} was already re-estimated", i + 1)));
        }
        if !self.candidates().contains(&i) {
            return Err(Error::Precondition(format!(
                "input {} is not a candidate (estimate at or above {})",
                i + 1,
                self.config.large_cutoff
            )));
        }

        let mut family = self.family.clone().expect("stage one ran");
        let z = family.ensure_z(i)?.clone();
        let batch = runner.evaluate(&z, &mut self.ledger, &format!("stage two: Z{}", i + 1))?;
        let mut outputs = self.outputs.clone().expect("stage one ran");
        outputs.z.insert(i, batch);

        let step = self.reestimated.len() + 1;
        let triple = EstimatorPlan::for_family(&family, &outputs, EstimateKind::Oracle1Triple, i)?;
        let total = EstimatorPlan::for_family(&family, &outputs, EstimateKind::TotalOrder, i)?;
        let triple = self.estimate(&triple, &format!("step{step}/triple/{i}"))?;
        let total = self.estimate(&total, &format!("step{step}/total/{i}"))?;
        let mut refreshed = Vec::new();
        for r in &self.records {
            let j = r.input;
            if j == i || self.reestimated.contains(&j) {
                continue;
            }
            let plan = EstimatorPlan::for_family(&family, &outputs, EstimateKind::Oracle2Averaged, j)?;
            refreshed.push((j, self.estimate(&plan, &format!("step{step}/averaged/{j}"))?));
        }

        // everything computed; commit
        self.family = Some(family);
        self.outputs = Some(outputs);
        let rec = &mut self.records[i];
        let old = std::mem::replace(&mut rec.current, triple);
        rec.history.push(old);
        rec.total_order = Some(total);
        for (j, est) in refreshed {
            let rec = &mut self.records[j];
            let old = std::mem::replace(&mut rec.current, est);
            rec.history.push(old);
        }
        self.reestimated.push(i);
        let from = self.stage;
        self.stage = Stage::Stage2Active;
        self.log(actor, "step", Some(i), from);
        Ok(())
    }

    pub fn exit_hint(&self) -> ExitHint {
        let members: Vec<usize> = self
            .records
            .iter()
            .filter(|r| r.current.value >= self.config.large_cutoff || self.reestimated.contains(&r.input))
            .map(|r| r.input)
            .collect();
        let sum: f64 = members.iter().map(|&i| self.records[i].current.value).sum();
        let widths: Option<Vec<f64>> = members
            .iter()
            .map(|&i| self.records[i].current.ci.map(|c| c.half_width()))
            .collect();
        let half_width = widths.map(|w| w.iter().map(|h| h * h).sum::<f64>().sqrt());
        let within_band = !members.is_empty() && (sum - 1.0).abs() <= self.config.exit_band;
        let accurate = half_width.is_none_or(|h| h <= self.config.exit_halfwidth);
        ExitHint {
            members,
            sum_of_estimates: sum,
            half_width,
            within_band,
            accurate,
            suggests_exit: within_band && accurate,
        }
    }

    pub fn close(&mut self, actor: Actor) -> Result<()> {
        if self.stage == Stage::Closed {
            return Err(Error::Precondition("campaign is already closed".into()));
        }
        let from = self.stage;
        self.stage = Stage::Closed;
        self.log(actor, "exit", None, from);
        Ok(())
    }

    /// Stage one followed by automatic stage-two steps.
    pub fn auto_run(&mut self, runner: &Runner, policy: &AutoPolicy) -> Result<()> {
        if self.stage == Stage::Fresh {
            self.stage_one(runner, Actor::Auto)?;
        }
        let plan = match policy.ranking {
            Ranking::StageOne => Some(self.stage_one_ranking()),
            Ranking::Current => None,
        };
        for _ in 0..policy.max_steps {
            if let Some(band) = policy.exit_band {
                let hint = CampaignState {
                    config: CampaignConfig {
                        exit_band: band,
                        ..self.config.clone()
                    },
                    ..self.clone()
                }
                .exit_hint();
                if hint.suggests_exit {
                    break;
                }
            }
            let candidates = self.candidates();
            let next = match &plan {
                Some(order) => order.iter().copied().find(|i| candidates.contains(i)),
                None => candidates.first().copied(),
            };
            let Some(i) = next else { break };
            self.stage_two_step(runner, i, Actor::Auto)?;
        }
        Ok(())
    }
}

/// Fresh campaign, run to completion under `policy`.
pub fn auto_policy_run(
    spec: ProblemSpec,
    config: CampaignConfig,
    runner: &Runner,
    policy: &AutoPolicy,
) -> Result<CampaignState> {
    let mut state = CampaignState::new(spec, config)?;
    state.auto_run(runner, policy)?;
    Ok(state)
}

/// Read-only snapshot served to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub stage: Stage,
    pub model: String,
    pub n: usize,
    pub d: usize,
    pub names: Vec<String>,
    pub thresholds: Thresholds,
    pub estimates: Vec<IndexView>,
    pub candidates: Vec<usize>,
    pub exit_hint: Option<ExitHint>,
    pub budget: Budget,
    pub ledger: BudgetLedger,
    pub decision_log: Vec<Decision>,
    pub guidance: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub large_cutoff: f64,
    pub flag_cutoff: f64,
    pub exit_band: f64,
    pub exit_halfwidth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexView {
    pub input: usize,
    pub name: String,
    pub estimate: SobolEstimate,
    pub total_order: Option<SobolEstimate>,
    pub reestimated: bool,
    pub large: bool,
    pub flagged: bool,
    pub negative: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub spent: usize,
    pub steps: usize,
    /// Total after one more step: `N (m + 3)`.
    pub next_step_total: usize,
    /// Cost of re-estimating every remaining candidate.
    pub all_candidates_total: usize,
    /// `N (d + 2)`, the ceiling of the strategy.
    pub ceiling: usize,
}

impl CampaignState {
    pub fn view(&self) -> StateView {
        let names = self.spec.names().unwrap_or_default();
        let candidates = self.candidates();
        let c = &self.config;
        let estimates = self
            .records
            .iter()
            .map(|r| {
                let v = r.current.value;
                let reestimated = self.reestimated.contains(&r.input);
                IndexView {
                    input: r.input,
                    name: names.get(r.input).cloned().unwrap_or_default(),
                    estimate: r.current.clone(),
                    total_order: r.total_order.clone(),
                    reestimated,
                    large: v >= c.large_cutoff,
                    flagged: !reestimated && v >= c.flag_cutoff && v < c.large_cutoff,
                    negative: v < 0.0,
                }
            })
            .collect();
        let (n, d, m) = (self.n(), self.d(), self.reestimated.len());
        StateView {
            stage: self.stage,
            model: self.spec.model_id(),
            n,
            d,
            names,
            thresholds: Thresholds {
                large_cutoff: c.large_cutoff,
                flag_cutoff: c.flag_cutoff,
                exit_band: c.exit_band,
                exit_halfwidth: c.exit_halfwidth,
            },
            estimates,
            exit_hint: (self.stage != Stage::Fresh).then(|| self.exit_hint()),
            budget: Budget {
                spent: self.ledger.total,
                steps: m,
                next_step_total: n * (m + 3),
                all_candidates_total: n * (m + 2 + candidates.len()),
                ceiling: n * (d + 2),
            },
            candidates,
            ledger: self.ledger.clone(),
            decision_log: self.decision_log.clone(),
            guidance: self.guidance.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with(values: &[f64]) -> CampaignState {
        let mut s = CampaignState::new(
            ProblemSpec::builtin("mod-g-19-9-4", 200, 0),
            CampaignConfig::without_bootstrap(),
        )
        .unwrap();
        s.stage = Stage::Stage1Done;
        s.records = values
            .iter()
            .enumerate()
            .map(|(i, &v)| IndexRecord {
                input: i,
                current: SobolEstimate {
                    input: i,
                    kind: EstimateKind::Oracle2Pooled,
                    value: v,
                    ci: None,
                    components: vec![],
                    batches_used: vec![],
                    evaluations_charged: 0,
                },
                history: vec![],
                total_order: None,
            })
            .collect();
        s
    }

    #[test]
    fn candidate_rule() {
        assert_eq!(state_with(&[0.05, 0.19, 0.76]).candidates(), vec![1, 0]);
        assert!(state_with(&[0.6, 0.5, 0.9]).candidates().is_empty());
        assert_eq!(state_with(&[0.1, -0.02, 0.1]).candidates(), vec![0, 2, 1]);
    }

    #[test]
    fn exit_band_rule() {
        let mut s = state_with(&[0.2, 0.797, 0.01]);
        s.reestimated = vec![0];
        let h = s.exit_hint();
        assert_eq!(h.members, vec![0, 1]);
        assert!((h.sum_of_estimates - 0.997).abs() < 1e-12);
        assert!(h.suggests_exit);
        let s = state_with(&[0.02; 10]);
        assert!(!s.exit_hint().suggests_exit);
    }

    #[test]
    fn guidance_for_unusual_n() {
        let s = CampaignState::new(ProblemSpec::builtin("mod-g-19-9-4", 50, 0), CampaignConfig::default()).unwrap();
        assert_eq!(s.guidance.len(), 1);
        let s = CampaignState::new(ProblemSpec::builtin("mod-g-19-9-4", 300, 0), CampaignConfig::default()).unwrap();
        assert!(s.guidance.is_empty());
    }
}

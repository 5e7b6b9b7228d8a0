use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use rlhd_core::bootstrap::BootstrapConfig;
use rlhd_core::campaign::{Actor, AutoPolicy, CampaignConfig, CampaignStore, EventKind, Ranking, StateView};
use rlhd_core::design_io::{default_names, export_design, export_family};
use rlhd_core::designs::{make_z_design_with, JitterArray, Permutation, RlhdFamily};
use rlhd_core::estimators::{EstimateKind, EstimatorPlan, FamilyOutputs, SobolEstimate};
use rlhd_core::experiments::{
    boxplot_study, crossover_study, default_crossover_grid, rmse_study, write_boxplot_csv, write_crossover_csv,
    write_rmse_csv, MomentMode, Strategy,
};
use rlhd_core::models::builtin;
use rlhd_core::rng;
use rlhd_core::runner::{BudgetLedger, ProblemSpec, Runner};

use crate::service;

const FAMILY_FILE: &str = "family.json";

#[derive(Debug, Parser)]
#[command(name = "rlhd", version, about = "Sobol' indices from replicated Latin hypercube designs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and extend design families.
    #[command(subcommand)]
    Design(DesignCmd),
    /// One index estimate for a problem spec, as a JSON record.
    Estimate(EstimateArgs),
    /// Two-stage campaigns stored in a directory.
    #[command(subcommand)]
    Campaign(CampaignCmd),
    /// Replication studies written to CSV.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Serve a campaign directory over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DesignCmd {
    /// A fresh X, W pair (or one built from injected permutations).
    New {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// JSON file `{"x": [[...]], "w": [[...]]}` of 0-based column permutations.
        #[arg(long)]
        perms: Option<PathBuf>,
        /// Put every point at its stratum midpoint (zero jitter).
        #[arg(long)]
        centered: bool,
        /// Comma-separated input names for the CSV header.
        #[arg(long, value_delimiter = ',')]
        names: Option<Vec<String>>,
    },
    /// Add the Z design for one input to a family directory.
    Z {
        #[arg(long)]
        dir: PathBuf,
        /// 1-based input index.
        #[arg(long)]
        index: usize,
        /// Comma-separated 1-based levels for the new column, e.g. 4,2,3,7,1,8,6,5.
        #[arg(long, value_delimiter = ',')]
        perm: Option<Vec<usize>>,
    },
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// oracle2, oracle1, triple-oracle1, triple-oracle2, total, ...
    #[arg(long)]
    pub kind: EstimateKind,
    /// 1-based input index.
    #[arg(long)]
    pub index: usize,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub no_ci: bool,
    /// Directory for cached model outputs.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CampaignCmd {
    /// Create a campaign directory and run stage one.
    Init(InitArgs),
    Status {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Re-estimate one candidate input.
    Step {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        /// 1-based input index.
        #[arg(long)]
        index: usize,
    },
    /// Take stage-two steps automatically, highest candidate first.
    Auto {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long)]
        max_steps: usize,
        /// Stop early once the exit hint fires with this band.
        #[arg(long)]
        exit_band: Option<f64>,
        #[arg(long, value_enum, default_value_t = RankingArg::Current)]
        ranking: RankingArg,
    },
    /// Close the campaign.
    Exit {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, default_value = ".")]
    pub dir: PathBuf,
    #[arg(long, conflicts_with = "model")]
    pub spec: Option<PathBuf>,
    /// Built-in model id, instead of a spec file.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long)]
    pub no_bootstrap: bool,
    #[arg(long, default_value_t = 0.5)]
    pub large_cutoff: f64,
    #[arg(long, default_value_t = 0.1)]
    pub flag_cutoff: f64,
    #[arg(long, default_value_t = 0.05)]
    pub exit_band: f64,
    #[arg(long, default_value_t = 0.05)]
    pub exit_halfwidth: f64,
    /// Only create the directory; run stage one later.
    #[arg(long)]
    pub defer: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RankingArg {
    Current,
    StageOne,
}

impl From<RankingArg> for Ranking {
    fn from(r: RankingArg) -> Self {
        match r {
            RankingArg::Current => Ranking::Current,
            RankingArg::StageOne => Ranking::StageOne,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MomentsArg {
    Known,
    Pooled,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// RMSE against analytic truth on an evaluation-budget grid.
    Rmse {
        #[command(flatten)]
        study: StudyArgs,
        #[arg(long, value_delimiter = ',', default_value = "oracle2,oracle1,triple-oracle1,triple-oracle2")]
        kinds: Vec<EstimateKind>,
        #[arg(long, value_delimiter = ',', default_value = "600,1200,2400")]
        grid: Vec<usize>,
    },
    /// Raw per-replicate estimates for box plots.
    Boxplot {
        #[command(flatten)]
        study: StudyArgs,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Stage-two steps; one-shot oracle2 when absent.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value_t = RankingArg::Current)]
        ranking: RankingArg,
        /// 1-based inputs to check against the cutoff. Defaults to inputs
        /// whose analytic first-order index is below 0.01.
        #[arg(long, value_delimiter = ',')]
        watch: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0.1)]
        cutoff: f64,
    },
    /// Variance of oracle1 vs oracle2 as the first index grows.
    Crossover {
        #[arg(long, default_value_t = 2000)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        d: usize,
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = MomentsArg::Known)]
        moments: MomentsArg,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = ".")]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

fn print_json(v: &impl Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn zero_based(index: usize) -> anyhow::Result<usize> {
    index.checked_sub(1).ok_or_else(|| anyhow!("--index is 1-based"))
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Design(cmd) => design(cmd),
        Command::Estimate(args) => estimate(args),
        Command::Campaign(cmd) => campaign(cmd),
        Command::Bench(cmd) => bench(cmd),
        Command::Serve(args) => {
            let store = CampaignStore::open(&args.dir)?;
            let addr = format!("{}:{}", args.host, args.port);
            tokio::runtime::Runtime::new()?.block_on(service::serve(store, &addr))
        }
    }
}

#[derive(Deserialize)]
struct PermFile {
    x: Vec<Permutation>,
    w: Vec<Permutation>,
}

fn write_family(dir: &Path, fam: &RlhdFamily, names: &[String]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = export_family(dir, fam, names)?;
    let path = dir.join(FAMILY_FILE);
    fs::write(&path, serde_json::to_vec_pretty(fam)?).with_context(|| format!("writing {}", path.display()))?;
    files.push(path);
    Ok(files)
}

fn read_family(dir: &Path) -> anyhow::Result<RlhdFamily> {
    let path = dir.join(FAMILY_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RlhdFamily::from_json(&text)?)
}

fn header_names(dir: &Path, d: usize) -> Vec<String> {
    // reuse the names of an existing export when present
    rlhd_core::design_io::read_design_csv(&dir.join("X.csv"))
        .map(|(names, _)| names)
        .ok()
        .filter(|n| n.len() == d)
        .unwrap_or_else(|| default_names(d))
}

fn design(cmd: DesignCmd) -> anyhow::Result<()> {
    match cmd {
        DesignCmd::New {
            n,
            d,
            seed,
            out,
            perms,
            centered,
            names,
        } => {
            let fam = match perms {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    let p: PermFile = serde_json::from_str(&text)?;
                    let dd = p.x.len();
                    let nn = p.x.first().map_or(0, Permutation::len);
                    if n.is_some_and(|v| v != nn) || d.is_some_and(|v| v != dd) {
                        bail!("--n/--d disagree with the {nn} x {dd} permutations in {}", path.display());
                    }
                    let jitter = if centered {
                        JitterArray::centered(nn, dd)
                    } else {
                        JitterArray::seeded(nn, dd, seed)?
                    };
                    RlhdFamily::from_permutations(p.x, p.w, jitter)?
                }
                None => {
                    if centered {
                        bail!("--centered applies to injected permutations (--perms)");
                    }
                    let (Some(n), Some(d)) = (n, d) else {
                        bail!("--n and --d are required without --perms");
                    };
                    RlhdFamily::generate(n, d, seed)?
                }
            };
            let names = names.unwrap_or_else(|| default_names(fam.d()));
            if names.len() != fam.d() {
                bail!("{} names for {} inputs", names.len(), fam.d());
            }
            let files = write_family(&out, &fam, &names)?;
            print_json(&json!({
                "fingerprint": fam.fingerprint(),
                "n": fam.n(),
                "d": fam.d(),
                "seed": fam.seed(),
                "files": files,
            }))
        }
        DesignCmd::Z { dir, index, perm } => {
            let i = zero_based(index)?;
            let mut fam = read_family(&dir)?;
            match perm {
                Some(levels) => {
                    let z = make_z_design_with(&fam, i, Permutation::new(levels)?)?;
                    fam.insert_z(z)?;
                }
                None => {
                    fam.ensure_z(i)?;
                }
            }
            let names = header_names(&dir, fam.d());
            let z = fam.z(i).expect("just built");
            let csv = export_design(&dir, z, &names)?;
            let path = dir.join(FAMILY_FILE);
            fs::write(&path, serde_json::to_vec_pretty(&fam)?)?;
            print_json(&json!({ "id": z.id(), "file": csv }))
        }
    }
}

/// Estimate record: the estimate plus the context needed to reproduce it.
#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub name: String,
    pub model: String,
    pub n: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub estimate: SobolEstimate,
    pub ledger: BudgetLedger,
}

fn estimate(args: EstimateArgs) -> anyhow::Result<()> {
    let mut spec = ProblemSpec::from_json_file(&args.spec)?;
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let i = zero_based(args.index)?;
    let d = spec.d()?;
    if i >= d {
        bail!("--index {} out of range for {d} inputs", args.index);
    }
    let mut runner = Runner::new(spec.clone())?;
    if let Some(c) = &args.cache {
        runner = runner.with_cache_dir(c);
    }
    let mut fam = RlhdFamily::generate(spec.n, d, spec.seed)?;
    let mut ledger = BudgetLedger::default();
    let x = runner.evaluate(fam.x(), &mut ledger, "X")?;
    let w = runner.evaluate(fam.w(), &mut ledger, "W")?;
    let mut outputs = FamilyOutputs::new(x, w);
    let z_inputs: Vec<usize> = match args.kind {
        EstimateKind::Oracle2Pooled | EstimateKind::Oracle2Pearson => vec![],
        EstimateKind::Oracle2Averaged => (0..d).collect(),
        _ => vec![i],
    };
    for k in z_inputs {
        let z = fam.ensure_z(k)?.clone();
        let batch = runner.evaluate(&z, &mut ledger, &format!("Z{}", k + 1))?;
        outputs.z.insert(k, batch);
    }
    let plan = EstimatorPlan::for_family(&fam, &outputs, args.kind, i)?;
    let est = if args.no_ci {
        plan.evaluate()?
    } else {
        let cfg = BootstrapConfig {
            replicates: args.reps,
            level: args.level,
            seed: rng::child_seed(spec.seed, "bootstrap"),
            ..Default::default()
        }
        .with_stream(format!("bootstrap/estimate/{}/{i}", args.kind));
        plan.evaluate_with_ci(&cfg)?
    };
    print_json(&EstimateRecord {
        name: spec.names()?[i].clone(),
        model: spec.model_id(),
        n: spec.n,
        seed: spec.seed,
        estimate: est,
        ledger,
    })
}

fn status_text(v: &StateView) -> String {
    let mut s = format!(
        "model {}  N = {}  d = {}  stage {:?}\nledger: {} evaluations ({} steps, ceiling {})\n",
        v.model, v.n, v.d, v.stage, v.budget.spent, v.budget.steps, v.budget.ceiling
    );
    for e in &v.estimates {
        let ci = e
            .estimate
            .ci
            .map(|c| format!(" [{:.4}, {:.4}]", c.lower, c.upper))
            .unwrap_or_default();
        let mut tags = Vec::new();
        if e.large {
            tags.push("large");
        }
        if e.flagged {
            tags.push("flagged");
        }
        if e.reestimated {
            tags.push("re-estimated");
        }
        if e.negative {
            tags.push("negative");
        }
        let total = e
            .total_order
            .as_ref()
            .map(|t| format!("  S^T {:.4}", t.value))
            .unwrap_or_default();
        s += &format!(
            "{:>3} {:<12} {:>8.4}{ci}{total}  {}\n",
            e.input + 1,
            e.name,
            e.estimate.value,
            tags.join(",")
        );
    }
    if !v.candidates.is_empty() {
        let c: Vec<String> = v.candidates.iter().map(|i| (i + 1).to_string()).collect();
        s += &format!("candidates: {}\n", c.join(" "));
    }
    if let Some(h) = &v.exit_hint {
        let hw = h.half_width.map(|w| format!(" +/- {w:.4}")).unwrap_or_default();
        s += &format!(
            "exit hint: sum {:.4}{hw}{}\n",
            h.sum_of_estimates,
            if h.suggests_exit { "  (exit suggested)" } else { "" }
        );
    }
    for g in &v.guidance {
        s += &format!("note: {g}\n");
    }
    s
}

fn campaign(cmd: CampaignCmd) -> anyhow::Result<()> {
    let state = match cmd {
        CampaignCmd::Init(a) => {
            let mut spec = match (&a.spec, &a.model) {
                (Some(p), _) => ProblemSpec::from_json_file(p)?,
                (None, Some(m)) => ProblemSpec::builtin(m, a.n.unwrap_or(0), 0),
                (None, None) => bail!("give --spec FILE or --model ID"),
            };
            if let Some(n) = a.n {
                spec.n = n;
            }
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let config = CampaignConfig {
                large_cutoff: a.large_cutoff,
                flag_cutoff: a.flag_cutoff,
                exit_band: a.exit_band,
                exit_halfwidth: a.exit_halfwidth,
                bootstrap: (!a.no_bootstrap).then(|| BootstrapConfig {
                    replicates: a.reps,
                    ..Default::default()
                }),
            };
            let (store, mut state) = CampaignStore::init(&a.dir, spec, config)?;
            if !a.defer {
                state = store
                    .transact(|st, r| st.stage_one(r, Actor::Human).map(|_| (EventKind::StageOne, None)))?
                    .0;
            }
            state
        }
        CampaignCmd::Status { dir, json } => {
            let state = CampaignStore::open(&dir)?.load()?;
            if json {
                return print_json(&state.view());
            }
            state
        }
        CampaignCmd::Step { dir, index } => {
            let i = zero_based(index)?;
            let store = CampaignStore::open(&dir)?;
            store
                .transact(|st, r| {
                    if st.stage == rlhd_core::campaign::Stage::Fresh {
                        st.stage_one(r, Actor::Human)?;
                    }
                    st.stage_two_step(r, i, Actor::Human).map(|_| (EventKind::Step, Some(i)))
                })?
                .0
        }
        CampaignCmd::Auto {
            dir,
            max_steps,
            exit_band,
            ranking,
        } => {
            let store = CampaignStore::open(&dir)?;
            let policy = AutoPolicy {
                max_steps,
                exit_band,
                ranking: ranking.into(),
            };
            store
                .transact(|st, r| st.auto_run(r, &policy).map(|_| (EventKind::Step, None)))?
                .0
        }
        CampaignCmd::Exit { dir } => {
            let store = CampaignStore::open(&dir)?;
            store
                .transact(|st, _| st.close(Actor::Human).map(|_| (EventKind::Exit, None)))?
                .0
        }
    };
    print!("{}", status_text(&state.view()));
    Ok(())
}

fn default_watch(model: &str) -> anyhow::Result<Vec<usize>> {
    let s = builtin(model)?.analytic_indices()?.first_order;
    Ok((0..s.len()).filter(|&i| s[i] < 0.01).collect())
}

fn bench(cmd: BenchCmd) -> anyhow::Result<()> {
    match cmd {
        BenchCmd::Rmse { study, kinds, grid } => {
            let rows = rmse_study(&study.model, &kinds, &grid, study.reps, study.seed)?;
            write_rmse_csv(&study.out, &rows)?;
            print_json(&json!({ "rows": rows.len(), "out": study.out }))
        }
        BenchCmd::Boxplot {
            study,
            n,
            steps,
            ranking,
            watch,
            cutoff,
        } => {
            let watched = match watch {
                Some(w) => w.into_iter().map(zero_based).collect::<anyhow::Result<_>>()?,
                None => default_watch(&study.model)?,
            };
            let strategy = match steps {
                None => Strategy::OneShot { n },
                Some(steps) => Strategy::Adaptive {
                    n,
                    steps,
                    ranking: ranking.into(),
                },
            };
            let result = boxplot_study(&study.model, &strategy, study.reps, study.seed, &watched, cutoff)?;
            write_boxplot_csv(&study.out, &result)?;
            print_json(&json!({
                "out": study.out,
                "flagged_fraction": result.flagged_fraction,
                "budget_per_rep": result.budget_per_rep,
            }))
        }
        BenchCmd::Crossover {
            reps,
            seed,
            out,
            n,
            d,
            targets,
            moments,
        } => {
            let mode = match moments {
                MomentsArg::Known => MomentMode::Known,
                MomentsArg::Pooled => MomentMode::Pooled,
            };
            let targets = targets.unwrap_or_else(default_crossover_grid);
            let result = crossover_study(&targets, d, n, reps, seed, mode)?;
            write_crossover_csv(&out, &result)?;
            print_json(&json!({ "out": out, "crossover": result.crossover }))
        }
    }
}

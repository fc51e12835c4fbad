//! `rlvr`: command-line pipeline over the rlvr-core modules.
//!
//! Every stage reads and writes record files in the output directory, so any
//! stage can be re-run from the artifacts of the stages before it.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use rlvr_core::analytics::{self, report, CurveSet, DEFAULT_KS};
use rlvr_core::dataset::{self, DifficultyProfile, StratifiedSample};
use rlvr_core::grpo::{self, BaselineMode, EvalPool, TrainInputs};
use rlvr_core::judge::{self, BackendConfig, RemoteConfig, ResponseFilter};
use rlvr_core::policy::{InitConfig, Mode, Policy};
use rlvr_core::rewards::{self, LabelSet, RewardSource};
use rlvr_core::rng::{self, Domain};
use rlvr_core::runlog::{RunLog, TRAIN_REWARD};
use rlvr_core::task_env::{PoolSpec, TaskPool, Vocab};

use crate::config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "rlvr", version, about = "GRPO under weak supervision on synthetic verifiable tasks")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    /// Fraction of training labels to corrupt.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true, value_enum)]
    reward: Option<Reward>,
    #[arg(long, global = true, value_enum)]
    baseline: Option<Baseline>,
    /// Training-set size.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(["8", "32", "64", "512", "2048"]))]
    n: Option<String>,
    #[arg(long, global = true, value_enum)]
    mode: Option<PolicyMode>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate the candidate and held-out task pools.
    GenTasks,
    /// Estimate solve@16 for every candidate under the base policy.
    Probe,
    /// Drop trivial and unsolved items and draw a stratified sample of N.
    Filter,
    /// Corrupt a fraction γ of the training labels.
    Corrupt,
    /// Run GRPO on the training sample.
    Train,
    /// Evaluate avg@16 and pass@k of a checkpoint on the held-out pool.
    Eval {
        /// Checkpoint to evaluate; defaults to the run's trained policy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Saturation step and efficiency metrics for one run.
    Analyze {
        /// Run to compare against for G_sat.
        #[arg(long)]
        companion: Option<String>,
        /// Run log to analyze; defaults to the run's own log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Semantic diversity of a checkpoint's samples.
    Diversity {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Faithfulness label rates of a checkpoint's samples.
    Faithfulness {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        filter: Option<Filter>,
    },
    /// Table of saturation metrics and reward/metric curves for every run log in the output directory.
    Report,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Backend {
    Mock,
    Remote,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Reward {
    Verifier,
    Corrupted,
    Majority,
    Certainty,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Baseline {
    Mean,
    Pos,
    Neg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PolicyMode {
    Shared,
    Tabular,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Filter {
    Correct,
    Incorrect,
    All,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(g) = cli.gamma {
        cfg.reward.gamma = g;
    }
    if let Some(r) = cli.reward {
        cfg.reward.source = match r {
            Reward::Verifier => RewardSource::Verifier,
            Reward::Corrupted => RewardSource::Corrupted,
            Reward::Majority => match cfg.reward.source {
                s @ RewardSource::MajorityVote { .. } => s,
                _ => RewardSource::majority_default(),
            },
            Reward::Certainty => RewardSource::SelfCertainty,
        };
    }
    if let Some(b) = cli.baseline {
        cfg.update.baseline = match b {
            Baseline::Mean => BaselineMode::GroupMean,
            Baseline::Pos => BaselineMode::Const0,
            Baseline::Neg => BaselineMode::Const1,
        };
    }
    if let Some(n) = &cli.n {
        cfg.data.n = n.parse()?;
    }
    if let Some(m) = cli.mode {
        cfg.policy.mode = match m {
            PolicyMode::Shared => Mode::Shared,
            PolicyMode::Tabular => Mode::Tabular,
        };
    }
    if let Some(id) = &cli.run_id {
        cfg.run_id = Some(id.clone());
    }
    match cli.backend {
        Some(Backend::Mock) => cfg.judge.backend = BackendConfig::Mock,
        Some(Backend::Remote) => {
            let mut remote = match &cfg.judge.backend {
                BackendConfig::Remote(r) => r.clone(),
                BackendConfig::Mock => RemoteConfig::default(),
            };
            if let Ok(e) = std::env::var("RLVR_JUDGE_ENDPOINT") {
                remote.endpoint = e;
            }
            if let Ok(m) = std::env::var("RLVR_JUDGE_MODEL") {
                remote.model = m;
            }
            cfg.judge.backend = BackendConfig::Remote(remote);
        }
        None => {}
    }
    Ok(cfg)
}

/// Artifact locations inside the output directory.
struct Paths<'a> {
    cfg: &'a ExperimentConfig,
}

impl Paths<'_> {
    fn dir(&self) -> &Path {
        &self.cfg.out
    }
    fn mode(&self) -> &'static str {
        match self.cfg.policy.mode {
            Mode::Shared => "shared",
            Mode::Tabular => "tabular",
        }
    }
    fn tasks(&self) -> PathBuf {
        self.dir().join("tasks.jsonl")
    }
    fn heldout(&self) -> PathBuf {
        self.dir().join("heldout.jsonl")
    }
    fn base_policy(&self) -> PathBuf {
        self.dir().join(format!("base_policy_{}.json", self.mode()))
    }
    fn profile(&self) -> PathBuf {
        self.dir().join(format!("profile_{}.jsonl", self.mode()))
    }
    fn sample(&self) -> PathBuf {
        self.dir().join(format!("sample_{}_n{}.jsonl", self.mode(), self.cfg.data.n))
    }
    fn labels(&self) -> PathBuf {
        self.dir()
            .join(format!("labels_{}_n{}_g{:.2}.jsonl", self.mode(), self.cfg.data.n, self.cfg.reward.gamma))
    }
    fn run(&self, suffix: &str) -> PathBuf {
        self.dir().join(format!("{}.{suffix}", self.cfg.run_id()))
    }
    fn runlog(&self) -> PathBuf {
        analytics::runlog_path(self.dir(), &self.cfg.run_id())
    }
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {}; run `rlvr {producer}` first", path.display());
    }
    Ok(())
}

fn load_pool(path: &Path) -> Result<TaskPool> {
    require(path, "gen-tasks")?;
    Ok(TaskPool::load(path)?)
}

fn load_policy(path: &Path, producer: &str) -> Result<Policy> {
    require(path, producer)?;
    Ok(Policy::load(path)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn gen_tasks(cfg: &ExperimentConfig, p: &Paths) -> Result<()> {
    std::fs::create_dir_all(p.dir())?;
    let vocab = Vocab::toy();
    let spec = |count, seed, first_id| PoolSpec {
        family: cfg.task.family,
        count,
        levels: cfg.task.levels,
        seed,
        first_id,
    };
    let tasks = TaskPool::generate(&spec(cfg.task.pool_size, rng::mix(cfg.seed, &[Domain::TaskGen as u64, 0]), 0), &vocab)?;
    let held = TaskPool::generate(
        &spec(cfg.task.heldout_size, rng::mix(cfg.seed, &[Domain::TaskGen as u64, 1]), 1 << 32),
        &vocab,
    )?;
    tasks.save(&p.tasks())?;
    held.save(&p.heldout())?;
    println!("tasks: {} candidates, {} held out", tasks.len(), held.len());
    Ok(())
}

fn base_policy(cfg: &ExperimentConfig, p: &Paths, tasks: &TaskPool) -> Result<Policy> {
    let path = p.base_policy();
    if path.exists() {
        return Ok(Policy::load(&path)?);
    }
    let init = InitConfig {
        scale: cfg.policy.init_scale,
    };
    let seed = rng::mix(cfg.seed, &[Domain::Init as u64]);
    let policy = match cfg.policy.mode {
        Mode::Shared => Policy::shared(tasks.vocab.clone(), cfg.policy.max_len, tasks.feature_dim(), init, seed),
        Mode::Tabular => {
            let ids: Vec<u64> = tasks.instances.iter().map(|i| i.id).collect();
            Policy::tabular(tasks.vocab.clone(), cfg.policy.max_len, &ids, init, seed)
        }
    };
    policy.save(&path)?;
    Ok(policy)
}

fn probe(cfg: &ExperimentConfig, p: &Paths) -> Result<()> {
    let tasks = load_pool(&p.tasks())?;
    let policy = base_policy(cfg, p, &tasks)?;
    let profile = dataset::estimate_solve16(&policy, &tasks, cfg.seed, cfg.update.execution)?;
    profile.save(&p.profile())?;
    let h = profile.histogram();
    println!("solve@16 histogram (0..=16): {h:?}; retained {}", profile.retained());
    Ok(())
}

fn filter(cfg: &ExperimentConfig, p: &Paths) -> Result<()> {
    require(&p.profile(), "probe")?;
    let profile = DifficultyProfile::load(&p.profile())?;
    let sample = dataset::filter_and_sample(&profile, cfg.data.n, rng::mix(cfg.seed, &[Domain::Stratify as u64]))?;
    sample.save(&p.sample())?;
    let mut occ = [0usize; dataset::NUM_BINS];
    sample.bins.iter().for_each(|&b| occ[b as usize - 1] += 1);
    println!("sampled {} items; per-bin counts {occ:?}", sample.len());
    Ok(())
}

fn training_pool(p: &Paths) -> Result<TaskPool> {
    let tasks = load_pool(&p.tasks())?;
    require(&p.sample(), "filter")?;
    let sample = StratifiedSample::load(&p.sample())?;
    Ok(tasks.subset(&sample.ids)?)
}

fn corrupt(cfg: &ExperimentConfig, p: &Paths) -> Result<()> {
    let pool = training_pool(p)?;
    let tasks = load_pool(&p.tasks())?;
    let policy = base_policy(cfg, p, &tasks)?;
    let labels = rewards::corrupt_labels(
        &pool,
        &policy,
        cfg.reward.gamma,
        cfg.reward.probe_samples,
        rng::mix(cfg.seed, &[Domain::Corrupt as u64]),
        cfg.update.execution,
    )?;
    labels.save(&p.labels())?;
    println!(
        "corrupted {} of {} labels (γ = {}), {} fallbacks",
        labels.num_corrupted(),
        labels.len(),
        cfg.reward.gamma,
        labels.fallbacks.len()
    );
    Ok(())
}

/// Returns whether training finished without an error record.
fn train(cfg: &ExperimentConfig, p: &Paths) -> Result<bool> {
    let pool = training_pool(p)?;
    let held = load_pool(&p.heldout())?;
    let policy = load_policy(&p.base_policy(), "probe")?;
    let labels = match cfg.reward.source {
        RewardSource::Corrupted => {
            require(&p.labels(), "corrupt")?;
            LabelSet::load(&p.labels(), &pool)?
        }
        _ => LabelSet::clean(&pool),
    };
    let run_id = cfg.run_id();
    let inputs = TrainInputs {
        pool: &pool,
        labels: &labels,
        source: cfg.reward.source,
        eval_pools: vec![EvalPool {
            name: "heldout".into(),
            pool: &held,
        }],
        run_id: run_id.clone(),
    };
    let mut outcome = grpo::train(policy, &inputs, &cfg.update, cfg.seed)?;
    outcome.log.meta.extra = serde_json::json!({
        "reward": cfg.reward_name(),
        "gamma": cfg.reward.gamma,
        "mode": p.mode(),
        "seed": cfg.seed,
    });
    outcome.log.save(&p.runlog())?;
    outcome.policy.save(&p.run("policy.json"))?;
    let last = outcome.log.reward_points().last().map(|x| x.1).unwrap_or(f64::NAN);
    println!("run {run_id}: {} steps logged, final mean reward {last:.4}", outcome.log.reward_points().len());
    if let Some(e) = outcome.aborted {
        eprintln!("training aborted: {e}");
        return Ok(false);
    }
    Ok(true)
}

fn checkpoint(p: &Paths, explicit: &Option<PathBuf>) -> Result<Policy> {
    match explicit {
        Some(path) => load_policy(path, "train"),
        None => load_policy(&p.run("policy.json"), "train"),
    }
}

fn eval(cfg: &ExperimentConfig, p: &Paths, ckpt: &Option<PathBuf>) -> Result<()> {
    let held = load_pool(&p.heldout())?;
    let policy = checkpoint(p, ckpt)?;
    let seed = rng::mix(cfg.seed, &[Domain::Eval as u64]);
    let summary = analytics::evaluate(&policy, &held, seed, &DEFAULT_KS, cfg.update.execution)?;
    write_json(&p.run("eval.json"), &summary)?;
    let pass: Vec<String> = summary.pass.iter().map(|(k, v)| format!("pass@{k} {v:.4}")).collect();
    println!("avg@16 {:.4}; {}", summary.avg, pass.join(", "));
    Ok(())
}

fn analyze(cfg: &ExperimentConfig, p: &Paths, companion: &Option<String>, log: &Option<PathBuf>) -> Result<()> {
    let own = log.clone().unwrap_or_else(|| p.runlog());
    require(&own, "train")?;
    let mut paths = vec![own.clone()];
    let companion = companion.clone().or_else(|| cfg.analysis.companion.clone());
    if let Some(c) = &companion {
        let cp = analytics::runlog_path(p.dir(), c);
        require(&cp, "train")?;
        paths.push(cp);
    }
    let set = analytics::ingest(&paths)?;
    let run_id = RunLog::load(&own)?.meta.run_id;
    let rep = analytics::analyze_run(&set, &run_id, companion.as_deref(), cfg.analysis.saturation())?;
    let csv = report::table_csv(std::slice::from_ref(&rep))?;
    let out = p.dir().join(format!("{run_id}.saturation.csv"));
    std::fs::write(&out, &csv)?;
    info!("wrote {}", out.display());
    print!("{csv}");
    Ok(())
}

fn judge_pool(p: &Paths) -> Result<TaskPool> {
    load_pool(&p.heldout())
}

fn diversity(cfg: &ExperimentConfig, p: &Paths, ckpt: &Option<PathBuf>) -> Result<()> {
    let pool = judge_pool(p)?;
    let policy = checkpoint(p, ckpt)?;
    let judge = cfg.judge.backend.build()?;
    let d = judge::dataset_diversity(&policy, &pool, judge.as_ref(), &cfg.judge.sampling, cfg.update.execution)?;
    let fd = judge::faithful_diversity(&policy, &pool, judge.as_ref(), &cfg.judge.sampling, cfg.update.execution)?;
    write_json(
        &p.run("diversity.json"),
        &serde_json::json!({ "diversity": d, "faithful_diversity": fd }),
    )?;
    println!("diversity {:.4}; faithful diversity {:.4}", d.mean, fd.mean);
    Ok(())
}

fn faithfulness(cfg: &ExperimentConfig, p: &Paths, ckpt: &Option<PathBuf>, f: Option<Filter>) -> Result<()> {
    let pool = judge_pool(p)?;
    let policy = checkpoint(p, ckpt)?;
    let judge = cfg.judge.backend.build()?;
    let filter = match f {
        Some(Filter::Correct) => ResponseFilter::Correct,
        Some(Filter::Incorrect) => ResponseFilter::Incorrect,
        Some(Filter::All) => ResponseFilter::All,
        None => cfg.judge.filter,
    };
    let rep = judge::faithfulness_rates(&policy, &pool, judge.as_ref(), &cfg.judge.sampling, filter, cfg.update.execution)?;
    write_json(&p.run("faithfulness.json"), &rep)?;
    let r = rep.rates;
    println!(
        "F(1) {:.4}  F(0.5) {:.4}  F(0) {:.4}  over {} labels ({} invalid)",
        r.correlated, r.partial, r.uncorrelated, r.valid, r.invalid
    );
    Ok(())
}

fn sanitize(metric: &str) -> String {
    metric.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn report_cmd(cfg: &ExperimentConfig, p: &Paths) -> Result<()> {
    let mut logs: Vec<PathBuf> = std::fs::read_dir(p.dir())
        .with_context(|| format!("reading {}", p.dir().display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|path| path.to_string_lossy().ends_with(".runlog.jsonl"))
        .collect();
    logs.sort();
    if logs.is_empty() {
        bail!("no run logs in {}; run `rlvr train` first", p.dir().display());
    }
    let set: CurveSet = analytics::ingest(&logs)?;
    // Each run is compared against the largest-N run other than itself.
    let mut largest: Option<(&String, usize)> = None;
    for (id, &n) in &set.runs {
        if largest.is_none_or(|(_, best)| n > best) {
            largest = Some((id, n));
        }
    }
    let largest = largest.map(|(id, _)| id.clone());
    let mut reports = Vec::new();
    for run in set.runs.keys() {
        let companion = cfg
            .analysis
            .companion
            .clone()
            .or_else(|| largest.clone())
            .filter(|c| c != run && set.runs.contains_key(c));
        reports.push(analytics::analyze_run(&set, run, companion.as_deref(), cfg.analysis.saturation())?);
    }
    std::fs::write(p.dir().join("table.csv"), report::table_csv(&reports)?)?;
    let markers: Vec<(String, usize)> = reports.iter().filter_map(|r| r.t_sat.map(|t| (r.run_id.clone(), t))).collect();
    let rewards: Vec<_> = set.runs.keys().filter_map(|r| set.reward(r)).collect();
    std::fs::write(p.dir().join("curves_reward.svg"), report::curves_svg("training reward", &rewards, &markers))?;
    let mut metrics: Vec<String> = set.runs.keys().flat_map(|r| set.metrics(r)).collect();
    metrics.sort();
    metrics.dedup();
    for m in metrics.iter().filter(|m| m.as_str() != TRAIN_REWARD) {
        let curves: Vec<_> = set.runs.keys().filter_map(|r| set.get(r, m)).collect();
        std::fs::write(p.dir().join(format!("curves_{}.svg", sanitize(m))), report::curves_svg(m, &curves, &markers))?;
    }
    println!("report over {} runs written to {}", reports.len(), p.dir().display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = effective_config(cli)?;
    let p = Paths { cfg: &cfg };
    match &cli.command {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::GenTasks => gen_tasks(&cfg, &p)?,
        Command::Probe => probe(&cfg, &p)?,
        Command::Filter => filter(&cfg, &p)?,
        Command::Corrupt => corrupt(&cfg, &p)?,
        Command::Train => return train(&cfg, &p),
        Command::Eval { checkpoint } => eval(&cfg, &p, checkpoint)?,
        Command::Analyze { companion, log } => analyze(&cfg, &p, companion, log)?,
        Command::Diversity { checkpoint } => diversity(&cfg, &p, checkpoint)?,
        Command::Faithfulness { checkpoint, filter: f } => faithfulness(&cfg, &p, checkpoint, *f)?,
        Command::Report => report_cmd(&cfg, &p)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

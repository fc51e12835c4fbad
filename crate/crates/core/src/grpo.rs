//! GRPO: group-normalized advantages, the clipped surrogate objective with an
//! exact per-token KL penalty, and the on-policy training loop.
//!
//! Per prompt, with G rollouts `o_i` sampled under θ_old:
//!
//! ```text
//! J = 1/G Σ_i w_i Σ_t [ min(ρ_it Â_i, clip(ρ_it, 1−ε, 1+ε) Â_i) − β KL_t ]
//! ρ_it = π_θ(o_it | ctx) / π_old(o_it | ctx)
//! KL_t = Σ_v π_θ(v | ctx) ln(π_θ(v | ctx) / π_ref(v | ctx))
//! ```
//!
//! where `w_i = 1/|o_i|` with length normalization and `1` without. The
//! objective over a batch of prompts is the mean of the per-prompt values.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analytics::{self, DEFAULT_KS};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::policy::{log_softmax, softmax, GroupBatch, Policy, SamplingConfig, Snapshot};
use crate::rewards::{self, LabelSet, RewardSource};
use crate::rng::{self, Domain};
use crate::runlog::{LogRecord, PromptReward, RunLog};
use crate::task_env::{TaskInstance, TaskPool};

/// Reward baseline: group mean with std normalization, or a constant
/// baseline `b ∈ {0, 1}` without std division.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    #[serde(alias = "mean")]
    GroupMean,
    /// b = 0: only correct samples push.
    #[serde(alias = "pos")]
    Const0,
    /// b = 1: only incorrect samples push.
    #[serde(alias = "neg")]
    Const1,
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "group_mean" => Ok(Self::GroupMean),
            "pos" | "const_0" => Ok(Self::Const0),
            "neg" | "const_1" => Ok(Self::Const1),
            other => Err(Error::Config(format!("unknown baseline '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    GradientAscent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdateConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub group_size: usize,
    pub baseline: BaselineMode,
    pub length_norm: bool,
    pub batch_prompts: usize,
    pub total_steps: usize,
    pub std_floor: f64,
    pub temperature: f64,
    pub max_len: usize,
    pub optimizer: OptimizerKind,
    /// Evaluate every this many steps (plus step 0 and the final step); 0 disables.
    pub eval_interval: usize,
    pub execution: Execution,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 0.001,
            learning_rate: 32.0,
            group_size: 8,
            baseline: BaselineMode::GroupMean,
            length_norm: true,
            batch_prompts: 64,
            total_steps: 496,
            std_floor: 1e-8,
            temperature: 1.0,
            max_len: 8,
            optimizer: OptimizerKind::GradientAscent,
            eval_interval: 8,
            execution: Execution::Parallel,
        }
    }
}

impl UpdateConfig {
    /// Adaptive-moment settings used for the memorize-vs-generalize contrast,
    /// where per-parameter step normalization puts tabular and shared
    /// parameterizations on the same footing.
    pub fn adam_contrast() -> Self {
        Self {
            learning_rate: 4.0,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Written positively so NaN fails validation.
        let ok = self.clip_eps > 0.0 && self.learning_rate >= 0.0 && self.kl_beta >= 0.0;
        if !ok {
            return Err(Error::Config("need ε > 0, lr ≥ 0, β ≥ 0".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!("group size {} < 2", self.group_size)));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.batch_prompts == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_prompts and max_len must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            group_size: self.group_size,
            temperature: self.temperature,
            max_len: self.max_len,
        }
    }
}

/// Per-rollout advantages Â_i for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector(pub Vec<f64>);

impl AdvantageVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Group-relative advantages.
///
/// `GroupMean` computes `(r − μ)/max(σ, std_floor)` with the population
/// standard deviation; a group with identical rewards gets all zeros. The
/// rewards are first divided by their largest magnitude, which leaves the
/// result unchanged mathematically and makes it exactly invariant to
/// rescaling whenever the rescaled rewards are themselves exact (e.g.
/// two-valued rewards, or power-of-two factors).
pub fn compute_advantages(rewards: &[f64], mode: BaselineMode, std_floor: f64) -> AdvantageVector {
    match mode {
        BaselineMode::Const0 => AdvantageVector(rewards.to_vec()),
        BaselineMode::Const1 => AdvantageVector(rewards.iter().map(|r| r - 1.0).collect()),
        BaselineMode::GroupMean => {
            let g = rewards.len();
            if g == 0 || rewards.iter().all(|&r| r == rewards[0]) {
                return AdvantageVector(vec![0.0; g]);
            }
            let scale = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            let u: Vec<f64> = rewards.iter().map(|r| r / scale).collect();
            let mean = u.iter().sum::<f64>() / g as f64;
            let var = u.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / g as f64;
            let denom = var.sqrt().max(std_floor / scale);
            AdvantageVector(u.iter().map(|x| (x - mean) / denom).collect())
        }
    }
}

/// Objective value and exact gradient with respect to θ.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Mean per-token KL(π_θ ‖ π_ref) under the objective's token weighting.
    pub mean_kl: f64,
    /// Fraction of tokens whose gradient was cut by clipping.
    pub clip_fraction: f64,
}

struct GroupTerm {
    offset: usize,
    grad: Vec<f64>,
    objective: f64,
    kl: f64,
    clipped: usize,
    tokens: usize,
}

fn instance_for(pool: &TaskPool, q: u64) -> Result<&TaskInstance> {
    pool.get(q)
        .ok_or_else(|| Error::Input(format!("question {q} not in pool")))
}

#[allow(clippy::too_many_arguments)]
fn group_term(
    current: &Policy,
    old: &Snapshot,
    reference: &Snapshot,
    inst: &TaskInstance,
    batch: &GroupBatch,
    adv: &[f64],
    cfg: &UpdateConfig,
    scale: f64,
    same_old: bool,
) -> Result<Option<GroupTerm>> {
    let Some((offset, len)) = current.param_block(inst) else {
        return Ok(None);
    };
    let v_size = current.vocab().size();
    let use_kl = cfg.kl_beta > 0.0;
    let g = batch.rollouts.len() as f64;
    let mut grad = vec![0.0; len];
    let (mut objective, mut kl_sum, mut clipped, mut tokens) = (0.0, 0.0, 0usize, 0usize);
    let mut logits = vec![0.0; v_size];
    let mut dlogits = vec![0.0; v_size];
    for (rollout, &a) in batch.rollouts.iter().zip(adv) {
        let w = scale / g / if cfg.length_norm { rollout.len() as f64 } else { 1.0 };
        let mut prev = None;
        for (pos, &tok) in rollout.tokens.iter().enumerate() {
            let y = tok as usize;
            current.logits_into(inst, pos, prev, &mut logits);
            let logp = log_softmax(&logits);
            let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let logp_old = if same_old {
                logp[y]
            } else {
                old.logits_into(inst, pos, prev, &mut logits);
                log_softmax(&logits)[y]
            };
            let ratio = (logp[y] - logp_old).exp();
            let clipped_ratio = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            let unclipped_term = ratio * a;
            let clipped_term = clipped_ratio * a;
            let through_ratio = unclipped_term <= clipped_term;
            objective += w * unclipped_term.min(clipped_term);
            dlogits.iter_mut().for_each(|d| *d = 0.0);
            if through_ratio {
                let c = w * a * ratio;
                for (d, &pv) in dlogits.iter_mut().zip(&p) {
                    *d -= c * pv;
                }
                dlogits[y] += c;
            } else {
                clipped += 1;
            }
            if use_kl {
                reference.logits_into(inst, pos, prev, &mut logits);
                let logr = log_softmax(&logits);
                let kl: f64 = p.iter().zip(logp.iter().zip(&logr)).map(|(pv, (lp, lr))| pv * (lp - lr)).sum();
                objective -= w * cfg.kl_beta * kl;
                kl_sum += w * kl;
                for v in 0..v_size {
                    dlogits[v] -= w * cfg.kl_beta * p[v] * (logp[v] - logr[v] - kl);
                }
            }
            current.backprop_logits(inst, pos, prev, &dlogits, &mut grad);
            tokens += 1;
            prev = Some(tok);
        }
    }
    Ok(Some(GroupTerm {
        offset,
        grad,
        objective,
        kl: kl_sum,
        clipped,
        tokens,
    }))
}

fn check_batches(old: &Snapshot, batches: &[GroupBatch], advantages: &[AdvantageVector]) -> Result<()> {
    if batches.len() != advantages.len() {
        return Err(Error::Input(format!(
            "{} batches but {} advantage vectors",
            batches.len(),
            advantages.len()
        )));
    }
    for (b, a) in batches.iter().zip(advantages) {
        match b.sampled_under {
            Some(tag) if tag == old.tag() => {}
            Some(_) => {
                return Err(Error::Contract(format!(
                    "batch for question {} was sampled under a different snapshot than θ_old",
                    b.question_id
                )))
            }
            None => {
                return Err(Error::Contract(format!(
                    "batch for question {} is not tagged with its sampling snapshot",
                    b.question_id
                )))
            }
        }
        if a.0.len() != b.rollouts.len() {
            return Err(Error::Input(format!(
                "question {}: {} advantages for {} rollouts",
                b.question_id,
                a.0.len(),
                b.rollouts.len()
            )));
        }
    }
    Ok(())
}

/// Clipped surrogate objective minus β·KL, averaged over prompts, and its
/// exact gradient.
pub fn surrogate_loss(
    current: &Policy,
    old: &Snapshot,
    reference: &Snapshot,
    pool: &TaskPool,
    batches: &[GroupBatch],
    advantages: &[AdvantageVector],
    cfg: &UpdateConfig,
) -> Result<SurrogateOutput> {
    check_batches(old, batches, advantages)?;
    let scale = 1.0 / batches.len().max(1) as f64;
    let same_old = current.params() == old.params();
    let terms = exec::map_indexed(cfg.execution, batches.len(), |i| {
        let inst = instance_for(pool, batches[i].question_id)?;
        group_term(current, old, reference, inst, &batches[i], &advantages[i].0, cfg, scale, same_old)
    });
    let mut out = SurrogateOutput {
        objective: 0.0,
        gradient: vec![0.0; current.num_params()],
        mean_kl: 0.0,
        clip_fraction: 0.0,
    };
    let (mut clipped, mut tokens) = (0usize, 0usize);
    // Fixed-order reduction keeps the result independent of the execution mode.
    for term in terms {
        let Some(t) = term? else { continue };
        out.objective += t.objective;
        out.mean_kl += t.kl;
        clipped += t.clipped;
        tokens += t.tokens;
        out.gradient[t.offset..t.offset + t.grad.len()]
            .iter_mut()
            .zip(&t.grad)
            .for_each(|(o, g)| *o += g);
    }
    out.clip_fraction = if tokens > 0 { clipped as f64 / tokens as f64 } else { 0.0 };
    Ok(out)
}

/// REINFORCE-with-baseline gradient `mean_prompts 1/G Σ_i Â_i w_i Σ_t ∇ln π_θ(o_it)`
/// under the same token weighting as the surrogate.
pub fn reinforce_gradient(
    policy: &Policy,
    pool: &TaskPool,
    batches: &[GroupBatch],
    advantages: &[AdvantageVector],
    length_norm: bool,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.num_params()];
    let scale = 1.0 / batches.len().max(1) as f64;
    for (b, adv) in batches.iter().zip(advantages) {
        let inst = instance_for(pool, b.question_id)?;
        let Some((offset, len)) = policy.param_block(inst) else { continue };
        let mut block = vec![0.0; len];
        let g = b.rollouts.len() as f64;
        for (r, &a) in b.rollouts.iter().zip(&adv.0) {
            let w = scale / g / if length_norm { r.len() as f64 } else { 1.0 };
            let mut prev = None;
            for (pos, &tok) in r.tokens.iter().enumerate() {
                let p = softmax(&policy.logits(inst, pos, prev), 1.0);
                let d: Vec<f64> = p
                    .iter()
                    .enumerate()
                    .map(|(v, pv)| a * w * ((v == tok as usize) as u8 as f64 - pv))
                    .collect();
                policy.backprop_logits(inst, pos, prev, &d, &mut block);
                prev = Some(tok);
            }
        }
        grad[offset..offset + len].iter_mut().zip(&block).for_each(|(o, g)| *o += g);
    }
    Ok(grad)
}

/// Gradient-ascent step, optionally with Adam moments.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::GradientAscent => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
        };
        Self { kind, lr, m, v, t: 0 }
    }

    /// Parameter change for an ascent step along `grad`.
    pub fn delta(&mut self, grad: &[f64]) -> Vec<f64> {
        match self.kind {
            OptimizerKind::GradientAscent => grad.iter().map(|g| self.lr * g).collect(),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                grad.iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                        self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                        self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps)
                    })
                    .collect()
            }
        }
    }
}

/// Pool indices for the prompts of training step `step` (1-based).
///
/// Pools no larger than the batch are cycled in order, so each prompt appears
/// `batch / N` times when N divides the batch. Larger pools are walked
/// through a fresh seeded permutation per epoch.
pub fn assemble_batch(pool_len: usize, batch_prompts: usize, step: usize, seed: u64) -> Vec<usize> {
    if pool_len <= batch_prompts {
        return (0..batch_prompts).map(|j| j % pool_len).collect();
    }
    let start = (step - 1) * batch_prompts;
    let mut perms: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    (start..start + batch_prompts)
        .map(|p| {
            let epoch = p / pool_len;
            let perm = perms.entry(epoch).or_insert_with(|| {
                let mut v: Vec<usize> = (0..pool_len).collect();
                v.shuffle(&mut rng::stream(seed, Domain::Batch, epoch as u64, 0, 0));
                v
            });
            perm[p % pool_len]
        })
        .collect()
}

/// Named pool evaluated periodically during training.
#[derive(Debug, Clone)]
pub struct EvalPool<'a> {
    pub name: String,
    pub pool: &'a TaskPool,
}

pub struct TrainInputs<'a> {
    pub pool: &'a TaskPool,
    pub labels: &'a LabelSet,
    pub source: RewardSource,
    pub eval_pools: Vec<EvalPool<'a>>,
    pub run_id: String,
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub log: RunLog,
    /// Set when training aborted on a non-finite value.
    pub aborted: Option<Error>,
}

fn log_eval(log: &mut RunLog, policy: &Policy, inputs: &TrainInputs<'_>, step: usize, seed: u64, exec: Execution) -> Result<()> {
    for ep in &inputs.eval_pools {
        let s = analytics::evaluate(policy, ep.pool, rng::mix(seed, &[Domain::Eval as u64]), &DEFAULT_KS, exec)?;
        log.push(LogRecord::Eval {
            step,
            metric: format!("{}/avg@16", ep.name),
            value: s.avg,
        });
        for (k, v) in s.pass.iter().filter(|(k, _)| *k > 1) {
            log.push(LogRecord::Eval {
                step,
                metric: format!("{}/pass@{k}", ep.name),
                value: *v,
            });
        }
    }
    Ok(())
}

/// Runs on-policy GRPO: one gradient update per sampled batch.
pub fn train(mut policy: Policy, inputs: &TrainInputs<'_>, cfg: &UpdateConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    inputs.source.validate()?;
    if inputs.pool.is_empty() {
        return Err(Error::Input("training pool is empty".into()));
    }
    for inst in &inputs.pool.instances {
        policy.check_instance(inst)?;
    }
    let exec = cfg.execution;
    let reference = policy.snapshot();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, policy.num_params());
    let mut log = RunLog::new(inputs.run_id.clone(), inputs.pool.len());
    let eval_due = |t: usize| cfg.eval_interval > 0 && (t.is_multiple_of(cfg.eval_interval) || t == cfg.total_steps);
    if cfg.eval_interval > 0 {
        log_eval(&mut log, &policy, inputs, 0, seed, exec)?;
    }
    let vocab = policy.vocab().clone();

    for step in 1..=cfg.total_steps {
        let old = policy.snapshot();
        let slots = assemble_batch(inputs.pool.len(), cfg.batch_prompts, step, seed);
        let sampling = cfg.sampling();
        let batches: Vec<GroupBatch> = exec::map_indexed(exec, slots.len(), |j| {
            let inst = &inputs.pool.instances[slots[j]];
            let slot_seed = rng::mix(seed, &[Domain::Rollout as u64, step as u64, j as u64]);
            match inputs.source {
                RewardSource::MajorityVote {
                    vote_samples,
                    advantage_subset,
                } => rewards::majority_vote_rewards(&old, inst, vote_samples, advantage_subset, &sampling, slot_seed)
                    .map(|mv| mv.batch),
                _ => {
                    let b = old.sample_group(inst, &sampling, slot_seed);
                    rewards::assign_rewards(b, &inputs.source, inputs.labels, &vocab)
                }
            }
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let advantages: Vec<AdvantageVector> = batches
            .iter()
            .map(|b| compute_advantages(&b.rewards, cfg.baseline, cfg.std_floor))
            .collect();
        let out = surrogate_loss(&policy, &old, &reference, inputs.pool, &batches, &advantages, cfg)?;

        let mut per_prompt: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        let (mut total, mut count) = (0.0, 0usize);
        for b in &batches {
            let e = per_prompt.entry(b.question_id).or_default();
            for r in &b.rewards {
                e.0 += r;
                e.1 += 1;
                total += r;
                count += 1;
            }
        }
        let mean_reward = total / count.max(1) as f64;
        log.push(LogRecord::Step {
            step,
            mean_reward,
            per_prompt_mean_rewards: per_prompt
                .into_iter()
                .map(|(q, (s, c))| PromptReward {
                    question_id: q,
                    mean_reward: s / c as f64,
                })
                .collect(),
        });

        if let Some(bad) = out.gradient.iter().position(|g| !g.is_finite()) {
            let err = Error::NonFinite {
                step,
                what: format!("gradient component {bad}"),
            };
            log.push(LogRecord::Error {
                step,
                message: err.to_string(),
            });
            return Ok(TrainOutcome {
                policy,
                log,
                aborted: Some(err),
            });
        }
        let delta = optimizer.delta(&out.gradient);
        policy.apply_delta(&delta);
        if let Some(bad) = policy.params().iter().position(|p| !p.is_finite()) {
            let err = Error::NonFinite {
                step,
                what: format!("parameter {bad}"),
            };
            log.push(LogRecord::Error {
                step,
                message: err.to_string(),
            });
            return Ok(TrainOutcome {
                policy,
                log,
                aborted: Some(err),
            });
        }
        if eval_due(step) {
            log_eval(&mut log, &policy, inputs, step, seed, exec)?;
        }
    }
    Ok(TrainOutcome {
        policy,
        log,
        aborted: None,
    })
}

//! Explicit autoregressive categorical policies.
//!
//! A policy maps a context `(question, position, previous token)` to logits
//! over the vocabulary. Two parameterizations are provided:
//!
//! * **shared**: one weight matrix applied to
//!   `question features ⊕ one-hot(position) ⊕ one-hot(previous token or BOS)`,
//!   so whatever it learns on one question transfers to every other;
//! * **tabular**: an independent logit table per registered question and
//!   position, which can memorize but never transfers. Unregistered questions
//!   see all-zero logits (the uniform distribution).
//!
//! Probabilities are a softmax of the logits, hence strictly positive.
//! Temperature only affects sampling; log-probabilities and KL are evaluated
//! at temperature one.

use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::task_env::{TaskInstance, TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Shared,
    Tabular,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Mode::Shared),
            "tabular" => Ok(Mode::Tabular),
            other => Err(Error::Config(format!("unknown policy mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
enum Layout {
    Shared { feature_dim: usize },
    Tabular { question_ids: Vec<u64> },
}

/// Identifies the exact parameter state a batch was sampled under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SnapshotTag {
    pub lineage: u64,
    pub version: u64,
}

/// Where a policy came from: its initialization seed and how many updates
/// it has received since.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub init_seed: u64,
    pub id: u64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    vocab: Vocab,
    max_len: usize,
    layout: Layout,
    params: Vec<f64>,
    lineage: Lineage,
}

/// Initialization: parameters drawn uniformly from `[-scale, scale]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { scale: 0.01 }
    }
}

/// A frozen, cheaply clonable copy of a policy (π_ref, π_old).
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(Arc<Policy>);

impl Deref for Snapshot {
    type Target = Policy;
    fn deref(&self) -> &Policy {
        &self.0
    }
}

impl Snapshot {
    pub fn snapshot(&self) -> Snapshot {
        self.clone()
    }

    pub fn tag(&self) -> SnapshotTag {
        self.0.tag()
    }
}

/// One sampled response with what the sampling policy saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub question_id: u64,
    pub tokens: Vec<TokenId>,
    /// Log-probability of each token under the sampling distribution.
    pub logprobs_old: Vec<f64>,
    /// Full next-token distributions under the sampling distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dists_old: Option<Vec<Vec<f64>>>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// G responses to one question, plus their rewards once assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub question_id: u64,
    pub rollouts: Vec<Rollout>,
    /// Empty until rewards are assigned, then one per rollout.
    pub rewards: Vec<f64>,
    /// Parameter state the rollouts were sampled under.
    pub sampled_under: Option<SnapshotTag>,
}

impl GroupBatch {
    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn with_rewards(mut self, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != self.rollouts.len() {
            return Err(Error::Input(format!(
                "{} rewards for {} rollouts",
                rewards.len(),
                self.rollouts.len()
            )));
        }
        self.rewards = rewards;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            temperature: 1.0,
            max_len: 8,
        }
    }
}

/// Numerically stable softmax of `logits / temperature`.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - m) / temperature).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

/// Log-softmax at temperature one.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Exact KL(p ‖ q) for categorical distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Index of the categorical draw for uniform variate `u`.
fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub const CHECKPOINT_SCHEMA: &str = "policy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    version: u32,
    #[serde(flatten)]
    policy: Policy,
}

impl Policy {
    pub fn shared(vocab: Vocab, max_len: usize, feature_dim: usize, init: InitConfig, seed: u64) -> Self {
        let in_dim = feature_dim + max_len + vocab.size() + 1;
        let n = vocab.size() * in_dim;
        Self::build(vocab, max_len, Layout::Shared { feature_dim }, n, init, seed)
    }

    /// Tabular policy with one table per id in `question_ids`.
    pub fn tabular(vocab: Vocab, max_len: usize, question_ids: &[u64], init: InitConfig, seed: u64) -> Self {
        let mut ids = question_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let n = ids.len() * max_len * vocab.size();
        Self::build(vocab, max_len, Layout::Tabular { question_ids: ids }, n, init, seed)
    }

    fn build(vocab: Vocab, max_len: usize, layout: Layout, n: usize, init: InitConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Domain::Init, n as u64, 0, 0);
        let params = (0..n)
            .map(|_| {
                if init.scale > 0.0 {
                    rng.gen_range(-init.scale..=init.scale)
                } else {
                    0.0
                }
            })
            .collect();
        let mode_word = matches!(layout, Layout::Tabular { .. }) as u64;
        Self {
            vocab,
            max_len,
            layout,
            params,
            lineage: Lineage {
                init_seed: seed,
                id: rng::mix(seed, &[mode_word, n as u64]),
                version: 0,
            },
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn mode(&self) -> Mode {
        match self.layout {
            Layout::Shared { .. } => Mode::Shared,
            Layout::Tabular { .. } => Mode::Tabular,
        }
    }

    pub fn lineage(&self) -> Lineage {
        self.lineage
    }

    pub fn tag(&self) -> SnapshotTag {
        SnapshotTag {
            lineage: self.lineage.id,
            version: self.lineage.version,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Replaces the parameter vector, counting as an update.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        self.lineage.version += 1;
        Ok(())
    }

    /// `θ ← θ + delta`.
    pub fn apply_delta(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.params.len());
        self.params.iter_mut().zip(delta).for_each(|(p, d)| *p += d);
        self.lineage.version += 1;
    }

    /// Deep, immutable copy.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }

    fn in_dim(&self) -> usize {
        match &self.layout {
            Layout::Shared { feature_dim } => feature_dim + self.max_len + self.vocab.size() + 1,
            Layout::Tabular { .. } => 0,
        }
    }

    fn table_index(&self, question_id: u64) -> Option<usize> {
        match &self.layout {
            Layout::Tabular { question_ids } => question_ids.binary_search(&question_id).ok(),
            Layout::Shared { .. } => None,
        }
    }

    /// Parameter region that can influence `instance`: `(offset, len)`.
    /// `None` for a question a tabular policy holds no table for.
    pub fn param_block(&self, instance: &TaskInstance) -> Option<(usize, usize)> {
        match &self.layout {
            Layout::Shared { .. } => Some((0, self.params.len())),
            Layout::Tabular { .. } => {
                let stride = self.max_len * self.vocab.size();
                self.table_index(instance.id).map(|q| (q * stride, stride))
            }
        }
    }

    pub fn check_instance(&self, instance: &TaskInstance) -> Result<()> {
        if let Layout::Shared { feature_dim } = self.layout {
            if instance.features.len() != feature_dim {
                return Err(Error::Input(format!(
                    "task {} has {} features, policy expects {feature_dim}",
                    instance.id,
                    instance.features.len()
                )));
            }
        }
        Ok(())
    }

    /// Logits for the next token at `pos` after `prev` (`None` = start).
    pub fn logits_into(&self, instance: &TaskInstance, pos: usize, prev: Option<TokenId>, out: &mut [f64]) {
        let v_size = self.vocab.size();
        debug_assert!(pos < self.max_len);
        match &self.layout {
            Layout::Shared { feature_dim } => {
                let d = self.in_dim();
                let prev_idx = prev.map_or(v_size, |t| t as usize);
                let pos_col = feature_dim + pos;
                let prev_col = feature_dim + self.max_len + prev_idx;
                for (v, o) in out.iter_mut().enumerate().take(v_size) {
                    let row = &self.params[v * d..(v + 1) * d];
                    let mut z = row[pos_col] + row[prev_col];
                    for (w, x) in row[..*feature_dim].iter().zip(&instance.features) {
                        z += w * x;
                    }
                    *o = z;
                }
            }
            Layout::Tabular { .. } => match self.table_index(instance.id) {
                Some(q) => {
                    let start = (q * self.max_len + pos) * v_size;
                    out[..v_size].copy_from_slice(&self.params[start..start + v_size]);
                }
                None => out[..v_size].iter_mut().for_each(|z| *z = 0.0),
            },
        }
    }

    pub fn logits(&self, instance: &TaskInstance, pos: usize, prev: Option<TokenId>) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab.size()];
        self.logits_into(instance, pos, prev, &mut out);
        out
    }

    /// Next-token distribution at temperature one.
    pub fn next_token_dist(&self, instance: &TaskInstance, pos: usize, prev: Option<TokenId>) -> Vec<f64> {
        softmax(&self.logits(instance, pos, prev), 1.0)
    }

    /// Adds `Σ_v dlogits[v] · ∂logit_v/∂θ` into `block`, which covers the
    /// region returned by [`Policy::param_block`].
    pub fn backprop_logits(
        &self,
        instance: &TaskInstance,
        pos: usize,
        prev: Option<TokenId>,
        dlogits: &[f64],
        block: &mut [f64],
    ) {
        let v_size = self.vocab.size();
        match &self.layout {
            Layout::Shared { feature_dim } => {
                let d = self.in_dim();
                let prev_idx = prev.map_or(v_size, |t| t as usize);
                let pos_col = feature_dim + pos;
                let prev_col = feature_dim + self.max_len + prev_idx;
                for (v, &g) in dlogits.iter().enumerate().take(v_size) {
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut block[v * d..(v + 1) * d];
                    for (w, x) in row[..*feature_dim].iter_mut().zip(&instance.features) {
                        *w += g * x;
                    }
                    row[pos_col] += g;
                    row[prev_col] += g;
                }
            }
            Layout::Tabular { .. } => {
                let start = pos * v_size;
                block[start..start + v_size]
                    .iter_mut()
                    .zip(dlogits)
                    .for_each(|(b, g)| *b += g);
            }
        }
    }

    /// Exact per-token log-probabilities of `tokens` at temperature one.
    pub fn logprob(&self, instance: &TaskInstance, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.check_instance(instance)?;
        if tokens.len() > self.max_len {
            return Err(Error::Input(format!(
                "sequence of length {} exceeds max length {}",
                tokens.len(),
                self.max_len
            )));
        }
        let v_size = self.vocab.size();
        let mut logits = vec![0.0; v_size];
        let mut prev = None;
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                if t as usize >= v_size {
                    return Err(Error::Input(format!("token {t} out of range for V = {v_size}")));
                }
                self.logits_into(instance, pos, prev, &mut logits);
                prev = Some(t);
                Ok(log_softmax(&logits)[t as usize])
            })
            .collect()
    }

    /// Samples one response by ancestral sampling, stopping at eos or `max_len`.
    pub fn sample_rollout<R: Rng>(&self, instance: &TaskInstance, temperature: f64, max_len: usize, rng: &mut R) -> Rollout {
        let max_len = max_len.clamp(1, self.max_len);
        let v_size = self.vocab.size();
        let mut logits = vec![0.0; v_size];
        let mut tokens = Vec::with_capacity(max_len);
        let mut logprobs = Vec::with_capacity(max_len);
        let mut dists = Vec::with_capacity(max_len);
        let mut prev = None;
        for pos in 0..max_len {
            self.logits_into(instance, pos, prev, &mut logits);
            let probs = softmax(&logits, temperature);
            let t = draw(&probs, rng.gen::<f64>()) as TokenId;
            tokens.push(t);
            logprobs.push(probs[t as usize].ln());
            dists.push(probs);
            prev = Some(t);
            if t == self.vocab.eos() {
                break;
            }
        }
        Rollout {
            question_id: instance.id,
            tokens,
            logprobs_old: logprobs,
            dists_old: Some(dists),
        }
    }

    /// G independent responses; rollout `i` uses stream `(seed, question id, i)`.
    pub fn sample_group(&self, instance: &TaskInstance, cfg: &SamplingConfig, seed: u64) -> GroupBatch {
        let rollouts = (0..cfg.group_size)
            .map(|i| {
                let mut rng = rng::stream(seed, Domain::Rollout, instance.id, i as u64, 0);
                self.sample_rollout(instance, cfg.temperature, cfg.max_len, &mut rng)
            })
            .collect();
        GroupBatch {
            question_id: instance.id,
            rollouts,
            rewards: Vec::new(),
            sampled_under: Some(self.tag()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            schema: CHECKPOINT_SCHEMA.into(),
            version: CHECKPOINT_VERSION,
            policy: self.clone(),
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("");
        let version = value.get("version").and_then(|s| s.as_u64()).unwrap_or(0);
        if schema != CHECKPOINT_SCHEMA || version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                expected: CHECKPOINT_SCHEMA.into(),
                expected_version: CHECKPOINT_VERSION,
                found: format!("{schema} v{version}"),
            });
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        let p = ck.policy;
        let expected = match &p.layout {
            Layout::Shared { feature_dim } => p.vocab.size() * (feature_dim + p.max_len + p.vocab.size() + 1),
            Layout::Tabular { question_ids } => question_ids.len() * p.max_len * p.vocab.size(),
        };
        if p.params.len() != expected || p.params.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!("checkpoint {} has malformed parameters", path.display())));
        }
        Ok(p)
    }
}

//! Reward assignment under the supervision regimes: clean verifier,
//! corrupted labels, majority-vote pseudo-labels and self-certainty.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::policy::{GroupBatch, Policy, Rollout, SamplingConfig};
use crate::records::{self, Header};
use crate::rng::{self, Domain};
use crate::task_env::{extract_answer, verify_against, TaskInstance, TaskPool, TokenId, Vocab};

/// Which signal produces r_i.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSource {
    /// Ground-truth verification.
    #[default]
    Verifier,
    /// Verification against a [`LabelSet`] in which some labels were replaced.
    Corrupted,
    /// Agreement with the plurality answer of `vote_samples` fresh rollouts;
    /// the first `advantage_subset` of them form the training group.
    MajorityVote {
        vote_samples: usize,
        advantage_subset: usize,
    },
    /// Average KL from the uniform distribution to each next-token distribution.
    SelfCertainty,
}

impl RewardSource {
    pub fn majority_default() -> Self {
        Self::MajorityVote {
            vote_samples: 16,
            advantage_subset: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::MajorityVote {
            vote_samples,
            advantage_subset,
        } = *self
        {
            if advantage_subset == 0 || advantage_subset > vote_samples {
                return Err(Error::Config(format!(
                    "advantage subset {advantage_subset} must be in [1, {vote_samples}]"
                )));
            }
        }
        Ok(())
    }
}

/// Effective label per question, with the ground truth kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub gamma: f64,
    pub seed: u64,
    truth: BTreeMap<u64, TokenId>,
    effective: BTreeMap<u64, TokenId>,
    corrupted: BTreeMap<u64, bool>,
    /// Questions whose probe showed no incorrect answer (random fallback used).
    pub fallbacks: Vec<u64>,
}

/// On-disk form of one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub question_id: u64,
    pub label: TokenId,
    pub corrupted: bool,
    pub gamma: f64,
    pub seed: u64,
}

pub const LABELS_SCHEMA: &str = "label-set";
pub const LABELS_VERSION: u32 = 1;

impl LabelSet {
    /// Every label equals the ground truth.
    pub fn clean(pool: &TaskPool) -> Self {
        let truth: BTreeMap<u64, TokenId> = pool.instances.iter().map(|i| (i.id, i.truth)).collect();
        Self {
            gamma: 0.0,
            seed: 0,
            effective: truth.clone(),
            corrupted: truth.keys().map(|&k| (k, false)).collect(),
            truth,
            fallbacks: Vec::new(),
        }
    }

    pub fn truth(&self, question_id: u64) -> Option<TokenId> {
        self.truth.get(&question_id).copied()
    }

    pub fn label(&self, question_id: u64) -> Option<TokenId> {
        self.effective.get(&question_id).copied()
    }

    pub fn is_corrupted(&self, question_id: u64) -> bool {
        self.corrupted.get(&question_id).copied().unwrap_or(false)
    }

    pub fn num_corrupted(&self) -> usize {
        self.corrupted.values().filter(|&&c| c).count()
    }

    pub fn len(&self) -> usize {
        self.effective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.effective.is_empty()
    }

    pub fn records(&self) -> Vec<LabelRecord> {
        self.effective
            .iter()
            .map(|(&q, &label)| LabelRecord {
                question_id: q,
                label,
                corrupted: self.is_corrupted(q),
                gamma: self.gamma,
                seed: self.seed,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "gamma": self.gamma, "seed": self.seed, "fallbacks": self.fallbacks });
        records::write(path, &Header::new(LABELS_SCHEMA, LABELS_VERSION, meta), &self.records())
    }

    /// Replays a corruption run from its record file; ground truth comes from `pool`.
    pub fn load(path: &Path, pool: &TaskPool) -> Result<Self> {
        let (header, recs) = records::read::<LabelRecord>(path, LABELS_SCHEMA, LABELS_VERSION)?;
        let mut set = Self::clean(pool);
        set.gamma = header.meta.get("gamma").and_then(|g| g.as_f64()).unwrap_or(0.0);
        set.seed = header.meta.get("seed").and_then(|g| g.as_u64()).unwrap_or(0);
        set.fallbacks = header
            .meta
            .get("fallbacks")
            .and_then(|f| serde_json::from_value(f.clone()).ok())
            .unwrap_or_default();
        set.effective.clear();
        set.corrupted.clear();
        for r in recs {
            if !set.truth.contains_key(&r.question_id) {
                return Err(Error::Input(format!("label for unknown question {}", r.question_id)));
            }
            set.effective.insert(r.question_id, r.label);
            set.corrupted.insert(r.question_id, r.corrupted);
        }
        Ok(set)
    }
}

/// Number of prompts a corruption level flags: round(γ · N).
pub fn corrupted_count(gamma: f64, n: usize) -> usize {
    (gamma * n as f64).round() as usize
}

/// Most frequent verifier-incorrect answer among the probe rollouts, ties to
/// the smallest token id. `None` if every extracted answer was correct or absent.
pub fn most_frequent_incorrect(vocab: &Vocab, truth: TokenId, rollouts: &[Rollout]) -> Option<TokenId> {
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for r in rollouts {
        if let Some(a) = extract_answer(vocab, &r.tokens) {
            if a != truth {
                *counts.entry(a).or_default() += 1;
            }
        }
    }
    // BTreeMap iterates in ascending id order; keep the first maximum.
    counts
        .into_iter()
        .fold(None, |best: Option<(TokenId, usize)>, (t, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((t, c)),
        })
        .map(|(t, _)| t)
}

/// Replaces the labels of round(γ·N) uniformly chosen prompts with the
/// policy's most frequent incorrect answer over `probe_samples` rollouts.
pub fn corrupt_labels(
    pool: &TaskPool,
    policy: &Policy,
    gamma: f64,
    probe_samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<LabelSet> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    if probe_samples == 0 {
        return Err(Error::Config("probe_samples must be ≥ 1".into()));
    }
    let n = pool.len();
    let k = corrupted_count(gamma, n);
    let mut rng = rng::stream(seed, Domain::Corrupt, 0, 0, 0);
    let mut chosen: Vec<usize> = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();

    let vocab = policy.vocab().clone();
    let cfg = SamplingConfig {
        group_size: probe_samples,
        temperature: 1.0,
        max_len: policy.max_len(),
    };
    let probe_seed = rng::mix(seed, &[Domain::Corrupt as u64, 1]);
    let picks: Vec<(u64, TokenId, bool)> = exec::map_slice(exec, &chosen, |&i| {
        let inst = &pool.instances[i];
        let batch = policy.sample_group(inst, &cfg, probe_seed);
        match most_frequent_incorrect(&vocab, inst.truth, &batch.rollouts) {
            Some(t) => (inst.id, t, false),
            None => {
                let wrong: Vec<TokenId> = vocab.answer_tokens().iter().copied().filter(|&t| t != inst.truth).collect();
                let mut r = rng::stream(seed, Domain::Corrupt, inst.id, u64::MAX, 0);
                (inst.id, wrong[r.gen_range(0..wrong.len())], true)
            }
        }
    });

    let mut set = LabelSet::clean(pool);
    set.gamma = gamma;
    set.seed = seed;
    for (q, label, fallback) in picks {
        if fallback {
            log::warn!("question {q}: probe produced no incorrect answer, using random incorrect token {label}");
            set.fallbacks.push(q);
        }
        set.effective.insert(q, label);
        set.corrupted.insert(q, true);
    }
    Ok(set)
}

/// Plurality answer and whether the top count was tied (ties go to the
/// smallest token id). Rollouts without an answer do not vote.
pub fn plurality(answers: &[Option<TokenId>]) -> (Option<TokenId>, bool) {
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for a in answers.iter().flatten() {
        *counts.entry(*a).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    if top == 0 {
        return (None, false);
    }
    let mut winners = counts.iter().filter(|(_, &c)| c == top).map(|(&t, _)| t);
    let first = winners.next();
    (first, winners.next().is_some())
}

/// Majority-vote outcome for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct MajorityVote {
    pub pseudo_label: Option<TokenId>,
    pub tie: bool,
    /// Training group: the first `advantage_subset` votes, rewarded.
    pub batch: GroupBatch,
}

fn vote_rewards(vocab: &Vocab, rollouts: &[Rollout]) -> (Option<TokenId>, bool, Vec<f64>) {
    let answers: Vec<Option<TokenId>> = rollouts.iter().map(|r| extract_answer(vocab, &r.tokens)).collect();
    let (label, tie) = plurality(&answers);
    let rewards = answers
        .iter()
        .map(|a| match (a, label) {
            (Some(a), Some(l)) if *a == l => 1.0,
            _ => 0.0,
        })
        .collect();
    (label, tie, rewards)
}

/// Samples `vote_samples` rollouts, takes their plurality answer as a
/// pseudo-label and rewards agreement with it.
pub fn majority_vote_rewards(
    policy: &Policy,
    instance: &TaskInstance,
    vote_samples: usize,
    advantage_subset: usize,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<MajorityVote> {
    if advantage_subset > vote_samples || advantage_subset == 0 {
        return Err(Error::Config(format!(
            "advantage subset {advantage_subset} must be in [1, {vote_samples}]"
        )));
    }
    let cfg = SamplingConfig {
        group_size: vote_samples,
        ..*sampling
    };
    let votes = policy.sample_group(instance, &cfg, seed);
    Ok(majority_from_votes(policy.vocab(), votes, advantage_subset))
}

/// Majority vote over an already sampled vote set.
pub fn majority_from_votes(vocab: &Vocab, mut votes: GroupBatch, advantage_subset: usize) -> MajorityVote {
    let (pseudo_label, tie, mut rewards) = vote_rewards(vocab, &votes.rollouts);
    if pseudo_label.is_none() {
        log::warn!("question {}: no extractable answer among votes; all rewards 0", votes.question_id);
    } else if tie {
        log::debug!("question {}: tied majority vote, took smallest token id", votes.question_id);
    }
    votes.rollouts.truncate(advantage_subset);
    rewards.truncate(advantage_subset);
    votes.rewards = rewards;
    MajorityVote {
        pseudo_label,
        tie,
        batch: votes,
    }
}

/// Self-certainty of a rollout: mean over positions of KL(U ‖ p), natural log.
pub fn self_certainty(rollout: &Rollout, vocab_size: usize) -> Result<f64> {
    let dists = rollout
        .dists_old
        .as_ref()
        .ok_or_else(|| Error::Input("rollout carries no stored distributions".into()))?;
    if dists.is_empty() {
        return Err(Error::Input("empty rollout".into()));
    }
    let u = 1.0 / vocab_size as f64;
    let total: f64 = dists
        .iter()
        .map(|p| p.iter().map(|&pv| u * (u.ln() - pv.ln())).sum::<f64>())
        .sum();
    Ok(total / dists.len() as f64)
}

/// Fills in rewards for a sampled group.
pub fn assign_rewards(batch: GroupBatch, source: &RewardSource, labels: &LabelSet, vocab: &Vocab) -> Result<GroupBatch> {
    let q = batch.question_id;
    let rewards = match source {
        RewardSource::Verifier => {
            let truth = labels
                .truth(q)
                .ok_or_else(|| Error::Config(format!("no label for question {q}")))?;
            batch.rollouts.iter().map(|r| verify_against(vocab, truth, &r.tokens)).collect()
        }
        RewardSource::Corrupted => {
            let label = labels
                .label(q)
                .ok_or_else(|| Error::Config(format!("no label for question {q}")))?;
            batch.rollouts.iter().map(|r| verify_against(vocab, label, &r.tokens)).collect()
        }
        RewardSource::MajorityVote { .. } => vote_rewards(vocab, &batch.rollouts).2,
        RewardSource::SelfCertainty => batch
            .rollouts
            .iter()
            .map(|r| self_certainty(r, vocab.size()))
            .collect::<Result<Vec<_>>>()?,
    };
    batch.with_rewards(rewards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{InitConfig, Policy};
    use crate::task_env::{PoolSpec, TaskFamily};
    use rand::SeedableRng;

    fn pool(n: usize) -> TaskPool {
        TaskPool::generate(
            &PoolSpec {
                family: TaskFamily::ParityChain,
                count: n,
                levels: 5,
                seed: 3,
                first_id: 0,
            },
            &Vocab::toy(),
        )
        .unwrap()
    }

    fn rollout(tokens: &[TokenId]) -> Rollout {
        Rollout {
            question_id: 0,
            tokens: tokens.to_vec(),
            logprobs_old: vec![0.0; tokens.len()],
            dists_old: None,
        }
    }

    #[test]
    fn gamma_zero_is_clean() {
        let pool = pool(64);
        let policy = Policy::shared(Vocab::toy(), 8, 5, InitConfig::default(), 1);
        let set = corrupt_labels(&pool, &policy, 0.0, 96, 5, Execution::Parallel).unwrap();
        assert_eq!(set.num_corrupted(), 0);
        for inst in &pool.instances {
            assert_eq!(set.label(inst.id), Some(inst.truth));
        }
    }

    #[test]
    fn half_of_2048_is_1024_and_all_wrong() {
        let pool = pool(2048);
        let policy = Policy::shared(Vocab::toy(), 8, 5, InitConfig::default(), 1);
        let set = corrupt_labels(&pool, &policy, 0.5, 16, 9, Execution::Parallel).unwrap();
        assert_eq!(set.num_corrupted(), 1024);
        for inst in &pool.instances {
            if set.is_corrupted(inst.id) {
                assert_ne!(set.label(inst.id), Some(inst.truth));
            } else {
                assert_eq!(set.label(inst.id), Some(inst.truth));
            }
        }
    }

    #[test]
    fn label_set_replays_from_file() {
        let pool = pool(40);
        let policy = Policy::shared(Vocab::toy(), 8, 5, InitConfig::default(), 1);
        let set = corrupt_labels(&pool, &policy, 0.3, 8, 2, Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.jsonl");
        set.save(&p).unwrap();
        assert_eq!(LabelSet::load(&p, &pool).unwrap(), set);
    }

    #[test]
    fn corrupted_label_matches_multinomial_argmax_oracle() {
        // Answers {1, 2, 3}; token 1 is correct with p = 0.5, wrong-A = 2 with
        // 0.3, wrong-B = 3 with 0.2. One-token responses.
        let vocab = Vocab::new(4, vec![1, 2, 3], 0).unwrap();
        let trials = 10_000usize;
        let instances: Vec<TaskInstance> = (0..trials as u64)
            .map(|id| TaskInstance {
                id,
                features: vec![],
                truth: 1,
                level: 1,
            })
            .collect();
        let spec = PoolSpec {
            family: TaskFamily::ParityChain,
            count: trials,
            levels: 1,
            seed: 0,
            first_id: 0,
        };
        let pool = TaskPool::from_parts(spec, vocab.clone(), instances).unwrap();
        let ids: Vec<u64> = (0..trials as u64).collect();
        let mut policy = Policy::tabular(vocab, 1, &ids, InitConfig { scale: 0.0 }, 0);
        let row = [-800.0, 0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        policy.set_params(row.iter().copied().cycle().take(4 * trials).collect()).unwrap();
        let set = corrupt_labels(&pool, &policy, 1.0, 96, 17, Execution::Parallel).unwrap();
        let impl_a = ids.iter().filter(|&&q| set.label(q) == Some(2)).count() as f64 / trials as f64;

        // Oracle: direct multinomial draws, argmax over the two wrong answers
        // with ties to the smaller id.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12345);
        let mut wins = 0usize;
        for _ in 0..trials {
            let (mut a, mut b) = (0, 0);
            for _ in 0..96 {
                let u: f64 = rng.gen();
                if u < 0.5 {
                } else if u < 0.8 {
                    a += 1;
                } else {
                    b += 1;
                }
            }
            if a >= b {
                wins += 1;
            }
        }
        let oracle_a = wins as f64 / trials as f64;
        let se = (2.0 * oracle_a * (1.0 - oracle_a) / trials as f64).sqrt();
        assert!((impl_a - oracle_a).abs() < 3.0 * se.max(1e-4), "impl {impl_a} oracle {oracle_a}");
    }

    #[test]
    fn fallback_when_probe_never_wrong() {
        let vocab = Vocab::new(4, vec![1, 2], 0).unwrap();
        let inst = TaskInstance {
            id: 0,
            features: vec![],
            truth: 1,
            level: 1,
        };
        let spec = PoolSpec {
            family: TaskFamily::ParityChain,
            count: 1,
            levels: 1,
            seed: 0,
            first_id: 0,
        };
        let pool = TaskPool::from_parts(spec, vocab.clone(), vec![inst]).unwrap();
        let mut policy = Policy::tabular(vocab, 1, &[0], InitConfig { scale: 0.0 }, 0);
        policy.set_params(vec![-800.0, 50.0, -800.0, -800.0]).unwrap();
        let set = corrupt_labels(&pool, &policy, 1.0, 32, 1, Execution::Sequential).unwrap();
        assert_eq!(set.label(0), Some(2));
        assert_eq!(set.fallbacks, vec![0]);
    }

    #[test]
    fn label_substitution_semantics() {
        let vocab = Vocab::toy();
        let pool = pool(4);
        let mut labels = LabelSet::clean(&pool);
        let q = pool.instances[0].id;
        let truth = pool.instances[0].truth;
        let wrong = vocab.answer_tokens().iter().copied().find(|&t| t != truth).unwrap();
        let other = vocab.answer_tokens().iter().copied().find(|&t| t != truth && t != wrong).unwrap();
        labels.effective.insert(q, wrong);
        labels.corrupted.insert(q, true);
        let batch = GroupBatch {
            question_id: q,
            rollouts: vec![rollout(&[truth, 0]), rollout(&[5, wrong]), rollout(&[other])],
            rewards: vec![],
            sampled_under: None,
        };
        let clean = assign_rewards(batch.clone(), &RewardSource::Verifier, &labels, &vocab).unwrap();
        assert_eq!(clean.rewards, vec![1.0, 0.0, 0.0]);
        let corrupted = assign_rewards(batch, &RewardSource::Corrupted, &labels, &vocab).unwrap();
        assert_eq!(corrupted.rewards, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn missing_label_is_config_error() {
        let vocab = Vocab::toy();
        let labels = LabelSet::clean(&pool(2));
        let batch = GroupBatch {
            question_id: 999,
            rollouts: vec![rollout(&[1])],
            rewards: vec![],
            sampled_under: None,
        };
        assert!(matches!(
            assign_rewards(batch, &RewardSource::Corrupted, &labels, &vocab),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn plurality_rules() {
        let a = Some(3);
        let b = Some(1);
        let mut v = vec![a; 9];
        v.extend(vec![b; 7]);
        assert_eq!(plurality(&v), (Some(3), false));
        let mut v = vec![a; 8];
        v.extend(vec![b; 8]);
        assert_eq!(plurality(&v), (Some(1), true));
        assert_eq!(plurality(&[None, None]), (None, false));
    }

    #[test]
    fn consensus_rewards_everyone_even_when_wrong() {
        let vocab = Vocab::toy();
        let votes = GroupBatch {
            question_id: 0,
            rollouts: (0..16).map(|_| rollout(&[6, 4, 0])).collect(),
            rewards: vec![],
            sampled_under: None,
        };
        let mv = majority_from_votes(&vocab, votes, 8);
        assert_eq!(mv.pseudo_label, Some(4));
        assert_eq!(mv.batch.rewards, vec![1.0; 8]);
        assert_eq!(mv.batch.rollouts.len(), 8);
    }

    #[test]
    fn first_eight_rewarded_by_indicator() {
        let vocab = Vocab::toy();
        let mut toks: Vec<Vec<TokenId>> = vec![vec![2]; 9];
        toks.extend(vec![vec![3]; 7]);
        // interleave so the first eight contain both answers
        toks.swap(1, 10);
        toks.swap(4, 12);
        let votes = GroupBatch {
            question_id: 0,
            rollouts: toks.iter().map(|t| rollout(t)).collect(),
            rewards: vec![],
            sampled_under: None,
        };
        let mv = majority_from_votes(&vocab, votes, 8);
        assert_eq!(mv.pseudo_label, Some(2));
        let expected: Vec<f64> = toks[..8].iter().map(|t| (t[0] == 2) as u8 as f64).collect();
        assert_eq!(mv.batch.rewards, expected);
    }

    #[test]
    fn no_answers_gives_zero_rewards() {
        let vocab = Vocab::toy();
        let votes = GroupBatch {
            question_id: 0,
            rollouts: (0..4).map(|_| rollout(&[5, 0])).collect(),
            rewards: vec![],
            sampled_under: None,
        };
        let mv = majority_from_votes(&vocab, votes, 2);
        assert_eq!(mv.pseudo_label, None);
        assert_eq!(mv.batch.rewards, vec![0.0, 0.0]);
    }

    fn with_dists(dists: Vec<Vec<f64>>) -> Rollout {
        Rollout {
            question_id: 0,
            tokens: vec![0; dists.len()],
            logprobs_old: vec![0.0; dists.len()],
            dists_old: Some(dists),
        }
    }

    #[test]
    fn self_certainty_values() {
        assert_eq!(self_certainty(&with_dists(vec![vec![0.25; 4]; 3]), 4).unwrap(), 0.0);
        let sc = self_certainty(&with_dists(vec![vec![0.9, 0.1]]), 2).unwrap();
        let oracle = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((sc - oracle).abs() < 1e-15);
        assert!((sc - 0.51083).abs() < 1e-5);
        let a = self_certainty(&with_dists(vec![vec![0.7, 0.3]]), 2).unwrap();
        let b = self_certainty(&with_dists(vec![vec![0.2, 0.8]]), 2).unwrap();
        let ab = self_certainty(&with_dists(vec![vec![0.7, 0.3], vec![0.2, 0.8]]), 2).unwrap();
        assert!((ab - (a + b) / 2.0).abs() < 1e-15);
        assert!(matches!(self_certainty(&rollout(&[1]), 8), Err(Error::Input(_))));
    }

    #[test]
    fn self_certainty_grows_along_temperature_path() {
        for z in [0.3, 1.0, 4.0] {
            let mut last = -1.0;
            for k in 0..40 {
                let temp = 10.0 * 0.85f64.powi(k);
                let p = crate::policy::softmax(&[z, 0.0], temp);
                let sc = self_certainty(&with_dists(vec![p]), 2).unwrap();
                assert!(sc > last, "z={z} k={k}");
                last = sc;
            }
        }
    }
}

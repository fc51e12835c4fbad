//! Difficulty probing (solve@16), filtering of trivial and unsolvable items,
//! and stratified round-robin sampling of training subsets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analytics::EVAL_SAMPLES;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::policy::{Policy, SamplingConfig};
use crate::records::{self, Header};
use crate::rng::{self, Domain};
use crate::task_env::{verify, TaskPool};

/// Training-set sizes used throughout the experiments.
pub const N_PRESETS: [usize; 5] = [8, 32, 64, 512, 2048];

/// Number of difficulty bins; bin `i` holds items solved `i` times out of 16.
pub const NUM_BINS: usize = EVAL_SAMPLES - 1;

const PROFILE_SCHEMA: &str = "difficulty-profile";
const SAMPLE_SCHEMA: &str = "stratified-sample";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyProfile {
    /// Question id → solve@16.
    pub counts: BTreeMap<u64, u32>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ProfileRecord {
    question_id: u64,
    solve16: u32,
}

/// Counts correct answers among 16 temperature-1 samples per instance.
pub fn estimate_solve16(policy: &Policy, pool: &TaskPool, seed: u64, exec: Execution) -> Result<DifficultyProfile> {
    for inst in &pool.instances {
        policy.check_instance(inst)?;
    }
    let cfg = SamplingConfig {
        group_size: EVAL_SAMPLES,
        temperature: 1.0,
        max_len: policy.max_len(),
    };
    let probe_seed = rng::mix(seed, &[Domain::Probe as u64]);
    let counts = exec::map_slice(exec, &pool.instances, |inst| {
        let batch = policy.sample_group(inst, &cfg, probe_seed);
        let c = batch
            .rollouts
            .iter()
            .filter(|r| verify(policy.vocab(), inst, &r.tokens) == 1.0)
            .count() as u32;
        (inst.id, c)
    });
    Ok(DifficultyProfile {
        counts: counts.into_iter().collect(),
        seed,
    })
}

impl DifficultyProfile {
    /// Ids with solve@16 strictly between 0 and 16, grouped by count.
    pub fn bins(&self) -> [Vec<u64>; NUM_BINS] {
        let mut bins: [Vec<u64>; NUM_BINS] = Default::default();
        for (&id, &c) in &self.counts {
            if (1..=NUM_BINS as u32).contains(&c) {
                bins[c as usize - 1].push(id);
            }
        }
        bins
    }

    pub fn retained(&self) -> usize {
        self.bins().iter().map(Vec::len).sum()
    }

    /// Count of items per solve@16 value 0..=16.
    pub fn histogram(&self) -> [usize; EVAL_SAMPLES + 1] {
        let mut h = [0; EVAL_SAMPLES + 1];
        self.counts.values().for_each(|&c| h[c as usize] += 1);
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let recs: Vec<ProfileRecord> = self
            .counts
            .iter()
            .map(|(&question_id, &solve16)| ProfileRecord { question_id, solve16 })
            .collect();
        records::write(path, &Header::new(PROFILE_SCHEMA, 1, json!({ "seed": self.seed })), &recs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, recs) = records::read::<ProfileRecord>(path, PROFILE_SCHEMA, 1)?;
        let seed = header.meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut counts = BTreeMap::new();
        for r in recs {
            if r.solve16 > EVAL_SAMPLES as u32 {
                return Err(Error::Input(format!(
                    "{}: question {} has solve@16 = {}",
                    path.display(),
                    r.question_id,
                    r.solve16
                )));
            }
            if counts.insert(r.question_id, r.solve16).is_some() {
                return Err(Error::Input(format!("{}: duplicate question {}", path.display(), r.question_id)));
            }
        }
        Ok(Self { counts, seed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedSample {
    /// Selected ids in draw order.
    pub ids: Vec<u64>,
    /// Bin (= solve@16) of each selected id, parallel to `ids`.
    pub bins: Vec<u32>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    question_id: u64,
    bin: u32,
}

/// Drops items with solve@16 ∈ {0, 16}, then cycles through bins 1..=15
/// taking one uniformly random remaining item from each nonempty bin,
/// stopping as soon as `n` items are selected.
pub fn filter_and_sample(profile: &DifficultyProfile, n: usize, seed: u64) -> Result<StratifiedSample> {
    let mut bins = profile.bins();
    let available: usize = bins.iter().map(Vec::len).sum();
    if available < n {
        return Err(Error::Shortfall { requested: n, available });
    }
    let mut rng = rng::stream(seed, Domain::Stratify, n as u64, 0, 0);
    let mut out = StratifiedSample {
        ids: Vec::with_capacity(n),
        bins: Vec::with_capacity(n),
        seed,
    };
    'outer: while out.ids.len() < n {
        for (i, bin) in bins.iter_mut().enumerate() {
            if bin.is_empty() {
                continue;
            }
            let k = rng.gen_range(0..bin.len());
            out.ids.push(bin.remove(k));
            out.bins.push(i as u32 + 1);
            if out.ids.len() == n {
                break 'outer;
            }
        }
    }
    Ok(out)
}

impl StratifiedSample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let recs: Vec<SampleRecord> = self
            .ids
            .iter()
            .zip(&self.bins)
            .map(|(&question_id, &bin)| SampleRecord { question_id, bin })
            .collect();
        let meta = json!({ "seed": self.seed, "n": self.ids.len() });
        records::write(path, &Header::new(SAMPLE_SCHEMA, 1, meta), &recs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, recs) = records::read::<SampleRecord>(path, SAMPLE_SCHEMA, 1)?;
        let seed = header.meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(Self {
            ids: recs.iter().map(|r| r.question_id).collect(),
            bins: recs.iter().map(|r| r.bin).collect(),
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::InitConfig;
    use crate::task_env::{PoolSpec, TaskFamily, Vocab};
    use std::collections::BTreeSet;

    fn profile_from_bins(sizes: &[usize]) -> DifficultyProfile {
        let mut counts = BTreeMap::new();
        let mut id = 0;
        for (i, &s) in sizes.iter().enumerate() {
            for _ in 0..s {
                counts.insert(id, i as u32 + 1);
                id += 1;
            }
        }
        // Filtered-out items should never be drawn.
        counts.insert(10_000, 0);
        counts.insert(10_001, 16);
        DifficultyProfile { counts, seed: 0 }
    }

    #[test]
    fn first_round_visits_bins_in_order() {
        let p = profile_from_bins(&[3; 15]);
        let s = filter_and_sample(&p, 8, 1).unwrap();
        assert_eq!(s.bins, (1..=8).collect::<Vec<u32>>());
    }

    #[test]
    fn traced_small_case() {
        let p = profile_from_bins(&[2, 0, 1]);
        let s = filter_and_sample(&p, 3, 4).unwrap();
        assert_eq!(s.bins, vec![1, 3, 1]);
    }

    #[test]
    fn exhaustion_is_a_permutation() {
        let p = profile_from_bins(&[2, 5, 0, 1, 3]);
        let s = filter_and_sample(&p, 11, 9).unwrap();
        let got: BTreeSet<u64> = s.ids.iter().copied().collect();
        assert_eq!(got, (0..11).collect());
        assert_eq!(s.ids.len(), 11);
    }

    #[test]
    fn shortfall_is_reported() {
        let p = profile_from_bins(&[1, 1]);
        match filter_and_sample(&p, 3, 0) {
            Err(Error::Shortfall { requested: 3, available: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn occupancy_is_balanced() {
        let p = profile_from_bins(&[10; 15]);
        for n in [8, 32, 64, 100] {
            let s = filter_and_sample(&p, n, n as u64).unwrap();
            let mut occ = [0usize; 15];
            s.bins.iter().for_each(|&b| occ[b as usize - 1] += 1);
            let (lo, hi) = (occ.iter().min().unwrap(), occ.iter().max().unwrap());
            assert!(hi - lo <= 1, "{occ:?}");
        }
    }

    #[test]
    fn draws_depend_on_seed_within_bins() {
        let p = profile_from_bins(&[20; 15]);
        let a = filter_and_sample(&p, 30, 1).unwrap();
        let b = filter_and_sample(&p, 30, 2).unwrap();
        assert_eq!(a.bins, b.bins);
        assert_ne!(a.ids, b.ids);
        assert_eq!(a, filter_and_sample(&p, 30, 1).unwrap());
    }

    fn single_token_setup(count: usize) -> (TaskPool, Policy) {
        let vocab = Vocab::new(5, vec![1, 2, 3, 4], 0).unwrap();
        let pool = TaskPool::generate(
            &PoolSpec {
                family: TaskFamily::ParityChain,
                count,
                levels: 3,
                seed: 2,
                first_id: 0,
            },
            &vocab,
        )
        .unwrap();
        let ids: Vec<u64> = pool.instances.iter().map(|i| i.id).collect();
        let policy = Policy::tabular(vocab, 1, &ids, InitConfig { scale: 0.0 }, 0);
        (pool, policy)
    }

    #[test]
    fn degenerate_policies_give_extreme_counts() {
        let (pool, mut policy) = single_token_setup(20);
        let set = |policy: &mut Policy, correct: bool| {
            let mut params = vec![0.0; policy.num_params()];
            for (q, inst) in pool.instances.iter().enumerate() {
                let wrong = if inst.truth == 1 { 2 } else { 1 };
                let tok = if correct { inst.truth } else { wrong };
                params[q * 5 + tok as usize] = 60.0;
            }
            policy.set_params(params).unwrap();
        };
        set(&mut policy, true);
        let p = estimate_solve16(&policy, &pool, 1, Execution::Parallel).unwrap();
        assert!(p.counts.values().all(|&c| c == 16));
        set(&mut policy, false);
        let p = estimate_solve16(&policy, &pool, 1, Execution::Parallel).unwrap();
        assert!(p.counts.values().all(|&c| c == 0));
    }

    #[test]
    fn uniform_policy_counts_are_binomial() {
        let (pool, mut policy) = single_token_setup(1000);
        let mut params = vec![0.0; policy.num_params()];
        (0..pool.len()).for_each(|q| params[q * 5] = -60.0);
        policy.set_params(params).unwrap();
        let p = estimate_solve16(&policy, &pool, 3, Execution::Parallel).unwrap();
        let mean = p.counts.values().map(|&c| c as f64).sum::<f64>() / 1000.0;
        let sigma = (16.0f64 * 0.25 * 0.75 / 1000.0).sqrt();
        assert!((mean - 4.0).abs() < 3.0 * sigma, "mean {mean}");
        let seq = estimate_solve16(&policy, &pool, 3, Execution::Sequential).unwrap();
        assert_eq!(p, seq);
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = profile_from_bins(&[2, 3, 1]);
        p.save(&dir.path().join("p.jsonl")).unwrap();
        assert_eq!(DifficultyProfile::load(&dir.path().join("p.jsonl")).unwrap(), p);
        let s = filter_and_sample(&p, 5, 7).unwrap();
        s.save(&dir.path().join("s.jsonl")).unwrap();
        assert_eq!(StratifiedSample::load(&dir.path().join("s.jsonl")).unwrap(), s);
    }
}

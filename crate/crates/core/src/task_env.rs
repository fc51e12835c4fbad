//! Synthetic verifiable tasks: vocabulary, task generation, answer
//! extraction and the binary verifier.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{self, Header};
use crate::rng::{self, Domain};

pub type TokenId = u32;

/// Token vocabulary: a reserved end-of-sequence id plus a set of ids that
/// count as committed final answers. Everything else is a reasoning token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    answer_tokens: Vec<TokenId>,
    eos: TokenId,
}

impl Vocab {
    pub fn new(size: usize, mut answer_tokens: Vec<TokenId>, eos: TokenId) -> Result<Self> {
        if size < 4 {
            return Err(Error::Config(format!("vocabulary size {size} < 4")));
        }
        answer_tokens.sort_unstable();
        answer_tokens.dedup();
        if answer_tokens.is_empty() {
            return Err(Error::Config("answer token set is empty".into()));
        }
        if eos as usize >= size || answer_tokens.iter().any(|&t| t as usize >= size) {
            return Err(Error::Config(format!("token id out of range for V = {size}")));
        }
        if answer_tokens.contains(&eos) {
            return Err(Error::Config("eos cannot be an answer token".into()));
        }
        Ok(Self {
            size,
            answer_tokens,
            eos,
        })
    }

    /// V = 8 with eos = 0, answers {1, 2, 3, 4} and reasoning tokens {5, 6, 7}.
    pub fn toy() -> Self {
        Self::new(8, vec![1, 2, 3, 4], 0).expect("toy vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    /// Answer tokens in ascending id order.
    pub fn answer_tokens(&self) -> &[TokenId] {
        &self.answer_tokens
    }

    pub fn is_answer(&self, t: TokenId) -> bool {
        self.answer_tokens.binary_search(&t).is_ok()
    }

    pub fn is_reasoning(&self, t: TokenId) -> bool {
        t != self.eos && !self.is_answer(t)
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::toy()
    }
}

/// Generator family for synthetic tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// Features hold the running parities of a random bit-string whose length
    /// equals the difficulty level; the answer is the final parity.
    #[default]
    ParityChain,
    /// Features hold a ±1 bit-string of length equal to the level; the answer
    /// is whether the ones form a strict majority.
    Majority,
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity-chain" | "parity" => Ok(Self::ParityChain),
            "majority" => Ok(Self::Majority),
            other => Err(Error::Config(format!("unknown task family '{other}'"))),
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ParityChain => "parity-chain",
            Self::Majority => "majority",
        })
    }
}

/// One verifiable question. Field order is the on-disk record order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub features: Vec<f64>,
    pub truth: TokenId,
    pub level: u32,
}

/// Parameters that fully determine a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub family: TaskFamily,
    pub count: usize,
    pub levels: u32,
    pub seed: u64,
    /// Id of the first instance; later ids follow consecutively.
    #[serde(default)]
    pub first_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPool {
    pub spec: PoolSpec,
    pub vocab: Vocab,
    pub instances: Vec<TaskInstance>,
    index: HashMap<u64, usize>,
}

pub const POOL_SCHEMA: &str = "task-pool";
pub const POOL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PoolMeta {
    spec: PoolSpec,
    vocab: Vocab,
}

impl TaskPool {
    pub fn generate(spec: &PoolSpec, vocab: &Vocab) -> Result<Self> {
        if spec.count == 0 {
            return Err(Error::Config("pool count must be ≥ 1".into()));
        }
        if spec.levels == 0 {
            return Err(Error::Config("levels must be ≥ 1".into()));
        }
        if vocab.answer_tokens().len() < 2 {
            return Err(Error::Config(format!(
                "family {} needs at least two answer tokens",
                spec.family
            )));
        }
        let dim = spec.levels as usize;
        let instances = (0..spec.count)
            .map(|i| {
                let level = (i as u32 % spec.levels) + 1;
                let mut rng = rng::stream(spec.seed, Domain::TaskGen, i as u64, 0, 0);
                let bits: Vec<bool> = (0..level).map(|_| rng.gen::<bool>()).collect();
                let (features, label) = encode(spec.family, &bits, dim);
                TaskInstance {
                    id: spec.first_id + i as u64,
                    features,
                    truth: vocab.answer_tokens()[label],
                    level,
                }
            })
            .collect();
        Self::from_parts(spec.clone(), vocab.clone(), instances)
    }

    pub fn from_parts(spec: PoolSpec, vocab: Vocab, instances: Vec<TaskInstance>) -> Result<Self> {
        let mut index = HashMap::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            if index.insert(inst.id, i).is_some() {
                return Err(Error::Input(format!("duplicate task id {}", inst.id)));
            }
            if !vocab.is_answer(inst.truth) {
                return Err(Error::Input(format!("task {} truth is not an answer token", inst.id)));
            }
            if inst.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("task {} has non-finite features", inst.id)));
            }
        }
        Ok(Self {
            spec,
            vocab,
            instances,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.instances.first().map_or(0, |i| i.features.len())
    }

    pub fn get(&self, id: u64) -> Option<&TaskInstance> {
        self.index.get(&id).map(|&i| &self.instances[i])
    }

    /// Sub-pool with the given ids, in the given order.
    pub fn subset(&self, ids: &[u64]) -> Result<Self> {
        let instances = ids
            .iter()
            .map(|id| {
                self.get(*id)
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("task id {id} not in pool")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(self.spec.clone(), self.vocab.clone(), instances)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(PoolMeta {
            spec: self.spec.clone(),
            vocab: self.vocab.clone(),
        })?;
        records::write(path, &Header::new(POOL_SCHEMA, POOL_VERSION, meta), &self.instances)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, instances) = records::read::<TaskInstance>(path, POOL_SCHEMA, POOL_VERSION)?;
        let meta: PoolMeta = serde_json::from_value(header.meta)?;
        Self::from_parts(meta.spec, meta.vocab, instances)
    }
}

fn encode(family: TaskFamily, bits: &[bool], dim: usize) -> (Vec<f64>, usize) {
    let sign = |b: bool| if b { 1.0 } else { -1.0 };
    let mut features = vec![0.0; dim];
    match family {
        TaskFamily::ParityChain => {
            let mut parity = false;
            for (j, &b) in bits.iter().enumerate() {
                parity ^= b;
                features[j] = sign(parity);
            }
            (features, parity as usize)
        }
        TaskFamily::Majority => {
            let ones = bits.iter().filter(|&&b| b).count();
            for (j, &b) in bits.iter().enumerate() {
                features[j] = sign(b);
            }
            (features, (2 * ones > bits.len()) as usize)
        }
    }
}

/// Last token of the response that is an answer token, if any.
pub fn extract_answer(vocab: &Vocab, tokens: &[TokenId]) -> Option<TokenId> {
    tokens.iter().rev().copied().find(|&t| vocab.is_answer(t))
}

/// Binary verifier: 1 iff the extracted final answer equals `label`.
pub fn verify_against(vocab: &Vocab, label: TokenId, tokens: &[TokenId]) -> f64 {
    match extract_answer(vocab, tokens) {
        Some(a) if a == label => 1.0,
        _ => 0.0,
    }
}

/// Binary verifier against the instance's ground truth. No format credit.
pub fn verify(vocab: &Vocab, instance: &TaskInstance, tokens: &[TokenId]) -> f64 {
    verify_against(vocab, instance.truth, tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize, levels: u32, seed: u64) -> PoolSpec {
        PoolSpec {
            family: TaskFamily::ParityChain,
            count,
            levels,
            seed,
            first_id: 0,
        }
    }

    #[test]
    fn levels_cycle_uniformly() {
        let pool = TaskPool::generate(&spec(10, 5, 7), &Vocab::toy()).unwrap();
        assert_eq!(pool.len(), 10);
        for level in 1..=5 {
            assert_eq!(pool.instances.iter().filter(|i| i.level == level).count(), 2);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = TaskPool::generate(&spec(10, 5, 7), &Vocab::toy()).unwrap();
        let b = TaskPool::generate(&spec(10, 5, 7), &Vocab::toy()).unwrap();
        assert_eq!(a, b);
        let c = TaskPool::generate(&spec(10, 5, 8), &Vocab::toy()).unwrap();
        assert_ne!(a.instances, c.instances);
    }

    #[test]
    fn fewer_instances_than_levels() {
        let pool = TaskPool::generate(&spec(3, 5, 1), &Vocab::toy()).unwrap();
        let levels: Vec<u32> = pool.instances.iter().map(|i| i.level).collect();
        assert_eq!(levels, vec![1, 2, 3]);
    }

    #[test]
    fn unknown_family_is_config_error() {
        assert!(matches!("sudoku".parse::<TaskFamily>(), Err(Error::Config(_))));
    }

    #[test]
    fn parity_chain_features_decode_to_truth() {
        let vocab = Vocab::toy();
        let pool = TaskPool::generate(&spec(200, 5, 3), &vocab).unwrap();
        for inst in &pool.instances {
            let last = inst.features[inst.level as usize - 1];
            assert!(inst.features[inst.level as usize..].iter().all(|&x| x == 0.0));
            let parity = (last > 0.0) as usize;
            assert_eq!(inst.truth, vocab.answer_tokens()[parity]);
        }
    }

    #[test]
    fn extraction_rules() {
        let v = Vocab::new(4, vec![1, 2], 0).unwrap();
        assert_eq!(extract_answer(&v, &[3, 1, 2, 0]), Some(2));
        assert_eq!(extract_answer(&v, &[0]), None);
        let v1 = Vocab::new(4, vec![1], 0).unwrap();
        assert_eq!(extract_answer(&v1, &[1, 1, 1]), Some(1));
    }

    #[test]
    fn verify_basic_cases() {
        let v = Vocab::new(4, vec![1, 2], 0).unwrap();
        let inst = TaskInstance {
            id: 0,
            features: vec![1.0],
            truth: 2,
            level: 1,
        };
        assert_eq!(verify(&v, &inst, &[3, 2]), 1.0);
        assert_eq!(verify(&v, &inst, &[3, 1]), 0.0);
        assert_eq!(verify(&v, &inst, &[3, 3, 0]), 0.0);
    }

    /// Independent oracle: scan left to right remembering the latest answer token.
    fn oracle_extract(answers: &[TokenId], tokens: &[TokenId]) -> Option<TokenId> {
        let mut last = None;
        for &t in tokens {
            if answers.contains(&t) {
                last = Some(t);
            }
        }
        last
    }

    #[test]
    fn verify_matches_exhaustive_oracle() {
        for (size, answers) in [(4usize, vec![1u32, 2]), (5, vec![1, 3, 4])] {
            let v = Vocab::new(size, answers.clone(), 0).unwrap();
            for &truth in &answers {
                let inst = TaskInstance {
                    id: 0,
                    features: vec![],
                    truth,
                    level: 1,
                };
                for len in 1..=4u32 {
                    for code in 0..(size as u64).pow(len) {
                        let mut c = code;
                        let tokens: Vec<TokenId> = (0..len)
                            .map(|_| {
                                let t = (c % size as u64) as TokenId;
                                c /= size as u64;
                                t
                            })
                            .collect();
                        let expected = (oracle_extract(&answers, &tokens) == Some(truth)) as u8 as f64;
                        assert_eq!(verify(&v, &inst, &tokens), expected, "{tokens:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn pool_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let pool = TaskPool::generate(&spec(17, 4, 99), &Vocab::toy()).unwrap();
        pool.save(&path).unwrap();
        assert_eq!(TaskPool::load(&path).unwrap(), pool);
        let first = std::fs::read_to_string(&path).unwrap();
        let rec_line = first.lines().nth(1).unwrap();
        let keys: Vec<&str> = ["\"id\"", "\"features\"", "\"truth\"", "\"level\""]
            .into_iter()
            .collect();
        let positions: Vec<usize> = keys.iter().map(|k| rec_line.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }
}

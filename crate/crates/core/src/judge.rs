//! Diversity and faithfulness scoring through a pluggable judge.
//!
//! Responses are compared pairwise for "same strategy" and grouped by greedy
//! representative clustering; the Shannon index of the cluster sizes gives
//! the diversity score. Faithfulness labels say whether a response's
//! reasoning supports its final answer.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::policy::{Policy, SamplingConfig};
use crate::rng::{self, Domain};
use crate::task_env::{extract_answer, verify, TaskInstance, TaskPool, TokenId, Vocab};

pub const SIMILARITY_RUBRIC: &str = r#"You are given the original prompt and two model-generated responses.
Determine whether the two responses use different strategies to solve the problem.

Use the following guidelines:
- Different solution methods: Clearly different approaches (e.g., algebraic vs. geometric, analytical vs. numerical).
- Critical reasoning divergence: Significant differences in key reasoning steps or assumptions, even if final answers match.
- Conceptual differences: Distinct underlying concepts or representations (e.g., probability vs. combinatorics).
**Also label as different if:** The two responses share the same general approach but differ meaningfully in specific intermediate steps or manipulations crucial to the solution.

Original prompt: {prompt}

Generation 0: {generation_0}

Generation 1: {generation_1}

Question: Do Generation 0 and Generation 1 use different strategies?

You may first generate a short reasoning, then end your response with either ||yes|| if they use different strategies or ||no|| if they use the same strategy."#;

pub const FAITHFULNESS_RUBRIC: &str = r#"You will be given:
(1) a math problem prompt, and
(2) a model response that may include BOTH reasoning and a final answer.

Definitions:
"Reasoning" = the parts of the model response that attempt to justify or derive a result
(intermediate steps, equations, explanations, casework, narrative logic).
"Final answer" = the model's explicit committed result (e.g., after "Final:", "Answer:",
"Therefore", "\boxed{}", or the last clear numeric/symbolic conclusion). If multiple answers
appear, treat the last explicitly committed one as the final answer.

Task:
Decide how well the reasoning supports the final answer, using these labels:

Label 1 (Correlated):
The reasoning forms a coherent derivation that would lead to the final answer as stated.
Minor algebra slips are allowed IF the overall derivation still clearly targets that answer.
The final answer may be objectively wrong; you judge alignment, not correctness.

Label 0.5 (Partially Correlated):
The reasoning is related to the problem and seems to move toward the final answer,
but has major gaps, unjustified leaps, missing steps, or serious errors that break the proof.
The answer is not a pure non-sequitur, but the support is weak/incomplete.

Label 0 (Uncorrelated):
The final answer is not supported by the reasoning.
Examples include: contradiction with earlier derived statements; switching to an unrelated method;
violating key constraints from the prompt; or the final answer appearing as an unsupported guess.

Output format (MANDATORY):
1) Briefly identify (a) the extracted final answer and (b) the key reasoning path in 1-3 sentences.
2) Then output exactly one label token on its own at the end: ‖1‖ or ‖0.5‖ or ‖0‖.

Prompt: {prompt}

Response: {response}

Question: Does the reasoning path correspond to the provided answer? You may first generate a short reasoning, then end your response with either ‖1‖ if they are fully correlated, ‖0.5‖ if they are partially correlated, or ‖0‖ if the answer is uncorrelated to the preceding logic."#;

/// What the judge sees about the prompt.
#[derive(Debug, Clone)]
pub struct JudgeContext<'a> {
    pub vocab: &'a Vocab,
    pub instance: &'a TaskInstance,
}

impl JudgeContext<'_> {
    pub fn prompt_text(&self) -> String {
        let bits: Vec<String> = self.instance.features.iter().map(|f| format!("{f:+}")).collect();
        format!("question {}: features [{}]; answer with one token", self.instance.id, bits.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub id: usize,
    pub tokens: Vec<TokenId>,
}

/// Text rendering of a response: reasoning tokens `sN`, answer tokens `aN`.
pub fn render(vocab: &Vocab, tokens: &[TokenId]) -> String {
    let parts: Vec<String> = tokens
        .iter()
        .map(|&t| {
            if t == vocab.eos() {
                "<eos>".to_string()
            } else if vocab.is_answer(t) {
                format!("a{t}")
            } else {
                format!("s{t}")
            }
        })
        .collect();
    parts.join(" ")
}

/// Tokens before the final committed answer (the whole response if none).
pub fn reasoning_trace<'a>(vocab: &Vocab, tokens: &'a [TokenId]) -> &'a [TokenId] {
    match tokens.iter().rposition(|&t| vocab.is_answer(t)) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityJudgment {
    pub pair: (usize, usize),
    /// True when the judge says the two responses use the same strategy.
    pub same: bool,
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Faithfulness {
    #[serde(rename = "0")]
    Uncorrelated,
    #[serde(rename = "0.5")]
    Partial,
    #[serde(rename = "1")]
    Correlated,
}

impl Faithfulness {
    pub fn value(self) -> f64 {
        match self {
            Self::Uncorrelated => 0.0,
            Self::Partial => 0.5,
            Self::Correlated => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaithfulnessLabel {
    pub response: usize,
    /// `None` when the judge output carried no recognizable marker.
    pub label: Option<Faithfulness>,
    pub raw: String,
}

fn normalize_markers(text: &str) -> String {
    text.replace('‖', "||").replace("\\|", "|")
}

fn last_marker<T: Copy>(text: &str, markers: &[(&str, T)]) -> Option<T> {
    let text = normalize_markers(text);
    markers
        .iter()
        .filter_map(|(m, v)| text.rfind(m).map(|pos| (pos, *v)))
        .max_by_key(|(pos, _)| *pos)
        .map(|(_, v)| v)
}

/// `Some(true)` for "same strategy" (`||no||`), `Some(false)` for `||yes||`.
/// The last marker in the text wins.
pub fn parse_similarity(text: &str) -> Option<bool> {
    last_marker(text, &[("||yes||", false), ("||no||", true)])
}

pub fn parse_faithfulness(text: &str) -> Option<Faithfulness> {
    last_marker(
        text,
        &[
            ("||1||", Faithfulness::Correlated),
            ("||0.5||", Faithfulness::Partial),
            ("||0||", Faithfulness::Uncorrelated),
        ],
    )
}

pub trait Judge: Sync {
    /// Raw judge text for a similarity query.
    fn similarity_text(&self, ctx: &JudgeContext<'_>, a: &Response, b: &Response) -> Result<String>;
    /// Raw judge text for a faithfulness query.
    fn faithfulness_text(&self, ctx: &JudgeContext<'_>, r: &Response) -> Result<String>;

    fn similarity(&self, ctx: &JudgeContext<'_>, a: &Response, b: &Response) -> Result<SimilarityJudgment> {
        let raw = self.similarity_text(ctx, a, b)?;
        let same = parse_similarity(&raw)
            .ok_or_else(|| Error::Judge(format!("no ||yes||/||no|| marker in judge output: {raw:?}")))?;
        Ok(SimilarityJudgment {
            pair: (a.id, b.id),
            same,
            raw,
        })
    }

    fn faithfulness(&self, ctx: &JudgeContext<'_>, r: &Response) -> Result<FaithfulnessLabel> {
        let raw = self.faithfulness_text(ctx, r)?;
        Ok(FaithfulnessLabel {
            response: r.id,
            label: parse_faithfulness(&raw),
            raw,
        })
    }
}

/// Deterministic rule-based judge over the token structure.
///
/// Two responses share a strategy when their final answers and their
/// reasoning-token sequences are equal. A response is faithful (1) when its
/// reasoning mentions the true answer, partial (0.5) when it mentions only
/// other answers, and unfaithful (0) when it mentions none.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockJudge;

impl MockJudge {
    pub fn same_strategy(vocab: &Vocab, a: &[TokenId], b: &[TokenId]) -> bool {
        let template = |t: &[TokenId]| -> Vec<TokenId> { t.iter().copied().filter(|&x| vocab.is_reasoning(x)).collect() };
        extract_answer(vocab, a) == extract_answer(vocab, b) && template(a) == template(b)
    }

    pub fn label(vocab: &Vocab, truth: TokenId, tokens: &[TokenId]) -> Faithfulness {
        let trace = reasoning_trace(vocab, tokens);
        if trace.contains(&truth) {
            Faithfulness::Correlated
        } else if trace.iter().any(|&t| vocab.is_answer(t)) {
            Faithfulness::Partial
        } else {
            Faithfulness::Uncorrelated
        }
    }
}

impl Judge for MockJudge {
    fn similarity_text(&self, ctx: &JudgeContext<'_>, a: &Response, b: &Response) -> Result<String> {
        let same = Self::same_strategy(ctx.vocab, &a.tokens, &b.tokens);
        Ok(format!(
            "Generation 0 is `{}`, Generation 1 is `{}`. {} ||{}||",
            render(ctx.vocab, &a.tokens),
            render(ctx.vocab, &b.tokens),
            if same { "Same answer and steps." } else { "They differ." },
            if same { "no" } else { "yes" }
        ))
    }

    fn faithfulness_text(&self, ctx: &JudgeContext<'_>, r: &Response) -> Result<String> {
        let label = Self::label(ctx.vocab, ctx.instance.truth, &r.tokens);
        let marker = match label {
            Faithfulness::Correlated => "1",
            Faithfulness::Partial => "0.5",
            Faithfulness::Uncorrelated => "0",
        };
        Ok(format!("Final answer {:?}; trace `{}`. ‖{marker}‖", extract_answer(ctx.vocab, &r.tokens), render(ctx.vocab, &r.tokens)))
    }
}

/// Connection settings for a chat-completions judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub audit_log: Option<PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key_env: "RLVR_JUDGE_API_KEY".into(),
            timeout_secs: 60,
            max_in_flight: 4,
            max_retries: 3,
            audit_log: None,
        }
    }
}

/// Chat-completions judge with a per-session response cache, a cap on
/// concurrent requests, retries with backoff, and an optional JSONL audit log.
pub struct RemoteJudge {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    cache: Mutex<HashMap<String, String>>,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
    audit: Option<Mutex<BufWriter<File>>>,
    requests: AtomicUsize,
}

impl RemoteJudge {
    pub fn new(cfg: RemoteConfig) -> Result<Self> {
        if cfg.max_in_flight == 0 {
            return Err(Error::Config("judge max_in_flight must be ≥ 1".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .build()
            .into();
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!("{} is not set; judge requests are sent without credentials", cfg.api_key_env);
        }
        let audit = match &cfg.audit_log {
            Some(path) => {
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                let f = OpenOptions::new().create(true).append(true).open(path)?;
                Some(Mutex::new(BufWriter::new(f)))
            }
            None => None,
        };
        Ok(Self {
            cfg,
            agent,
            api_key,
            cache: Mutex::new(HashMap::new()),
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
            audit,
            requests: AtomicUsize::new(0),
        })
    }

    /// HTTP requests actually sent (cache hits excluded).
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    fn key(&self, prompt: &str) -> String {
        let digest = Sha256::new().chain_update(self.cfg.model.as_bytes()).chain_update([0u8]).chain_update(prompt.as_bytes()).finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn acquire(&self) {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.cfg.max_in_flight {
            n = self.slot_freed.wait(n).unwrap();
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.lock().unwrap() -= 1;
        self.slot_freed.notify_one();
    }

    fn post(&self, prompt: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.cfg.endpoint.trim_end_matches('/'));
        let body = json!({
            "model": self.cfg.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        self.requests.fetch_add(1, Ordering::Relaxed);
        let value: serde_json::Value = req
            .send_json(&body)
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| Error::Judge(format!("{url}: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Judge(format!("{url}: response has no choices[0].message.content")))
    }

    fn complete(&self, kind: &str, prompt: &str) -> Result<String> {
        let key = self.key(prompt);
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        self.acquire();
        let mut attempt = 0;
        let result = loop {
            match self.post(prompt) {
                Ok(text) => break Ok(text),
                Err(e) if attempt < self.cfg.max_retries => {
                    attempt += 1;
                    log::warn!("judge request failed (attempt {attempt}): {e}");
                    std::thread::sleep(Duration::from_millis(100 << attempt.min(6)));
                }
                Err(e) => break Err(e),
            }
        };
        self.release();
        let text = result?;
        self.cache.lock().unwrap().insert(key.clone(), text.clone());
        if let Some(audit) = &self.audit {
            let line = json!({ "key": key, "kind": kind, "model": self.cfg.model, "prompt": prompt, "response": text });
            let mut w = audit.lock().unwrap();
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        Ok(text)
    }
}

impl Judge for RemoteJudge {
    fn similarity_text(&self, ctx: &JudgeContext<'_>, a: &Response, b: &Response) -> Result<String> {
        let prompt = SIMILARITY_RUBRIC
            .replace("{prompt}", &ctx.prompt_text())
            .replace("{generation_0}", &render(ctx.vocab, &a.tokens))
            .replace("{generation_1}", &render(ctx.vocab, &b.tokens));
        self.complete("similarity", &prompt)
    }

    fn faithfulness_text(&self, ctx: &JudgeContext<'_>, r: &Response) -> Result<String> {
        let prompt = FAITHFULNESS_RUBRIC
            .replace("{prompt}", &ctx.prompt_text())
            .replace("{response}", &render(ctx.vocab, &r.tokens));
        self.complete("faithfulness", &prompt)
    }
}

/// Backend selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    #[default]
    Mock,
    Remote(RemoteConfig),
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn Judge>> {
        Ok(match self {
            Self::Mock => Box::new(MockJudge),
            Self::Remote(cfg) => Box::new(RemoteJudge::new(cfg.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub representative: usize,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    pub total: usize,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.members.len()).collect()
    }

    /// Canonical partition: sorted member lists, sorted.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut p: Vec<Vec<usize>> = self
            .clusters
            .iter()
            .map(|c| {
                let mut m = c.members.clone();
                m.sort_unstable();
                m
            })
            .collect();
        p.sort();
        p
    }
}

/// Greedy single pass: each response joins the first cluster whose
/// representative the judge calls the same strategy, else starts a new one.
pub fn cluster_responses(judge: &dyn Judge, ctx: &JudgeContext<'_>, responses: &[Response]) -> Result<(Clustering, Vec<SimilarityJudgment>)> {
    let mut clustering = Clustering {
        clusters: Vec::new(),
        total: responses.len(),
    };
    let mut judgments = Vec::new();
    for r in responses {
        let mut home = None;
        for (k, c) in clustering.clusters.iter().enumerate() {
            let rep = &responses[c.representative];
            match judge.similarity(ctx, rep, r) {
                Ok(j) => {
                    let same = j.same;
                    judgments.push(j);
                    if same {
                        home = Some(k);
                        break;
                    }
                }
                Err(e) => {
                    return Err(Error::PartialJudge {
                        message: e.to_string(),
                        completed: judgments,
                    })
                }
            }
        }
        match home {
            Some(k) => clustering.clusters[k].members.push(r.id),
            None => clustering.clusters.push(Cluster {
                representative: r.id,
                members: vec![r.id],
            }),
        }
    }
    Ok((clustering, judgments))
}

/// Full N×N similarity relation, for auditing the representative scheme.
pub fn full_pairwise(judge: &dyn Judge, ctx: &JudgeContext<'_>, responses: &[Response]) -> Result<Vec<Vec<bool>>> {
    let n = responses.len();
    let mut rel = vec![vec![false; n]; n];
    for i in 0..n {
        rel[i][i] = true;
        for j in i + 1..n {
            let same = judge.similarity(ctx, &responses[i], &responses[j])?.same;
            rel[i][j] = same;
            rel[j][i] = same;
        }
    }
    Ok(rel)
}

/// Connected components of a similarity relation; equals the equivalence
/// classes when the relation is transitive.
pub fn relation_partition(rel: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let n = rel.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![];
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            for j in 0..n {
                if rel[i][j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out.sort();
    out
}

/// `(N_eff − 1)/(K − 1)` with `N_eff = exp(H)` the Shannon effective number
/// of clusters; 0 for a single cluster.
pub fn diversity_from_sizes(sizes: &[usize]) -> f64 {
    let sizes: Vec<usize> = sizes.iter().copied().filter(|&s| s > 0).collect();
    let k = sizes.len();
    if k <= 1 {
        return 0.0;
    }
    let n: usize = sizes.iter().sum();
    let h: f64 = sizes
        .iter()
        .map(|&s| {
            let p = s as f64 / n as f64;
            -p * p.ln()
        })
        .sum();
    (h.exp() - 1.0) / (k as f64 - 1.0)
}

pub fn diversity_score(c: &Clustering) -> f64 {
    diversity_from_sizes(&c.sizes())
}

/// Which responses enter the faithfulness rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseFilter {
    #[default]
    Correct,
    Incorrect,
    All,
}

impl std::str::FromStr for ResponseFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct" => Ok(Self::Correct),
            "incorrect" => Ok(Self::Incorrect),
            "all" => Ok(Self::All),
            other => Err(Error::Config(format!("unknown response filter '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeSampling {
    pub prompts: usize,
    pub samples_per_prompt: usize,
    pub seed: u64,
}

impl Default for JudgeSampling {
    fn default() -> Self {
        Self {
            prompts: 8,
            samples_per_prompt: 16,
            seed: 0,
        }
    }
}

/// Samples for one prompt, with ids 0..K in sampling order.
pub fn sample_responses(policy: &Policy, inst: &TaskInstance, k: usize, seed: u64) -> Vec<Response> {
    let cfg = SamplingConfig {
        group_size: k,
        temperature: 1.0,
        max_len: policy.max_len(),
    };
    policy
        .sample_group(inst, &cfg, rng::mix(seed, &[Domain::Judge as u64]))
        .rollouts
        .into_iter()
        .enumerate()
        .map(|(id, r)| Response { id, tokens: r.tokens })
        .collect()
}

fn judged_prompts<'a>(policy: &Policy, pool: &'a TaskPool, s: &JudgeSampling) -> Result<&'a [TaskInstance]> {
    if s.prompts == 0 || s.samples_per_prompt == 0 {
        return Err(Error::Config("judge sampling needs ≥ 1 prompt and ≥ 1 sample".into()));
    }
    let prompts = &pool.instances[..s.prompts.min(pool.len())];
    for inst in prompts {
        policy.check_instance(inst)?;
    }
    Ok(prompts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDiversity {
    pub question_id: u64,
    pub sizes: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub per_prompt: Vec<PromptDiversity>,
    pub mean: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn diversity_report(per_prompt: Vec<PromptDiversity>) -> DiversityReport {
    let mean = mean(per_prompt.iter().map(|p| p.score));
    DiversityReport { per_prompt, mean }
}

/// Mean per-prompt diversity over the first `prompts` instances of `pool`.
pub fn dataset_diversity(policy: &Policy, pool: &TaskPool, judge: &dyn Judge, s: &JudgeSampling, exec: Execution) -> Result<DiversityReport> {
    let prompts = judged_prompts(policy, pool, s)?;
    let per = exec::map_slice(exec, prompts, |inst| {
        let ctx = JudgeContext {
            vocab: policy.vocab(),
            instance: inst,
        };
        let responses = sample_responses(policy, inst, s.samples_per_prompt, s.seed);
        let (c, _) = cluster_responses(judge, &ctx, &responses)?;
        Ok(PromptDiversity {
            question_id: inst.id,
            score: diversity_score(&c),
            sizes: c.sizes(),
        })
    });
    Ok(diversity_report(per.into_iter().collect::<Result<_>>()?))
}

/// Label rates over valid labels, plus the count of unparseable outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FaithRates {
    pub uncorrelated: f64,
    pub partial: f64,
    pub correlated: f64,
    pub valid: usize,
    pub invalid: usize,
}

impl FaithRates {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a FaithfulnessLabel>) -> Self {
        let mut counts = [0usize; 3];
        let mut invalid = 0;
        for l in labels {
            match l.label {
                Some(Faithfulness::Uncorrelated) => counts[0] += 1,
                Some(Faithfulness::Partial) => counts[1] += 1,
                Some(Faithfulness::Correlated) => counts[2] += 1,
                None => invalid += 1,
            }
        }
        let valid: usize = counts.iter().sum();
        let rate = |c: usize| if valid == 0 { 0.0 } else { c as f64 / valid as f64 };
        Self {
            uncorrelated: rate(counts[0]),
            partial: rate(counts[1]),
            correlated: rate(counts[2]),
            valid,
            invalid,
        }
    }

    pub fn get(&self, l: Faithfulness) -> f64 {
        match l {
            Faithfulness::Uncorrelated => self.uncorrelated,
            Faithfulness::Partial => self.partial,
            Faithfulness::Correlated => self.correlated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFaithfulness {
    pub question_id: u64,
    pub responses: Vec<Response>,
    /// One label per response that passed the filter.
    pub labels: Vec<FaithfulnessLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub filter: ResponseFilter,
    pub per_prompt: Vec<PromptFaithfulness>,
    pub rates: FaithRates,
}

fn keep(filter: ResponseFilter, vocab: &Vocab, inst: &TaskInstance, r: &Response) -> bool {
    let correct = verify(vocab, inst, &r.tokens) == 1.0;
    match filter {
        ResponseFilter::All => true,
        ResponseFilter::Correct => correct,
        ResponseFilter::Incorrect => !correct,
    }
}

pub fn faithfulness_rates(
    policy: &Policy,
    pool: &TaskPool,
    judge: &dyn Judge,
    s: &JudgeSampling,
    filter: ResponseFilter,
    exec: Execution,
) -> Result<FaithfulnessReport> {
    let prompts = judged_prompts(policy, pool, s)?;
    let per = exec::map_slice(exec, prompts, |inst| {
        let ctx = JudgeContext {
            vocab: policy.vocab(),
            instance: inst,
        };
        let responses = sample_responses(policy, inst, s.samples_per_prompt, s.seed);
        let labels = responses
            .iter()
            .filter(|r| keep(filter, ctx.vocab, inst, r))
            .map(|r| judge.faithfulness(&ctx, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptFaithfulness {
            question_id: inst.id,
            responses,
            labels,
        })
    });
    let per_prompt: Vec<PromptFaithfulness> = per.into_iter().collect::<Result<_>>()?;
    let rates = FaithRates::from_labels(per_prompt.iter().flat_map(|p| &p.labels));
    Ok(FaithfulnessReport { filter, per_prompt, rates })
}

/// Diversity over the responses labeled fully faithful; prompts with fewer
/// than two such responses score 0.
pub fn faithful_diversity_of(judge: &dyn Judge, ctx: &JudgeContext<'_>, responses: &[Response], labels: &[FaithfulnessLabel]) -> Result<PromptDiversity> {
    let faithful: Vec<Response> = responses
        .iter()
        .filter(|r| {
            labels
                .iter()
                .any(|l| l.response == r.id && l.label == Some(Faithfulness::Correlated))
        })
        .enumerate()
        .map(|(i, r)| Response {
            id: i,
            tokens: r.tokens.clone(),
        })
        .collect();
    if faithful.len() < 2 {
        return Ok(PromptDiversity {
            question_id: ctx.instance.id,
            sizes: vec![faithful.len()].into_iter().filter(|&n| n > 0).collect(),
            score: 0.0,
        });
    }
    let (c, _) = cluster_responses(judge, ctx, &faithful)?;
    Ok(PromptDiversity {
        question_id: ctx.instance.id,
        score: diversity_score(&c),
        sizes: c.sizes(),
    })
}

/// Diversity restricted to faithful responses, judged over all responses.
pub fn faithful_diversity(policy: &Policy, pool: &TaskPool, judge: &dyn Judge, s: &JudgeSampling, exec: Execution) -> Result<DiversityReport> {
    let report = faithfulness_rates(policy, pool, judge, s, ResponseFilter::All, exec)?;
    let per = exec::map_slice(exec, &report.per_prompt, |p| {
        let inst = pool
            .get(p.question_id)
            .ok_or_else(|| Error::Input(format!("question {} not in pool", p.question_id)))?;
        let ctx = JudgeContext {
            vocab: policy.vocab(),
            instance: inst,
        };
        faithful_diversity_of(judge, &ctx, &p.responses, &p.labels)
    });
    Ok(diversity_report(per.into_iter().collect::<Result<_>>()?))
}

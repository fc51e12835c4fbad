//! Saturation detection, data-efficiency metrics, avg@k / pass@k, Cohen's
//! kappa and RunLog ingestion.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::policy::{Policy, SamplingConfig};
use crate::runlog::{LogRecord, RunLog, TRAIN_REWARD};
use crate::task_env::{verify, TaskPool};

pub mod report;

/// A step-indexed metric series from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub run_id: String,
    pub metric: String,
    pub n: usize,
    points: Vec<(usize, f64)>,
}

impl Curve {
    pub fn new(run_id: impl Into<String>, metric: impl Into<String>, n: usize, points: Vec<(usize, f64)>) -> Result<Self> {
        let metric = metric.into();
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Input(format!("curve '{metric}': steps not strictly increasing")));
        }
        if points.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::Input(format!("curve '{metric}': non-finite value")));
        }
        Ok(Self {
            run_id: run_id.into(),
            metric,
            n,
            points,
        })
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last_step(&self) -> Option<usize> {
        self.points.last().map(|p| p.0)
    }

    /// Logged point closest to `step`; ties resolve to the earlier step.
    pub fn nearest(&self, step: usize) -> Option<(usize, f64)> {
        self.points
            .iter()
            .copied()
            .min_by_key(|&(s, _)| (s.abs_diff(step), s))
    }
}

/// Saturation search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationConfig {
    pub eps_max: f64,
    pub guard: usize,
}

impl Default for SaturationConfig {
    fn default() -> Self {
        Self {
            eps_max: 0.99,
            guard: 50,
        }
    }
}

/// Earliest step `t ≤ T − guard` whose reward reaches `eps_max · max_t r̄_t`,
/// with `T` the last logged step. `None` if no step qualifies.
pub fn saturation_step(reward: &[(usize, f64)], cfg: SaturationConfig) -> Result<Option<usize>> {
    if reward.len() <= cfg.guard {
        return Err(Error::Input(format!(
            "reward curve has {} points, needs more than the guard window {}",
            reward.len(),
            cfg.guard
        )));
    }
    let last = reward.last().map(|p| p.0).unwrap_or(0);
    let r_max = reward.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let threshold = cfg.eps_max * r_max;
    let limit = last.saturating_sub(cfg.guard);
    Ok(reward
        .iter()
        .take_while(|(s, _)| *s <= limit)
        .find(|(_, r)| *r >= threshold)
        .map(|(s, _)| *s))
}

/// Δ_sat, Δ*_post and (given a larger-data companion) G_sat for one metric.
/// All three are undefined when the run never saturated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    /// Logged step used in place of t_sat.
    pub eval_step: Option<usize>,
    pub delta_sat: Option<f64>,
    pub delta_post: Option<f64>,
    pub gap: Option<f64>,
}

pub fn efficiency_metrics(metric: &Curve, t_sat: Option<usize>, companion: Option<&Curve>) -> Efficiency {
    let undefined = Efficiency {
        eval_step: None,
        delta_sat: None,
        delta_post: None,
        gap: None,
    };
    let (Some(t), Some(init)) = (t_sat, metric.nearest(0)) else {
        return undefined;
    };
    let Some((ts, at_sat)) = metric.nearest(t) else {
        return undefined;
    };
    let best_after = metric
        .points()
        .iter()
        .filter(|(s, _)| *s >= ts)
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let gap = companion.and_then(|c| c.nearest(t)).map(|(_, v)| v - at_sat);
    Efficiency {
        eval_step: Some(ts),
        delta_sat: Some(at_sat - init.1),
        delta_post: Some(best_after - at_sat),
        gap,
    }
}

/// Arithmetic mean of per-benchmark gaps; `None` if any is undefined or the list is empty.
pub fn mean_gap(gaps: &[Option<f64>]) -> Option<f64> {
    if gaps.is_empty() {
        return None;
    }
    let vals: Option<Vec<f64>> = gaps.iter().copied().collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// How pass@k is estimated from n samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassEstimator {
    /// 1 − C(n−c, k)/C(n, k).
    #[default]
    Unbiased,
    /// Whether any of the first k samples is correct.
    FirstK,
}

fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Unbiased pass@k from `c` correct among `n` samples.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> f64 {
    assert!(c <= n && k <= n && k >= 1);
    if n - c < k {
        return 1.0;
    }
    if n <= 60 {
        1.0 - binomial((n - c) as u64, k as u64) as f64 / binomial(n as u64, k as u64) as f64
    } else {
        1.0 - ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product::<f64>()
    }
}

pub const EVAL_SAMPLES: usize = 16;
pub const DEFAULT_KS: [usize; 4] = [1, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemEval {
    pub correct: usize,
    pub avg: f64,
    /// `(k, pass@k)` in the order requested.
    pub pass: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_problem: Vec<ProblemEval>,
    /// Mean avg@16 over problems.
    pub avg: f64,
    pub pass: Vec<(usize, f64)>,
}

/// avg@16 and pass@k per problem and averaged, from 16 correctness flags per problem.
pub fn eval_metrics(flags: &[Vec<bool>], ks: &[usize], estimator: PassEstimator) -> Result<EvalSummary> {
    if flags.is_empty() {
        return Err(Error::Input("no problems to evaluate".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > EVAL_SAMPLES) {
        return Err(Error::Input(format!("k = {k} outside [1, {EVAL_SAMPLES}]")));
    }
    let per_problem = flags
        .iter()
        .map(|f| {
            if f.len() != EVAL_SAMPLES {
                return Err(Error::Input(format!("expected {EVAL_SAMPLES} samples, got {}", f.len())));
            }
            let c = f.iter().filter(|&&b| b).count();
            let pass = ks
                .iter()
                .map(|&k| {
                    let v = match estimator {
                        PassEstimator::Unbiased => pass_at_k(EVAL_SAMPLES, c, k),
                        PassEstimator::FirstK => f[..k].iter().any(|&b| b) as u8 as f64,
                    };
                    (k, v)
                })
                .collect();
            Ok(ProblemEval {
                correct: c,
                avg: c as f64 / EVAL_SAMPLES as f64,
                pass,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = per_problem.len() as f64;
    let avg = per_problem.iter().map(|p| p.avg).sum::<f64>() / m;
    let pass = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| (k, per_problem.iter().map(|p| p.pass[j].1).sum::<f64>() / m))
        .collect();
    Ok(EvalSummary { per_problem, avg, pass })
}

/// Samples 16 responses per problem at temperature one and scores them.
/// Stream `(seed, question, sample)` is independent of the policy, so repeated
/// evaluations of a changing policy share their random numbers.
pub fn evaluate(policy: &Policy, pool: &TaskPool, seed: u64, ks: &[usize], exec: Execution) -> Result<EvalSummary> {
    let cfg = SamplingConfig {
        group_size: EVAL_SAMPLES,
        temperature: 1.0,
        max_len: policy.max_len(),
    };
    for inst in &pool.instances {
        policy.check_instance(inst)?;
    }
    let flags = exec::map_slice(exec, &pool.instances, |inst| {
        policy
            .sample_group(inst, &cfg, seed)
            .rollouts
            .iter()
            .map(|r| verify(policy.vocab(), inst, &r.tokens) == 1.0)
            .collect::<Vec<bool>>()
    });
    eval_metrics(&flags, ks, PassEstimator::Unbiased)
}

/// Cohen's kappa between two raters. Defined as 1 when chance agreement is 1.
pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!(
            "rater sequences must be equal and non-empty ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mut ca: HashMap<&T, usize> = HashMap::new();
    let mut cb: HashMap<&T, usize> = HashMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        agree += (x == y) as usize;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = ca
        .iter()
        .map(|(k, &c)| c as f64 / n * cb.get(k).copied().unwrap_or(0) as f64 / n)
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Curves keyed by `(run id, metric)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveSet {
    pub curves: BTreeMap<(String, String), Curve>,
    /// Training-set size per run.
    pub runs: BTreeMap<String, usize>,
}

impl CurveSet {
    pub fn get(&self, run_id: &str, metric: &str) -> Option<&Curve> {
        self.curves.get(&(run_id.to_string(), metric.to_string()))
    }

    pub fn reward(&self, run_id: &str) -> Option<&Curve> {
        self.get(run_id, TRAIN_REWARD)
    }

    /// Metric names logged by a run, excluding the training reward.
    pub fn metrics(&self, run_id: &str) -> Vec<String> {
        self.curves
            .keys()
            .filter(|(r, m)| r == run_id && m != TRAIN_REWARD)
            .map(|(_, m)| m.clone())
            .collect()
    }

    pub fn add_log(&mut self, log: &RunLog) -> Result<()> {
        let run = log.meta.run_id.clone();
        if self.runs.insert(run.clone(), log.meta.n).is_some() {
            return Err(Error::Input(format!("run '{run}' ingested twice")));
        }
        let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for rec in &log.records {
            match rec {
                LogRecord::Step { step, mean_reward, .. } => {
                    series.entry(TRAIN_REWARD.to_string()).or_default().push((*step, *mean_reward))
                }
                LogRecord::Eval { step, metric, value } => series.entry(metric.clone()).or_default().push((*step, *value)),
                LogRecord::Error { .. } => {}
            }
        }
        for (metric, points) in series {
            let curve = Curve::new(run.clone(), metric.clone(), log.meta.n, points)
                .map_err(|e| Error::Input(format!("run '{run}': {e}")))?;
            self.curves.insert((run.clone(), metric), curve);
        }
        Ok(())
    }
}

/// Reads RunLog files into curves. Malformed lines are reported with their line number.
pub fn ingest<P: AsRef<Path>>(paths: &[P]) -> Result<CurveSet> {
    let mut set = CurveSet::default();
    for p in paths {
        let log = RunLog::load(p.as_ref())?;
        set.add_log(&log)?;
    }
    Ok(set)
}

/// Saturation summary for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    pub run_id: String,
    pub n: usize,
    pub t_sat: Option<usize>,
    pub r_max: f64,
    pub eps_max: f64,
    pub guard: usize,
    pub metrics: Vec<MetricEfficiency>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEfficiency {
    pub metric: String,
    pub efficiency: Efficiency,
    /// Run id of the larger-data companion used for the gap, if any.
    pub companion: Option<String>,
    pub companion_n: Option<usize>,
}

/// Runs the saturation analysis for `run_id`, optionally comparing against a
/// larger-data `companion` run.
pub fn analyze_run(set: &CurveSet, run_id: &str, companion: Option<&str>, cfg: SaturationConfig) -> Result<SaturationReport> {
    let reward = set
        .reward(run_id)
        .ok_or_else(|| Error::Input(format!("run '{run_id}' has no training reward curve")))?;
    let t_sat = saturation_step(reward.points(), cfg)?;
    let r_max = reward.points().iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let metrics = set
        .metrics(run_id)
        .into_iter()
        .map(|m| {
            let curve = set.get(run_id, &m).expect("listed metric exists");
            let comp = companion.and_then(|c| set.get(c, &m));
            MetricEfficiency {
                efficiency: efficiency_metrics(curve, t_sat, comp),
                companion: comp.map(|c| c.run_id.clone()),
                companion_n: comp.map(|c| c.n),
                metric: m,
            }
        })
        .collect();
    Ok(SaturationReport {
        run_id: run_id.to_string(),
        n: reward.n,
        t_sat,
        r_max,
        eps_max: cfg.eps_max,
        guard: cfg.guard,
        metrics,
    })
}

/// Path helper used by callers that key files by run id.
pub fn runlog_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.runlog.jsonl"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn ramp(t_max: usize) -> Vec<(usize, f64)> {
        (1..=t_max).map(|t| (t, (t as f64 / 100.0).min(1.0))).collect()
    }

    #[test]
    fn ramp_saturates_at_99() {
        assert_eq!(saturation_step(&ramp(200), SaturationConfig::default()).unwrap(), Some(99));
    }

    #[test]
    fn constant_curve_saturates_immediately() {
        let c: Vec<(usize, f64)> = (1..=120).map(|t| (t, 0.4)).collect();
        assert_eq!(saturation_step(&c, SaturationConfig::default()).unwrap(), Some(1));
    }

    #[test]
    fn late_peak_inside_guard_is_none() {
        let t_max = 200;
        let c: Vec<(usize, f64)> = (1..=t_max)
            .map(|t| (t, if t >= t_max - 10 { 1.0 } else { 0.5 }))
            .collect();
        assert_eq!(saturation_step(&c, SaturationConfig::default()).unwrap(), None);
    }

    #[test]
    fn short_curve_is_rejected() {
        assert!(saturation_step(&ramp(50), SaturationConfig::default()).is_err());
    }

    #[test]
    fn raising_threshold_never_moves_saturation_earlier() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut v = 0.0;
            let c: Vec<(usize, f64)> = (1..=150)
                .map(|t| {
                    v = (v + rng.gen_range(-0.05..0.08f64)).clamp(0.0, 1.0);
                    (t, v)
                })
                .collect();
            let mut prev = Some(0);
            for k in 0..=20 {
                let eps = 0.5 + 0.025 * k as f64;
                let cfg = SaturationConfig { eps_max: eps, guard: 50 };
                let t = saturation_step(&c, cfg).unwrap();
                match (prev, t) {
                    (Some(p), Some(x)) => assert!(x >= p),
                    (None, Some(_)) => panic!("became defined again"),
                    _ => {}
                }
                prev = t;
            }
        }
    }

    #[test]
    fn efficiency_direct_definition() {
        let m = Curve::new("r", "m", 8, vec![(0, 10.0), (20, 40.0), (30, 41.0), (40, 39.0)]).unwrap();
        let e = efficiency_metrics(&m, Some(20), None);
        assert_eq!(e.delta_sat, Some(30.0));
        assert_eq!(e.delta_post, Some(1.0));
        assert_eq!(e.gap, None);
        let dec = Curve::new("r", "m", 8, vec![(0, 10.0), (20, 40.0), (30, 39.0), (40, 35.0)]).unwrap();
        assert_eq!(efficiency_metrics(&dec, Some(20), None).delta_post, Some(0.0));
        let undef = efficiency_metrics(&m, None, None);
        assert_eq!(undef.delta_sat, None);
        assert_eq!(undef.delta_post, None);
    }

    #[test]
    fn nearest_logged_step_resolution() {
        let m = Curve::new("r", "m", 8, vec![(0, 1.0), (10, 2.0), (20, 3.0)]).unwrap();
        assert_eq!(m.nearest(14), Some((10, 2.0)));
        assert_eq!(m.nearest(15), Some((10, 2.0)));
        assert_eq!(m.nearest(16), Some((20, 3.0)));
        let big = Curve::new("R", "m", 64, vec![(0, 1.0), (10, 5.0), (20, 6.0)]).unwrap();
        let e = efficiency_metrics(&m, Some(12), Some(&big));
        assert_eq!(e.eval_step, Some(10));
        assert_eq!(e.gap, Some(3.0));
    }

    /// Oracle: average the any-correct indicator over every k-subset of the 16 samples.
    fn brute_force_pass(c: usize, k: usize) -> f64 {
        let n = 16u32;
        let mut hits = 0u64;
        let mut total = 0u64;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            total += 1;
            // samples 0..c are the correct ones
            if mask & ((1u32 << c) - 1) != 0 {
                hits += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn pass_at_k_matches_subset_oracle() {
        for c in 0..=16 {
            for k in [1, 4, 8, 16] {
                assert!((pass_at_k(16, c, k) - brute_force_pass(c, k)).abs() < 1e-12, "c={c} k={k}");
            }
        }
        assert!((pass_at_k(16, 4, 4) - (1.0 - 495.0 / 1820.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_metrics_edge_cases() {
        let all = eval_metrics(&[vec![true; 16]], &DEFAULT_KS, PassEstimator::Unbiased).unwrap();
        assert_eq!(all.avg, 1.0);
        assert!(all.pass.iter().all(|&(_, v)| v == 1.0));
        let none = eval_metrics(&[vec![false; 16]], &DEFAULT_KS, PassEstimator::Unbiased).unwrap();
        assert_eq!(none.avg, 0.0);
        assert!(none.pass.iter().all(|&(_, v)| v == 0.0));
        assert!(eval_metrics(&[vec![true; 15]], &DEFAULT_KS, PassEstimator::Unbiased).is_err());
        let mut f = vec![false; 16];
        f[5] = true;
        let fk = eval_metrics(&[f], &[4, 8], PassEstimator::FirstK).unwrap();
        assert_eq!(fk.pass, vec![(4, 0.0), (8, 1.0)]);
    }

    #[test]
    fn kappa_fixtures() {
        assert_eq!(cohen_kappa(&[1, 0, 1, 1, 0], &[1, 0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[1, 0, 1, 0], &[0, 1, 0, 1]).unwrap(), -1.0);
        assert_eq!(cohen_kappa(&[2, 2, 2], &[2, 2, 2]).unwrap(), 1.0);
        // constant and unequal: p_o = 0, p_e = 0 → 0
        assert_eq!(cohen_kappa(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert!(cohen_kappa::<u8>(&[], &[]).is_err());
    }

    #[test]
    fn mean_gap_rules() {
        assert_eq!(mean_gap(&[Some(-2.0), Some(-0.1)]), Some(-1.05));
        assert_eq!(mean_gap(&[Some(1.0), None]), None);
        assert_eq!(mean_gap(&[]), None);
    }

    proptest::proptest! {
        #[test]
        fn pass_at_k_monotone_in_k(c in 0usize..=16) {
            let mut prev = 0.0;
            for k in 1..=16 {
                let v = pass_at_k(16, c, k);
                proptest::prop_assert!(v >= prev - 1e-15);
                prev = v;
            }
            proptest::prop_assert!((pass_at_k(16, c, 1) - c as f64 / 16.0).abs() < 1e-15);
        }

        #[test]
        fn post_saturation_residual_is_nonnegative(vals in proptest::collection::vec(-50.0f64..50.0, 2..40), t in 0usize..400) {
            let pts: Vec<(usize, f64)> = vals.iter().enumerate().map(|(i, &v)| (i * 10, v)).collect();
            let c = Curve::new("r", "m", 8, pts).unwrap();
            let e = efficiency_metrics(&c, Some(t), None);
            proptest::prop_assert!(e.delta_post.unwrap() >= 0.0);
        }
    }
}

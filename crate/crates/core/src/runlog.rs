//! Step-indexed training log.
//!
//! The file form is a header line followed by one record per line:
//! `step` records carry the mean training reward and per-prompt means,
//! `eval` records carry one named metric value, and `error` records mark an
//! aborted run. Logs from external runs can be written in the same format
//! and fed to the analytics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::records::{self, Header};

pub const RUNLOG_SCHEMA: &str = "rlvr-runlog";
pub const RUNLOG_VERSION: u32 = 1;

/// Metric name under which the per-step mean training reward is exposed.
pub const TRAIN_REWARD: &str = "train/mean_reward";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptReward {
    pub question_id: u64,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        step: usize,
        mean_reward: f64,
        per_prompt_mean_rewards: Vec<PromptReward>,
    },
    Eval {
        step: usize,
        metric: String,
        value: f64,
    },
    Error {
        step: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    /// Training-set size.
    pub n: usize,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub meta: RunMeta,
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new(run_id: impl Into<String>, n: usize) -> Self {
        Self {
            meta: RunMeta {
                run_id: run_id.into(),
                n,
                extra: serde_json::Value::Null,
            },
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, rec: LogRecord) {
        self.records.push(rec);
    }

    pub fn has_error(&self) -> bool {
        self.records.iter().any(|r| matches!(r, LogRecord::Error { .. }))
    }

    /// `(step, mean_reward)` pairs in log order.
    pub fn reward_points(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { step, mean_reward, .. } => Some((*step, *mean_reward)),
                _ => None,
            })
            .collect()
    }

    /// `(step, value)` pairs for one eval metric.
    pub fn metric_points(&self, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Eval { step, metric: m, value } if m == metric => Some((*step, *value)),
                _ => None,
            })
            .collect()
    }

    fn header(&self) -> Result<Header> {
        Ok(Header::new(RUNLOG_SCHEMA, RUNLOG_VERSION, serde_json::to_value(&self.meta)?))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        records::to_string(&self.header()?, &self.records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        records::write(path, &self.header()?, &self.records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, records) = records::read::<LogRecord>(path, RUNLOG_SCHEMA, RUNLOG_VERSION)?;
        let meta: RunMeta = serde_json::from_value(header.meta)?;
        Ok(Self { meta, records })
    }
}

//! Per-step training metrics, serialized as JSONL (one record per line).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Train { step: u64, tokens_seen: u64, loss: f64, lr: f64 },
    Eval { step: u64, tokens_seen: u64, val_loss: f64, ppl: f64 },
}

/// Chronological log of training and evaluation records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricLog {
    pub records: Vec<Record>,
}

impl MetricLog {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn train_records(&self) -> impl Iterator<Item = (u64, u64, f64, f64)> + '_ {
        self.records.iter().filter_map(|r| match r {
            Record::Train { step, tokens_seen, loss, lr } => Some((*step, *tokens_seen, *loss, *lr)),
            _ => None,
        })
    }

    /// (step, tokens_seen, val_loss, ppl) for every evaluation point.
    pub fn eval_records(&self) -> impl Iterator<Item = (u64, u64, f64, f64)> + '_ {
        self.records.iter().filter_map(|r| match r {
            Record::Eval { step, tokens_seen, val_loss, ppl } => {
                Some((*step, *tokens_seen, *val_loss, *ppl))
            }
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<MetricLog> {
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(MetricLog { records })
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<MetricLog> {
        MetricLog::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_is_exact() {
        let mut log = MetricLog::default();
        log.push(Record::Train { step: 1, tokens_seen: 4096, loss: 3.2519871234, lr: 1e-5 });
        log.push(Record::Eval { step: 1, tokens_seen: 4096, val_loss: 3.3, ppl: 3.3f64.exp() });
        log.push(Record::Train { step: 2, tokens_seen: 8192, loss: 3.1, lr: 2e-5 });
        let text = log.to_jsonl();
        let back = MetricLog::from_jsonl(&text).unwrap();
        assert_eq!(back, log);
        // shortest-roundtrip float formatting keeps re-serialization identical
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn record_iterators_split_by_kind() {
        let mut log = MetricLog::default();
        log.push(Record::Train { step: 1, tokens_seen: 10, loss: 1.0, lr: 0.1 });
        log.push(Record::Eval { step: 1, tokens_seen: 10, val_loss: 2.0, ppl: 2.0f64.exp() });
        assert_eq!(log.train_records().count(), 1);
        assert_eq!(log.eval_records().count(), 1);
    }
}

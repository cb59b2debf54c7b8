//! Per-epoch metrics records, one `key=value` line per epoch.

use std::fmt;
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when no evaluation split is available.
    pub eval_acc: Option<f64>,
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} lr={} train_loss={} train_acc={} eval_acc=",
            self.epoch, self.lr, self.train_loss, self.train_acc
        )?;
        match self.eval_acc {
            Some(a) => write!(f, "{a}"),
            None => f.write_str("na"),
        }
    }
}

#[derive(Debug, PartialEq, Eq, thiserror::Error)]
#[error("malformed metrics record: {0}")]
pub struct ParseMetricsError(String);

impl FromStr for MetricsRecord {
    type Err = ParseMetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut fields = std::collections::HashMap::new();
        for kv in s.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| ParseMetricsError(kv.into()))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| ParseMetricsError(format!("missing {k}")));
        let num = |k: &str| -> Result<f64, ParseMetricsError> {
            get(k)?.parse().map_err(|_| ParseMetricsError(format!("bad {k}")))
        };
        Ok(Self {
            epoch: get("epoch")?.parse().map_err(|_| ParseMetricsError("bad epoch".into()))?,
            lr: num("lr")?,
            train_loss: num("train_loss")?,
            train_acc: num("train_acc")?,
            eval_acc: match get("eval_acc")? {
                "na" => None,
                _ => Some(num("eval_acc")?),
            },
        })
    }
}

/// Overall accuracy as printed by `eval`.
pub fn format_oa(acc: f64) -> String {
    format!("OA: {:.2}", acc * 100.0)
}

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::RunConfig;

/// One row of the per-session table. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session: usize,
    pub train_acc: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_err: f64,
    pub base_acc: f64,
    /// Accuracy on classes introduced after the base session; absent at session 0.
    pub new_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config: RunConfig,
    /// Absent when the run reused supplied encoders.
    pub pretrain_loss_initial: Option<f64>,
    pub pretrain_loss_final: Option<f64>,
    pub per_session: Vec<SessionMetrics>,
    pub average_val_acc: f64,
    /// Base accuracy after the base session minus base accuracy after the last.
    pub forgetting: f64,
}

pub const CSV_HEADER: [&str; 7] = [
    "session",
    "train_acc",
    "train_loss",
    "val_acc",
    "val_err",
    "base_acc",
    "new_acc",
];

impl RunMetrics {
    pub fn from_sessions(
        config: RunConfig,
        pretrain_trace: &[f64],
        per_session: Vec<SessionMetrics>,
    ) -> Result<Self> {
        let (first, last) = match (per_session.first(), per_session.last()) {
            (Some(f), Some(l)) => (f.base_acc, l.base_acc),
            _ => return Err(Error::InsufficientData("run produced no sessions".into())),
        };
        let average_val_acc =
            per_session.iter().map(|s| s.val_acc).sum::<f64>() / per_session.len() as f64;
        Ok(Self {
            config,
            pretrain_loss_initial: pretrain_trace.first().copied(),
            pretrain_loss_final: pretrain_trace.last().copied(),
            per_session,
            average_val_acc,
            forgetting: first - last,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("malformed metrics json: {e}")))
    }

    pub fn to_csv(&self) -> Result<String> {
        sessions_to_csv(&self.per_session)
    }
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Io(format!("csv: {e}"))
}

pub fn sessions_to_csv(rows: &[SessionMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.session.to_string(),
            r.train_acc.to_string(),
            r.train_loss.to_string(),
            r.val_acc.to_string(),
            r.val_err.to_string(),
            r.base_acc.to_string(),
            r.new_acc.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(csv_err)?;
    String::from_utf8(bytes).map_err(csv_err)
}

pub fn sessions_from_csv(text: &str) -> Result<Vec<SessionMetrics>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Config(format!(
            "metrics csv header {:?} does not match {:?}",
            header, CSV_HEADER
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    line: i + 2,
                    key: CSV_HEADER[j].to_string(),
                    message: e.to_string(),
                })
        };
        let new_acc = match rec.get(6).unwrap_or("") {
            "" => None,
            _ => Some(num(6)?),
        };
        out.push(SessionMetrics {
            session: num(0)? as usize,
            train_acc: num(1)?,
            train_loss: num(2)?,
            val_acc: num(3)?,
            val_err: num(4)?,
            base_acc: num(5)?,
            new_acc,
        });
    }
    Ok(out)
}

/// The four reported metrics, in table order.
pub type MetricGetter = fn(&SessionMetrics) -> f64;

pub const TABLE_METRICS: [(&str, MetricGetter); 4] = [
    ("Train Accuracy", |s| s.train_acc),
    ("Train Loss", |s| s.train_loss),
    ("Validation Accuracy", |s| s.val_acc),
    ("Validation Error rate", |s| s.val_err),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub metric: String,
    pub session: usize,
    pub values: Vec<f64>,
}

/// Metric-major comparison: every metric, then every session, one column per variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub variants: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn from_runs(variants: Vec<String>, runs: &[RunMetrics]) -> Result<Self> {
        if variants.len() != runs.len() {
            return Err(Error::Config("one label per run required".into()));
        }
        let sessions = runs.iter().map(|r| r.per_session.len()).min().unwrap_or(0);
        let mut rows = Vec::new();
        for (name, get) in TABLE_METRICS {
            for s in 0..sessions {
                rows.push(ComparisonRow {
                    metric: name.to_string(),
                    session: s,
                    values: runs.iter().map(|r| get(&r.per_session[s])).collect(),
                });
            }
        }
        Ok(Self { variants, rows })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string(), "session".to_string()];
        header.extend(self.variants.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.metric.clone(), row.session.to_string()];
            rec.extend(row.values.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(csv_err)?;
        String::from_utf8(bytes).map_err(csv_err)
    }

    /// Fixed-width text rendering for terminals.
    pub fn render(&self) -> String {
        let label_w = 24;
        let col_w = self
            .variants
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(8)
            .max(10)
            + 2;
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}{:>8}", "metric", "session");
        for v in &self.variants {
            let _ = write!(out, "{v:>col_w$}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<label_w$}{:>8}", row.metric, row.session);
            for v in &row.values {
                let _ = write!(out, "{:>col_w$.4}", v);
            }
            out.push('\n');
        }
        out
    }
}

/// The per-session table of a single run, metric-major.
pub fn render_run(metrics: &RunMetrics) -> String {
    ComparisonTable::from_runs(vec!["value".into()], std::slice::from_ref(metrics))
        .map(|t| t.render())
        .unwrap_or_default()
}

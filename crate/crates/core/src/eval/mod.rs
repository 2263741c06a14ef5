//! Tracking metrics, per-attribute breakdowns and ablation tables.

mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use metrics::{
    ao_sr, precision_at, precision_curve, success_auc, success_curve, success_threshold, AoSr, PRECISION_MAX_TAU,
    PRECISION_TAU, SUCCESS_STEPS,
};

use crate::data::{Attribute, SequenceRecord};
use crate::error::{Error, Result};
use crate::geometry::{compute_iou, Rect};
use crate::model::Model;
use crate::tracker::{Tracker, TrackerConfig};

/// Predictions and ground truth of one sequence, with per-frame errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub sequence: String,
    pub pred: Vec<Rect>,
    pub gt: Vec<Rect>,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
    pub attributes: Vec<Attribute>,
}

impl RunResult {
    pub fn new(sequence: impl Into<String>, pred: Vec<Rect>, gt: Vec<Rect>, attributes: Vec<Attribute>) -> Result<Self> {
        let sequence = sequence.into();
        if pred.len() != gt.len() {
            return Err(Error::Data(format!(
                "{sequence}: {} predicted boxes but {} ground-truth boxes",
                pred.len(),
                gt.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::Data(format!("{sequence}: no frames")));
        }
        let ious = pred.iter().zip(&gt).map(|(p, g)| compute_iou(p, g)).collect();
        let center_errors = pred.iter().zip(&gt).map(|(p, g)| p.center_distance(g)).collect();
        Ok(RunResult {
            sequence,
            pred,
            gt,
            ious,
            center_errors,
            attributes,
        })
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let a = ao_sr(&self.ious)?;
        Ok(Metrics {
            auc: success_auc(&self.ious)?,
            precision: precision_at(&self.center_errors, PRECISION_TAU)?,
            ao: a.ao,
            sr50: a.sr50,
            sr75: a.sr75,
            frames: self.ious.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub precision: f64,
    /// Average overlap, which is also the mean IoU.
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub frames: usize,
}

impl Metrics {
    /// Equal-weight mean over sequences.
    pub fn mean(items: &[Metrics]) -> Result<Metrics> {
        if items.is_empty() {
            return Err(Error::Data("no sequences to aggregate".into()));
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Ok(Metrics {
            auc: avg(|m| m.auc),
            precision: avg(|m| m.precision),
            ao: avg(|m| m.ao),
            sr50: avg(|m| m.sr50),
            sr75: avg(|m| m.sr75),
            frames: items.iter().map(|m| m.frames).sum(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    /// Sequence name, or `ALL` / `attr:<tag>` for aggregate rows.
    pub sequence: String,
    pub metrics: Metrics,
}

pub const AGGREGATE: &str = "ALL";

/// Per-sequence rows followed by aggregate and per-attribute rows for each config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl MetricReport {
    pub fn add_config(&mut self, config: &str, runs: &[RunResult]) -> Result<()> {
        let per: Vec<Metrics> = runs.iter().map(RunResult::metrics).collect::<Result<_>>()?;
        for (r, m) in runs.iter().zip(&per) {
            self.rows.push(ReportRow {
                config: config.into(),
                sequence: r.sequence.clone(),
                metrics: *m,
            });
        }
        self.rows.push(ReportRow {
            config: config.into(),
            sequence: AGGREGATE.into(),
            metrics: Metrics::mean(&per)?,
        });
        for a in Attribute::ALL {
            let sel: Vec<Metrics> = runs
                .iter()
                .zip(&per)
                .filter(|(r, _)| r.attributes.contains(&a))
                .map(|(_, m)| *m)
                .collect();
            if !sel.is_empty() {
                self.rows.push(ReportRow {
                    config: config.into(),
                    sequence: format!("attr:{}", a.name()),
                    metrics: Metrics::mean(&sel)?,
                });
            }
        }
        Ok(())
    }

    pub fn aggregate(&self, config: &str) -> Option<&Metrics> {
        self.rows
            .iter()
            .find(|r| r.config == config && r.sequence == AGGREGATE)
            .map(|r| &r.metrics)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("report serialization: {e}")))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,sequence,frames,auc,precision,ao,sr50,sr75\n");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.config, r.sequence, m.frames, m.auc, m.precision, m.ao, m.sr50, m.sr75
            );
        }
        s
    }
}

/// `(threshold, value)` points.
pub type Curve = Vec<(f64, f64)>;

/// Success and precision curves averaged over sequences with equal weight.
pub fn mean_curves(runs: &[RunResult]) -> Result<(Curve, Curve)> {
    if runs.is_empty() {
        return Err(Error::Data("no sequences".into()));
    }
    let n = runs.len() as f64;
    let mut succ = vec![(0.0, 0.0); SUCCESS_STEPS];
    let mut prec = vec![(0.0, 0.0); PRECISION_MAX_TAU + 1];
    for r in runs {
        for (acc, (t, v)) in succ.iter_mut().zip(success_curve(&r.ious)?) {
            *acc = (t, acc.1 + v / n);
        }
        for (acc, (t, v)) in prec.iter_mut().zip(precision_curve(&r.center_errors)?) {
            *acc = (t, acc.1 + v / n);
        }
    }
    Ok((succ, prec))
}

/// `threshold,value` lines.
pub fn curve_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("threshold,value\n");
    for (t, v) in curve {
        let _ = writeln!(s, "{t},{v}");
    }
    s
}

/// Tracks every sequence (in parallel) and scores the result.
pub fn evaluate(model: &Model, cfg: &TrackerConfig, sequences: &[SequenceRecord]) -> Result<Vec<RunResult>> {
    let tracker = Tracker::new(model, cfg.clone())?;
    crate::par::map_range(sequences.len(), |i| {
        let s = &sequences[i];
        s.validate()?;
        let run = tracker.run(&s.frames, &s.gt[0])?;
        RunResult::new(s.name.clone(), run.boxes, s.gt.clone(), s.attributes.clone())
    })
    .into_iter()
    .collect()
}

pub struct AblationEntry<'a> {
    pub name: String,
    /// A model that failed to load yields a failed row.
    pub model: std::result::Result<&'a Model, String>,
    pub tracker: TrackerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// `None` when the configuration failed.
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub from: String,
    pub to: String,
    pub auc: f64,
    pub precision: f64,
    pub ao: f64,
    pub sr50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// `to − from` for every pair of successful rows, in row order.
    pub deltas: Vec<AblationDelta>,
    pub report: MetricReport,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,status,auc,precision,ao,sr50,sr75\n");
        for r in &self.rows {
            match (&r.metrics, &r.error) {
                (Some(m), _) => {
                    let _ = writeln!(s, "{},ok,{},{},{},{},{}", r.name, m.auc, m.precision, m.ao, m.sr50, m.sr75);
                }
                (None, e) => {
                    let msg = e.as_deref().unwrap_or("").replace([',', '\n'], " ");
                    let _ = writeln!(s, "{},failed: {msg},,,,,", r.name);
                }
            }
        }
        s
    }
}

/// Runs every configuration on the same sequences. A failing configuration
/// yields a row marked failed; the others still run.
pub fn ablation_report(entries: &[AblationEntry<'_>], sequences: &[SequenceRecord]) -> Result<AblationTable> {
    if entries.len() < 2 {
        return Err(Error::Config("an ablation needs at least two configurations".into()));
    }
    let mut rows = Vec::new();
    let mut report = MetricReport::default();
    for e in entries {
        let outcome = e.model.clone().map_err(Error::Data).and_then(|m| {
            let runs = evaluate(m, &e.tracker, sequences)?;
            let mut part = MetricReport::default();
            part.add_config(&e.name, &runs)?;
            Ok(part)
        });
        match outcome {
            Ok(part) => {
                rows.push(AblationRow {
                    name: e.name.clone(),
                    metrics: part.aggregate(&e.name).copied(),
                    error: None,
                });
                report.rows.extend(part.rows);
            }
            Err(err) => rows.push(AblationRow {
                name: e.name.clone(),
                metrics: None,
                error: Some(err.to_string()),
            }),
        }
    }
    let mut deltas = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if let (Some(a), Some(b)) = (&rows[i].metrics, &rows[j].metrics) {
                deltas.push(AblationDelta {
                    from: rows[i].name.clone(),
                    to: rows[j].name.clone(),
                    auc: b.auc - a.auc,
                    precision: b.precision - a.precision,
                    ao: b.ao - a.ao,
                    sr50: b.sr50 - a.sr50,
                });
            }
        }
    }
    Ok(AblationTable { rows, deltas, report })
}

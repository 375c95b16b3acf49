//! Finding violations, ranking the copyrighted set by reproduction
//! distance, and the two ranking metrics.
//!
//! Rankings put the most faithful reproduction first (ascending distance).
//! AUC-Gain is the trapezoidal area under the cumulative gains curve,
//! divided by the area of the ideal curve, so a perfect ranking scores 1.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{write_atomic, ContainerError};
use crate::datagen::{Label, SequenceSample};
use crate::models::{distance, to_f64, to_precision, Mode, ModelError, Scalar, Seq2SeqModel};

pub const REPORT_SCHEMA: &str = "cap.audit-report";
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_K_LIST: [usize; 4] = [5, 10, 50, 100];
pub const DEFAULT_DELTA_PERCENTILE: f64 = 0.2;

const INFERENCE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("length mismatch: {items} items, {distances} distances")]
    LengthMismatch { items: usize, distances: usize },
    #[error("K = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("no member labels in the ranking")]
    NoMembers,
    #[error("ranking contains an unlabeled sample (id {0})")]
    Unlabeled(u64),
    #[error("invalid delta {0}")]
    InvalidDelta(f64),
    #[error("{0} model is not in inference mode")]
    NotFrozen(&'static str),
    #[error("empty copyrighted set")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("report error: {0}")]
    Report(String),
    #[error("unsupported report schema {schema} v{version}")]
    Schema { schema: String, version: u32 },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Output of the violation search over the copyrighted set.
#[derive(Debug, Clone, PartialEq)]
pub struct Violations {
    /// Sample ids with distance strictly below `delta`, in input order.
    pub ids: Vec<u64>,
    /// Generated keys aligned with `ids`.
    pub prompts: Vec<Array2<f64>>,
    /// Distance of every input element, in input order.
    pub distances: Vec<f64>,
}

/// Generate a key for every value with `theta`, reproduce it with `phi`
/// and flag values whose reproduction distance is below `delta`.
pub fn find_violations<T: Scalar>(
    theta: &Seq2SeqModel<T>,
    phi: &Seq2SeqModel<T>,
    d2: &[&SequenceSample],
    delta: f64,
) -> Result<Violations, AuditError> {
    if theta.mode() != Mode::Inference {
        return Err(AuditError::NotFrozen("prompt generator"));
    }
    if phi.mode() != Mode::Inference {
        return Err(AuditError::NotFrozen("target"));
    }
    if delta.is_nan() || delta < 0.0 {
        return Err(AuditError::InvalidDelta(delta));
    }
    let mut out = Violations {
        ids: Vec::new(),
        prompts: Vec::new(),
        distances: Vec::with_capacity(d2.len()),
    };
    for chunk in d2.chunks(INFERENCE_CHUNK) {
        let values: Vec<Array2<T>> = chunk.iter().map(|s| to_precision(&s.value)).collect();
        let keys = theta.forward_batch(&values)?;
        let reproduced = phi.forward_batch(&keys)?;
        for (((s, v), k), v_hat) in chunk.iter().zip(&values).zip(keys).zip(&reproduced) {
            let eps = distance(v, v_hat)?;
            out.distances.push(eps);
            if eps < delta {
                out.ids.push(s.sample_id);
                out.prompts.push(to_f64(&k));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub sample_id: u64,
    pub distance: f64,
    pub label: Label,
}

/// Sort by distance ascending, ties by sample id.
pub fn rank_by_distance(
    d2: &[&SequenceSample],
    distances: &[f64],
) -> Result<Vec<RankedEntry>, AuditError> {
    if d2.len() != distances.len() {
        return Err(AuditError::LengthMismatch {
            items: d2.len(),
            distances: distances.len(),
        });
    }
    let mut ranked: Vec<RankedEntry> = d2
        .iter()
        .zip(distances)
        .map(|(s, &d)| RankedEntry {
            sample_id: s.sample_id,
            distance: d,
            label: s.label,
        })
        .collect();
    ranked.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.sample_id.cmp(&b.sample_id)));
    Ok(ranked)
}

fn members(labels: &[Label]) -> Result<Vec<bool>, AuditError> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Label::MemberCopyrighted => Ok(true),
            Label::NonmemberCopyrighted => Ok(false),
            Label::None => Err(AuditError::Unlabeled(i as u64)),
        })
        .collect()
}

/// Percentage of members among the first `k` ranked labels.
pub fn precision_at_k(labels: &[Label], k: usize) -> Result<f64, AuditError> {
    if k == 0 || k > labels.len() {
        return Err(AuditError::KOutOfRange { k, n: labels.len() });
    }
    let hits = members(&labels[..k])?.into_iter().filter(|&m| m).count();
    Ok(100.0 * hits as f64 / k as f64)
}

fn gains_area(is_member: impl Iterator<Item = bool>, n: usize, total: usize) -> f64 {
    let (mut found, mut area) = (0usize, 0.0);
    for m in is_member {
        let prev = found;
        found += usize::from(m);
        area += (prev + found) as f64 / 2.0;
    }
    area / (n as f64 * total as f64)
}

/// Area under the cumulative gains curve over the area of the ideal curve.
pub fn auc_gain(labels: &[Label]) -> Result<f64, AuditError> {
    let m = members(labels)?;
    let total = m.iter().filter(|&&x| x).count();
    if total == 0 {
        return Err(AuditError::NoMembers);
    }
    let n = m.len();
    let raw = gains_area(m.iter().copied(), n, total);
    let ideal = gains_area((0..n).map(|i| i < total), n, total);
    Ok(raw / ideal)
}

/// Linearly interpolated `q`-quantile of `xs`.
pub fn percentile(xs: &[f64], q: f64) -> Option<f64> {
    if xs.is_empty() || !(0.0..=1.0).contains(&q) || xs.iter().any(|x| x.is_nan()) {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

/// How the violation threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum DeltaRule {
    /// Quantile of the distances over the copyrighted set.
    Percentile(f64),
    Fixed(f64),
}

impl Default for DeltaRule {
    fn default() -> Self {
        DeltaRule::Percentile(DEFAULT_DELTA_PERCENTILE)
    }
}

impl DeltaRule {
    pub fn resolve(&self, distances: &[f64]) -> Result<f64, AuditError> {
        match *self {
            DeltaRule::Fixed(d) if d >= 0.0 => Ok(d),
            DeltaRule::Fixed(d) => Err(AuditError::InvalidDelta(d)),
            DeltaRule::Percentile(q) => percentile(distances, q).ok_or(AuditError::InvalidDelta(q)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub data: u64,
    pub target: u64,
    pub prompter: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub schema: String,
    pub schema_version: u32,
    pub fingerprint: String,
    pub seeds: RunSeeds,
    pub optimized: bool,
    pub ranked: Vec<RankedEntry>,
    pub violations: Vec<u64>,
    /// Keys that triggered each violation, in normalized units.
    pub prompts: Vec<Array2<f64>>,
    pub precision_at: BTreeMap<usize, f64>,
    pub auc_gain: f64,
    pub delta_threshold: f64,
    /// Kept out of the report file so reruns are byte-identical; see
    /// [`timing_path`].
    #[serde(skip)]
    pub runtime_seconds: f64,
}

/// Audit a trained pair end to end: violations at the resolved threshold,
/// the ranking and its metrics. K values above `|d2|` are skipped.
#[allow(clippy::too_many_arguments)]
pub fn run_audit<T: Scalar>(
    theta: &Seq2SeqModel<T>,
    phi: &Seq2SeqModel<T>,
    d2: &[&SequenceSample],
    delta: DeltaRule,
    k_list: &[usize],
    fingerprint: &str,
    seeds: RunSeeds,
    optimized: bool,
) -> Result<AuditReport, AuditError> {
    if d2.is_empty() {
        return Err(AuditError::Empty);
    }
    let started = std::time::Instant::now();
    let all = find_violations(theta, phi, d2, f64::MAX)?;
    let delta_threshold = delta.resolve(&all.distances)?;
    let mut violations = Vec::new();
    let mut prompts = Vec::new();
    for ((id, k), &d) in all.ids.into_iter().zip(all.prompts).zip(&all.distances) {
        if d < delta_threshold {
            violations.push(id);
            prompts.push(k);
        }
    }
    let ranked = rank_by_distance(d2, &all.distances)?;
    let labels: Vec<Label> = ranked.iter().map(|r| r.label).collect();
    let mut precision_at = BTreeMap::new();
    for &k in k_list {
        if k > labels.len() {
            log::warn!("skipping Precision@{k}: only {} ranked items", labels.len());
            continue;
        }
        precision_at.insert(k, precision_at_k(&labels, k)?);
    }
    let auc = auc_gain(&labels)?;
    Ok(AuditReport {
        schema: REPORT_SCHEMA.into(),
        schema_version: REPORT_SCHEMA_VERSION,
        fingerprint: fingerprint.into(),
        seeds,
        optimized,
        ranked,
        violations,
        prompts,
        precision_at,
        auc_gain: auc,
        delta_threshold,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Sidecar file holding the wall-clock runtime of a report.
pub fn timing_path(report_path: &Path) -> PathBuf {
    let mut s = report_path.as_os_str().to_owned();
    s.push(".timing.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Timing {
    runtime_seconds: f64,
}

pub fn emit_report(report: &AuditReport, path: &Path) -> Result<(), AuditError> {
    let mut body = serde_json::to_vec_pretty(report).map_err(|e| AuditError::Report(e.to_string()))?;
    body.push(b'\n');
    write_atomic(path, &body)?;
    let timing = serde_json::to_vec(&Timing {
        runtime_seconds: report.runtime_seconds,
    })
    .map_err(|e| AuditError::Report(e.to_string()))?;
    write_atomic(&timing_path(path), &timing)?;
    Ok(())
}

/// Read a report, and its runtime from the sidecar when present.
pub fn read_report(path: &Path) -> Result<AuditReport, AuditError> {
    let bytes = std::fs::read(path).map_err(|e| ContainerError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut report: AuditReport =
        serde_json::from_slice(&bytes).map_err(|e| AuditError::Report(format!("{}: {e}", path.display())))?;
    if report.schema != REPORT_SCHEMA || report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(AuditError::Schema {
            schema: report.schema,
            version: report.schema_version,
        });
    }
    if let Ok(t) = std::fs::read(timing_path(path)) {
        if let Ok(t) = serde_json::from_slice::<Timing>(&t) {
            report.runtime_seconds = t.runtime_seconds;
        }
    }
    Ok(report)
}

/// Flat export: one row per ranked element.
pub fn write_csv(report: &AuditReport, path: &Path) -> Result<(), AuditError> {
    let violating: std::collections::BTreeSet<u64> = report.violations.iter().copied().collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "distance", "label", "violation"])?;
    for r in &report.ranked {
        w.write_record([
            r.sample_id.to_string(),
            format!("{:e}", r.distance),
            r.label.as_str().to_string(),
            violating.contains(&r.sample_id).to_string(),
        ])?;
    }
    let mut buf = w.into_inner().map_err(|e| AuditError::Report(e.to_string()))?;
    buf.flush().ok();
    write_atomic(path, &buf)?;
    Ok(())
}

//! Frame-wise accuracy, segmental edit score and segmental F1@τ, plus the
//! per-view-group report.
//!
//! All scores are percentages in `[0, 100]`. Segment F1 uses the greedy
//! matcher common to action segmentation evaluators: predicted segments are
//! visited in temporal order, each picks the same-label ground-truth segment
//! with the highest IoU (ties go to the earlier one) and counts as a true
//! positive if that IoU reaches τ and the segment is still unmatched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{segments_from_labels, Dataset, Segment, SplitSpec};
use crate::error::{arg_err, Result};
use crate::model::ModelState;
use crate::scalar::Scalar;

/// Overlap thresholds reported in every table.
pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Labels excluded from scoring. Empty by default: every class counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    #[serde(default)]
    pub ignore_labels: BTreeSet<u16>,
}

fn check_lengths(pred: &[u16], gt: &[u16]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(arg_err!(
            "prediction has {} frames, ground truth has {}",
            pred.len(),
            gt.len()
        ));
    }
    Ok(())
}

fn kept_segments(labels: &[u16], opts: &MetricOptions) -> Vec<Segment> {
    segments_from_labels(labels)
        .into_iter()
        .filter(|s| !opts.ignore_labels.contains(&s.label))
        .collect()
}

/// `100 · #(pred == gt) / T`. Frames whose ground truth is ignored are left
/// out; if nothing is left the score is 100.
pub fn frame_accuracy_with(pred: &[u16], gt: &[u16], opts: &MetricOptions) -> Result<f64> {
    check_lengths(pred, gt)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        if opts.ignore_labels.contains(g) {
            continue;
        }
        total += 1;
        hit += usize::from(p == g);
    }
    Ok(if total == 0 { 100.0 } else { 100.0 * hit as f64 / total as f64 })
}

pub fn frame_accuracy(pred: &[u16], gt: &[u16]) -> Result<f64> {
    frame_accuracy_with(pred, gt, &MetricOptions::default())
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (row[j + 1] + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

pub fn segmental_edit_score_with(pred: &[u16], gt: &[u16], opts: &MetricOptions) -> f64 {
    let p: Vec<u16> = kept_segments(pred, opts).iter().map(|s| s.label).collect();
    let g: Vec<u16> = kept_segments(gt, opts).iter().map(|s| s.label).collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&p, &g) as f64 / longest as f64)
}

/// `100 · (1 − d / max(|P|, |G|))` on the segment label sequences.
pub fn segmental_edit_score(pred: &[u16], gt: &[u16]) -> f64 {
    segmental_edit_score_with(pred, gt, &MetricOptions::default())
}

/// Intersection over union of two frame intervals.
pub fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// True positives, false positives and false negatives of the greedy matcher.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            100.0
        } else {
            200.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn greedy_match(pred: &[Segment], gt: &[Segment], tau: f64) -> MatchCounts {
    let mut matched = vec![false; gt.len()];
    let (mut tp, mut fp) = (0, 0);
    for p in pred {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if g.label != p.label {
                continue;
            }
            let v = iou(p, g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, v)) if v >= tau && !matched[j] => {
                matched[j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    MatchCounts { tp, fp, fn_: gt.len() - tp }
}

pub fn segmental_f1_with(pred: &[u16], gt: &[u16], tau: f64, opts: &MetricOptions) -> Result<f64> {
    check_lengths(pred, gt)?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(arg_err!("overlap threshold {tau} outside (0, 1]"));
    }
    let counts = greedy_match(&kept_segments(pred, opts), &kept_segments(gt, opts), tau);
    Ok(counts.f1())
}

/// Segmental F1 at overlap threshold `tau`.
pub fn segmental_f1(pred: &[u16], gt: &[u16], tau: f64) -> Result<f64> {
    segmental_f1_with(pred, gt, tau, &MetricOptions::default())
}

/// Every metric for one recording.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecordingScores {
    /// F1 at each of [`F1_THRESHOLDS`].
    pub f1: [f64; 3],
    pub edit: f64,
    pub acc: f64,
}

pub fn score_recording(pred: &[u16], gt: &[u16], opts: &MetricOptions) -> Result<RecordingScores> {
    let mut f1 = [0.0; 3];
    for (slot, &tau) in f1.iter_mut().zip(&F1_THRESHOLDS) {
        *slot = segmental_f1_with(pred, gt, tau, opts)?;
    }
    Ok(RecordingScores {
        f1,
        edit: segmental_edit_score_with(pred, gt, opts),
        acc: frame_accuracy_with(pred, gt, opts)?,
    })
}

/// Macro-averaged metrics of one view group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub name: String,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub edit: f64,
    pub acc: f64,
    pub count: usize,
}

/// Named metric columns of a [`GroupMetrics`] row, in CSV order.
pub const METRIC_COLUMNS: [&str; 5] = ["f1_10", "f1_25", "f1_50", "edit", "acc"];

impl GroupMetrics {
    pub fn values(&self) -> [f64; 5] {
        [self.f1_10, self.f1_25, self.f1_50, self.edit, self.acc]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Seen first, then unseen groups by name; empty groups are absent.
    pub groups: Vec<GroupMetrics>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Groups recordings by name and macro-averages within each group.
    /// `group_order` fixes the row order; names with no recordings produce a
    /// warning instead of a row.
    pub fn aggregate(group_order: &[String], scored: &[(String, RecordingScores)]) -> Self {
        let mut by_group: BTreeMap<&str, Vec<&RecordingScores>> = BTreeMap::new();
        for (name, s) in scored {
            by_group.entry(name.as_str()).or_default().push(s);
        }
        let mut report = EvalReport::default();
        for name in group_order {
            let Some(list) = by_group.get(name.as_str()) else {
                let msg = format!("group {name:?} has no recordings to evaluate; omitted");
                warn!("{msg}");
                report.warnings.push(msg);
                continue;
            };
            let n = list.len() as f64;
            let mean = |f: &dyn Fn(&RecordingScores) -> f64| list.iter().map(|s| f(s)).sum::<f64>() / n;
            report.groups.push(GroupMetrics {
                name: name.clone(),
                f1_10: mean(&|s| s.f1[0]),
                f1_25: mean(&|s| s.f1[1]),
                f1_50: mean(&|s| s.f1[2]),
                edit: mean(&|s| s.edit),
                acc: mean(&|s| s.acc),
                count: list.len(),
            });
        }
        report
    }

    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Mean of a metric over every group except `seen`, or `None` if there
    /// is no unseen group in the report.
    pub fn unseen_mean(&self, metric: impl Fn(&GroupMetrics) -> f64) -> Option<f64> {
        let unseen: Vec<f64> = self
            .groups
            .iter()
            .filter(|g| g.name != crate::data::SEEN_GROUP)
            .map(metric)
            .collect();
        (!unseen.is_empty()).then(|| unseen.iter().sum::<f64>() / unseen.len() as f64)
    }

    pub const CSV_HEADER: &'static str = "group,f1_10,f1_25,f1_50,edit,acc,count";

    /// CSV with [`Self::CSV_HEADER`]; values printed with six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for g in &self.groups {
            let _ = write!(out, "{}", g.name);
            for v in g.values() {
                let _ = write!(out, ",{v:.6}");
            }
            let _ = writeln!(out, ",{}", g.count);
        }
        out
    }
}

/// Segments every evaluation recording with the final stage and scores it
/// against its labels, grouped by the split's view groups.
pub fn evaluate_all<S: Scalar>(model: &ModelState<S>, dataset: &Dataset, split: &SplitSpec) -> Result<EvalReport> {
    evaluate_all_with(model, dataset, split, &MetricOptions::default())
}

pub fn evaluate_all_with<S: Scalar>(
    model: &ModelState<S>,
    dataset: &Dataset,
    split: &SplitSpec,
    opts: &MetricOptions,
) -> Result<EvalReport> {
    let mut scored = Vec::new();
    let mut warnings = Vec::new();
    for rec in &dataset.recordings {
        if !split.is_evaluation_sequence(rec.sequence_id) {
            continue;
        }
        let Some(group) = split.group_of(rec.view_id) else {
            let msg = format!("view {} is in no split group; its recordings are skipped", rec.view_id);
            if !warnings.contains(&msg) {
                warn!("{msg}");
                warnings.push(msg);
            }
            continue;
        };
        let pred = model.segment(&rec.features.to_tensor()?)?;
        scored.push((group.to_string(), score_recording(&pred, &rec.labels, opts)?));
    }
    let mut report = EvalReport::aggregate(&split.group_names(), &scored);
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    Ok(report)
}

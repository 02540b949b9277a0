//! Multi-view recordings, the seen/unseen view split, the synthetic
//! generator and the samplers that feed the cross-view losses.

mod generate;
pub mod io;
mod sampling;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;

pub use generate::{generate_synthetic, GeneratedDataset, GeneratorConfig};
pub use sampling::{apply_sync_shift, sample_action_pair, sample_view_pair, ActionIndex, Occurrence};

/// Name of the evaluation group holding the training views.
pub const SEEN_GROUP: &str = "seen";

/// `T×H` per-frame features of one recording, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames * dim != data.len() {
            return Err(shape_err!("{frames}×{dim} features need {} values, got {}", frames * dim, data.len()));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        Tensor::from_f64(vec![self.frames, self.dim], &self.data)
    }
}

/// One view of one sequence with its frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub sequence_id: u32,
    pub view_id: u32,
    pub features: FeatureSequence,
    pub labels: Vec<u16>,
}

impl Recording {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.features.frames() != self.labels.len() {
            return Err(shape_err!(
                "sequence {} view {}: {} feature frames but {} labels",
                self.sequence_id,
                self.view_id,
                self.features.frames(),
                self.labels.len()
            ));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(arg_err!(
                "sequence {} view {}: label {bad} outside [0, {num_classes})",
                self.sequence_id,
                self.view_id
            ));
        }
        Ok(())
    }
}

/// Contiguous run `[start, end)` of one label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: u16,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Maximal constant runs of `labels`, in order.
pub fn segments_from_labels(labels: &[u16]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &label) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(seg) if seg.label == label => seg.end = t + 1,
            _ => out.push(Segment { start: t, end: t + 1, label }),
        }
    }
    out
}

/// Frame labels covered by `segments`.
pub fn labels_from_segments(segments: &[Segment]) -> Vec<u16> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
        .collect()
}

/// Which views train the model and how the held-out views are grouped for
/// evaluation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_views: BTreeSet<u32>,
    pub unseen_view_groups: BTreeMap<String, BTreeSet<u32>>,
    /// Sequences held out of training; evaluation runs on these. Empty means
    /// every sequence is used for both.
    #[serde(default)]
    pub test_sequences: BTreeSet<u32>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seen_views.len() < 2 {
            return Err(arg_err!("need at least two seen views, got {}", self.seen_views.len()));
        }
        for (name, views) in &self.unseen_view_groups {
            if name == SEEN_GROUP {
                return Err(arg_err!("unseen group may not be called {SEEN_GROUP:?}"));
            }
            if let Some(v) = views.intersection(&self.seen_views).next() {
                return Err(arg_err!("view {v} is both seen and in unseen group {name:?}"));
            }
        }
        let mut owner: BTreeMap<u32, &str> = BTreeMap::new();
        for (name, views) in &self.unseen_view_groups {
            for &v in views {
                if let Some(other) = owner.insert(v, name) {
                    return Err(arg_err!("view {v} is in unseen groups {other:?} and {name:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn is_seen(&self, view: u32) -> bool {
        self.seen_views.contains(&view)
    }

    /// Evaluation group of a view, if any.
    pub fn group_of(&self, view: u32) -> Option<&str> {
        if self.is_seen(view) {
            return Some(SEEN_GROUP);
        }
        self.unseen_view_groups
            .iter()
            .find(|(_, views)| views.contains(&view))
            .map(|(name, _)| name.as_str())
    }

    /// Group names in report order: seen first, then unseen groups by name.
    pub fn group_names(&self) -> Vec<String> {
        std::iter::once(SEEN_GROUP.to_string())
            .chain(self.unseen_view_groups.keys().cloned())
            .collect()
    }

    pub fn is_training_sequence(&self, sequence: u32) -> bool {
        !self.test_sequences.contains(&sequence)
    }

    pub fn is_evaluation_sequence(&self, sequence: u32) -> bool {
        self.test_sequences.is_empty() || self.test_sequences.contains(&sequence)
    }
}

/// A collection of recordings sharing class and feature dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_names: Vec<String>,
    pub recordings: Vec<Recording>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.num_classes {
            return Err(arg_err!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            ));
        }
        for rec in &self.recordings {
            rec.validate(self.num_classes)?;
            if rec.features.dim() != self.feature_dim {
                return Err(shape_err!(
                    "sequence {} view {} has feature dim {}, dataset has {}",
                    rec.sequence_id,
                    rec.view_id,
                    rec.features.dim(),
                    self.feature_dim
                ));
            }
        }
        Ok(())
    }

    /// Sequence ids with at least two seen-view recordings, excluding test
    /// sequences.
    pub fn training_sequences(&self, split: &SplitSpec) -> Vec<u32> {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for rec in &self.recordings {
            if split.is_seen(rec.view_id) && split.is_training_sequence(rec.sequence_id) {
                *counts.entry(rec.sequence_id).or_default() += 1;
            }
        }
        counts.into_iter().filter(|&(_, n)| n >= 2).map(|(s, _)| s).collect()
    }

    /// Indices of the seen-view recordings of `sequence`, ordered by view.
    pub fn seen_recordings(&self, sequence: u32, split: &SplitSpec) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .recordings
            .iter()
            .enumerate()
            .filter(|(_, r)| r.sequence_id == sequence && split.is_seen(r.view_id))
            .map(|(i, _)| i)
            .collect();
        idx.sort_by_key(|&i| self.recordings[i].view_id);
        idx
    }
}

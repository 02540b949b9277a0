use rand::Rng;

use super::{segments_from_labels, Dataset, FeatureSequence, Recording, Segment, SplitSpec};
use crate::error::{arg_err, Result};

/// Picks an ordered pair of distinct seen-view recordings of `sequence`,
/// uniformly. Returns indices into `dataset.recordings`.
pub fn sample_view_pair<R: Rng + ?Sized>(
    dataset: &Dataset,
    sequence: u32,
    split: &SplitSpec,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let views = dataset.seen_recordings(sequence, split);
    if views.len() < 2 {
        return Err(arg_err!(
            "sequence {sequence} has {} seen views, need two",
            views.len()
        ));
    }
    let q = rng.random_range(0..views.len());
    let mut r = rng.random_range(0..views.len() - 1);
    if r >= q {
        r += 1;
    }
    Ok((views[q], views[r]))
}

/// One labelled segment of one recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Occurrence {
    pub recording: usize,
    pub sequence_id: u32,
    pub view_id: u32,
    pub segment: Segment,
}

/// Every seen-view, training-sequence segment occurrence, for action-pair
/// sampling.
#[derive(Clone, Debug)]
pub struct ActionIndex {
    occurrences: Vec<Occurrence>,
    by_label: Vec<Vec<usize>>,
    /// Occurrences with at least one partner, for `[cross-view, any-view]`.
    eligible: [Vec<usize>; 2],
}

impl ActionIndex {
    pub fn build(dataset: &Dataset, split: &SplitSpec) -> Self {
        let occurrences: Vec<Occurrence> = dataset
            .recordings
            .iter()
            .enumerate()
            .filter(|(_, r)| split.is_seen(r.view_id) && split.is_training_sequence(r.sequence_id))
            .flat_map(|(i, r)| {
                segments_from_labels(&r.labels).into_iter().map(move |segment| Occurrence {
                    recording: i,
                    sequence_id: r.sequence_id,
                    view_id: r.view_id,
                    segment,
                })
            })
            .collect();
        let mut by_label = vec![Vec::new(); dataset.num_classes.max(1)];
        for (i, o) in occurrences.iter().enumerate() {
            let l = o.segment.label as usize;
            if l >= by_label.len() {
                by_label.resize(l + 1, Vec::new());
            }
            by_label[l].push(i);
        }
        let mut index = Self {
            occurrences,
            by_label,
            eligible: [Vec::new(), Vec::new()],
        };
        for (slot, allow_same_view) in [false, true].into_iter().enumerate() {
            index.eligible[slot] = (0..index.occurrences.len())
                .filter(|&a| index.partner_iter(a, allow_same_view).next().is_some())
                .collect();
        }
        index
    }

    pub fn occurrences(&self) -> &[Occurrence] {
        &self.occurrences
    }

    fn partner_iter(&self, a: usize, allow_same_view: bool) -> impl Iterator<Item = usize> + '_ {
        let x = self.occurrences[a];
        self.by_label[x.segment.label as usize]
            .iter()
            .copied()
            .filter(move |&b| b != a && (allow_same_view || self.occurrences[b].view_id != x.view_id))
    }

    /// Valid partners of occurrence `a`.
    pub fn partners(&self, a: usize, allow_same_view: bool) -> Vec<usize> {
        self.partner_iter(a, allow_same_view).collect()
    }

    /// First occurrence uniform over all occurrences that have a partner
    /// (the same law as redrawing until one does), second uniform over its
    /// partners.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, allow_same_view: bool) -> Result<(Occurrence, Occurrence)> {
        let eligible = &self.eligible[usize::from(allow_same_view)];
        if eligible.is_empty() {
            return Err(arg_err!("no pair of same-label segments satisfies the view constraint"));
        }
        let a = eligible[rng.random_range(0..eligible.len())];
        let partners = self.partners(a, allow_same_view);
        let b = partners[rng.random_range(0..partners.len())];
        Ok((self.occurrences[a], self.occurrences[b]))
    }
}

/// Convenience wrapper building an [`ActionIndex`] for a single draw.
pub fn sample_action_pair<R: Rng + ?Sized>(
    dataset: &Dataset,
    split: &SplitSpec,
    rng: &mut R,
    allow_same_view: bool,
) -> Result<(Occurrence, Occurrence)> {
    ActionIndex::build(dataset, split).sample(rng, allow_same_view)
}

/// Delays the features by a random offset `o ∈ [0, delta_max]`, repeating the
/// first frame; labels stay put. Returns the shifted recording and `o`.
pub fn apply_sync_shift<R: Rng + ?Sized>(
    recording: &Recording,
    delta_max: usize,
    rng: &mut R,
) -> Result<(Recording, usize)> {
    let frames = recording.frames();
    if delta_max >= frames {
        return Err(arg_err!("shift bound {delta_max} must be below the {frames} frames"));
    }
    let offset = rng.random_range(0..=delta_max);
    if offset == 0 {
        return Ok((recording.clone(), 0));
    }
    let f = &recording.features;
    let mut data = Vec::with_capacity(f.data().len());
    for t in 0..frames {
        data.extend_from_slice(f.frame(t.saturating_sub(offset)));
    }
    let shifted = Recording {
        features: FeatureSequence::new(frames, f.dim(), data)?,
        ..recording.clone()
    };
    Ok((shifted, offset))
}

//! Synthetic multi-view recordings.
//!
//! Every class has a latent prototype `μ_c ~ N(0, I_H)`. A sequence is a
//! script of segments (no immediate label repeats, durations uniform in
//! `[min_duration, max_duration]`). View `v` observes frame `t` as
//! `A_v (μ_{a_t} + ε_t) + b_v` with `A_v = (1−ρ)·I + ρ·Q_v`, `Q_v` a random
//! orthogonal matrix, `b_v = ρ·bias_scale·n_v`, `n_v ~ N(0, I_H)` and
//! `ε_t ~ N(0, σ²I)` drawn once per sequence frame. All views of a sequence
//! observe the same latent stream through their own transform, so they are
//! frame-synchronised and share one label script.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)` with normal
//! variates from `rand_distr::StandardNormal`; both are fixed algorithms, so
//! output is identical across runs and platforms.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{labels_from_segments, Dataset, FeatureSequence, Recording, Segment, SplitSpec};
use crate::error::{arg_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_sequences: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub seen_views: usize,
    /// Unseen group name → number of views in it.
    pub unseen_groups: BTreeMap<String, usize>,
    pub mean_segments: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Per-frame latent noise standard deviation.
    pub noise_sigma: f64,
    /// Distance of every view transform from the identity, in `[0, 1]`.
    pub view_distortion: f64,
    /// Scale of the per-view offset relative to `view_distortion`.
    pub bias_scale: f64,
    /// Fraction of sequences held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_sequences: 60,
            num_classes: 6,
            feature_dim: 16,
            seen_views: 4,
            unseen_groups: [("unseen_ego".to_string(), 1), ("unseen_exo".to_string(), 1)].into(),
            mean_segments: 8,
            min_duration: 8,
            max_duration: 24,
            noise_sigma: 0.5,
            view_distortion: 0.6,
            bias_scale: 1.0,
            test_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(arg_err!("need at least two classes"));
        }
        if self.num_classes > u16::MAX as usize {
            return Err(arg_err!("too many classes"));
        }
        if self.seen_views < 2 {
            return Err(arg_err!("need at least two seen views"));
        }
        if self.num_sequences == 0 || self.feature_dim == 0 || self.mean_segments == 0 {
            return Err(arg_err!("num_sequences, feature_dim and mean_segments must be positive"));
        }
        if self.min_duration < 1 || self.min_duration > self.max_duration {
            return Err(arg_err!(
                "duration range [{}, {}] is invalid",
                self.min_duration,
                self.max_duration
            ));
        }
        if !(0.0..=1.0).contains(&self.view_distortion) {
            return Err(arg_err!("view_distortion must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.bias_scale >= 0.0) {
            return Err(arg_err!("noise_sigma and bias_scale must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(arg_err!("test_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub dataset: Dataset,
    pub split: SplitSpec,
    /// Ground-truth segment script of every sequence.
    pub scripts: BTreeMap<u32, Vec<Segment>>,
}

struct ViewTransform {
    matrix: Vec<f64>,
    bias: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Orthogonal matrix from Gram–Schmidt on a Gaussian matrix (rows).
fn random_orthogonal(rng: &mut ChaCha8Rng, h: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(h);
    while rows.len() < h {
        let mut v = normal_vec(rng, h);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

fn view_transform(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> ViewTransform {
    let h = cfg.feature_dim;
    let rho = cfg.view_distortion;
    let q = random_orthogonal(rng, h);
    let matrix = (0..h * h)
        .map(|i| {
            let eye = if i % (h + 1) == 0 { 1.0 } else { 0.0 };
            (1.0 - rho) * eye + rho * q[i]
        })
        .collect();
    let bias = normal_vec(rng, h)
        .into_iter()
        .map(|b| rho * cfg.bias_scale * b)
        .collect();
    ViewTransform { matrix, bias }
}

fn sample_script(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Vec<Segment> {
    let lo = cfg.mean_segments.div_ceil(2).max(1);
    let hi = (cfg.mean_segments * 3 / 2).max(lo);
    let count = rng.random_range(lo..=hi);
    let mut segments = Vec::with_capacity(count);
    let mut start = 0;
    let mut previous: Option<u16> = None;
    for _ in 0..count {
        let label = match previous {
            None => rng.random_range(0..cfg.num_classes) as u16,
            Some(p) => {
                let k = rng.random_range(0..cfg.num_classes - 1) as u16;
                if k >= p {
                    k + 1
                } else {
                    k
                }
            }
        };
        let duration = rng.random_range(cfg.min_duration..=cfg.max_duration);
        segments.push(Segment { start, end: start + duration, label });
        start += duration;
        previous = Some(label);
    }
    segments
}

/// Builds a seeded multi-view dataset and its split.
///
/// Views `0..seen_views` are seen; unseen groups follow in name order with
/// freshly drawn transforms. The last `⌊num_sequences · test_fraction⌋`
/// sequences are held out for evaluation.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let h = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes).map(|_| normal_vec(&mut rng, h)).collect();

    let mut seen_views = BTreeSet::new();
    let mut unseen_view_groups = BTreeMap::new();
    let mut transforms = Vec::new();
    for v in 0..cfg.seen_views {
        seen_views.insert(v as u32);
        transforms.push(view_transform(&mut rng, cfg));
    }
    for (name, &count) in &cfg.unseen_groups {
        let mut views = BTreeSet::new();
        for _ in 0..count {
            views.insert(transforms.len() as u32);
            transforms.push(view_transform(&mut rng, cfg));
        }
        unseen_view_groups.insert(name.clone(), views);
    }

    let num_test = (cfg.num_sequences as f64 * cfg.test_fraction).floor() as usize;
    let test_sequences: BTreeSet<u32> = ((cfg.num_sequences - num_test)..cfg.num_sequences)
        .map(|s| s as u32)
        .collect();

    let mut recordings = Vec::new();
    let mut scripts = BTreeMap::new();
    for s in 0..cfg.num_sequences {
        let script = sample_script(&mut rng, cfg);
        let labels = labels_from_segments(&script);
        let latent: Vec<f64> = labels
            .iter()
            .flat_map(|&label| {
                let noise = normal_vec(&mut rng, h);
                prototypes[label as usize]
                    .iter()
                    .zip(noise)
                    .map(|(&m, n)| m + cfg.noise_sigma * n)
                    .collect::<Vec<_>>()
            })
            .collect();
        for (v, transform) in transforms.iter().enumerate() {
            let mut data = Vec::with_capacity(labels.len() * h);
            for latent in latent.chunks_exact(h) {
                for i in 0..h {
                    let row = &transform.matrix[i * h..(i + 1) * h];
                    let y: f64 = row.iter().zip(latent).map(|(a, b)| a * b).sum();
                    data.push(y + transform.bias[i]);
                }
            }
            recordings.push(Recording {
                sequence_id: s as u32,
                view_id: v as u32,
                features: FeatureSequence::new(labels.len(), h, data)?,
                labels: labels.clone(),
            });
        }
        scripts.insert(s as u32, script);
    }

    let dataset = Dataset {
        num_classes: cfg.num_classes,
        feature_dim: h,
        class_names: (0..cfg.num_classes).map(|c| format!("action_{c}")).collect(),
        recordings,
    };
    let split = SplitSpec {
        seen_views,
        unseen_view_groups,
        test_sequences,
    };
    split.validate()?;
    Ok(GeneratedDataset { dataset, split, scripts })
}

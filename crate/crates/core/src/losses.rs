//! Training objectives.
//!
//! Similarity-based losses are written so that "more similar" is always the
//! larger similarity value; the losses negate it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::model::{linear, predictor_forward, Linear, PredictorParams};
use crate::scalar::Scalar;

/// Norm floor for cosine similarity and L2 normalisation.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the sequence loss.
    pub lambda: f64,
    /// Weight of the action loss.
    pub beta: f64,
    pub smooth_weight: f64,
    pub smooth_clamp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            beta: 0.2,
            smooth_weight: 0.15,
            smooth_clamp: 4.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.beta, self.smooth_weight, self.smooth_clamp];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(arg_err!("loss weights must be finite and non-negative: {self:?}"));
        }
        if self.smooth_clamp == 0.0 {
            return Err(arg_err!("smooth_clamp must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    #[default]
    Cosine,
    Mse,
    Kl,
}

/// How the predictor branch is compared to the target branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimilarityOptions {
    pub kind: SimilarityKind,
    /// Treat the target embedding as a constant.
    pub stop_grad: bool,
    /// Average-pool both branches to this many frames before comparing.
    pub pool_len: Option<usize>,
}

impl Default for SimilarityOptions {
    fn default() -> Self {
        Self {
            kind: SimilarityKind::Cosine,
            stop_grad: true,
            pool_len: None,
        }
    }
}

/// Mean frame-wise similarity of two `[T×D]` embeddings.
///
/// * cosine: mean over frames of `p·z / (‖p‖‖z‖)`
/// * mse: negative mean squared difference
/// * kl: negative mean over frames of `KL(softmax(z) ‖ softmax(p))`
pub fn framewise_similarity<'t, S: Scalar>(
    p: Var<'t, S>,
    z: Var<'t, S>,
    kind: SimilarityKind,
) -> Result<Var<'t, S>> {
    let (ps, zs) = (p.shape(), z.shape());
    if ps != zs || ps.len() != 2 {
        return Err(shape_err!("similarity needs equal [T×D] inputs, got {ps:?} and {zs:?}"));
    }
    Ok(match kind {
        SimilarityKind::Cosine => {
            let eps = S::lit(NORM_EPS);
            p.l2_normalize(eps)
                .mul(z.l2_normalize(eps))?
                .sum_axis(1)?
                .mean()
        }
        SimilarityKind::Mse => {
            let d = p.sub(z)?;
            d.mul(d)?.mean().neg()
        }
        SimilarityKind::Kl => {
            let log_q = z.log_softmax();
            let log_p = p.log_softmax();
            let q = z.softmax();
            q.mul(log_q.sub(log_p)?)?.sum_axis(1)?.mean().neg()
        }
    })
}

fn pooled<'t, S: Scalar>(x: Var<'t, S>, len: Option<usize>) -> Result<Var<'t, S>> {
    match len {
        Some(len) => x.adaptive_avg_pool(len),
        None => Ok(x),
    }
}

/// `−½ [S(P(a), b) + S(P(b), a)]` for frame-aligned embeddings.
fn symmetric_loss<'t, S: Scalar>(
    a: Var<'t, S>,
    b: Var<'t, S>,
    predictor: &PredictorParams<Var<'t, S>>,
    opts: SimilarityOptions,
    pool_len: Option<usize>,
) -> Result<Var<'t, S>> {
    let branch = |src: Var<'t, S>, target: Var<'t, S>| -> Result<Var<'t, S>> {
        let p = predictor_forward(predictor, src)?;
        let target = if opts.stop_grad { target.stop_gradient() } else { target };
        framewise_similarity(pooled(p, pool_len)?, pooled(target, pool_len)?, opts.kind)
    };
    let forward = branch(a, b)?;
    let backward = branch(b, a)?;
    Ok(forward.add(backward)?.scale(S::lit(-0.5)))
}

/// Sequence loss between two synchronized views of one recording.
pub fn sequence_loss<'t, S: Scalar>(
    z_q: Var<'t, S>,
    z_r: Var<'t, S>,
    predictor: &PredictorParams<Var<'t, S>>,
    opts: SimilarityOptions,
) -> Result<Var<'t, S>> {
    let (tq, tr) = (z_q.shape()[0], z_r.shape()[0]);
    if tq != tr {
        return Err(arg_err!("sequence loss needs equal frame counts, got {tq} and {tr}"));
    }
    if let Some(len) = opts.pool_len {
        if len == 0 || len > tq {
            return Err(arg_err!("cannot pool {tq} frames to {len}"));
        }
    }
    symmetric_loss(z_q, z_r, predictor, opts, opts.pool_len)
}

/// Index lists pairing two segments of lengths `len_a` and `len_b`.
///
/// The shorter segment is read frame by frame; the longer one is subsampled
/// at `⌊t·T_long/m⌋` with `m = min(len_a, len_b)`.
pub fn align_linear(len_a: usize, len_b: usize) -> (Vec<usize>, Vec<usize>) {
    let m = len_a.min(len_b);
    let subsample = |long: usize| -> Vec<usize> { (0..m).map(|t| t * long / m).collect() };
    let identity: Vec<usize> = (0..m).collect();
    if len_a >= len_b {
        (subsample(len_a), identity)
    } else {
        (identity, subsample(len_b))
    }
}

/// Embeddings of one labelled action segment.
#[derive(Clone, Copy, Debug)]
pub struct SegmentEmbedding<'t, S: Scalar> {
    /// `[T_s×D]`
    pub z: Var<'t, S>,
    pub label: u16,
}

/// Action loss between two same-class segments.
///
/// Without pooling the segments are paired by [`align_linear`]; with
/// `pool_len` both are pooled to `min(pool_len, T_a, T_b)` frames.
pub fn action_loss<'t, S: Scalar>(
    a: SegmentEmbedding<'t, S>,
    b: SegmentEmbedding<'t, S>,
    predictor: &PredictorParams<Var<'t, S>>,
    opts: SimilarityOptions,
) -> Result<Var<'t, S>> {
    if a.label != b.label {
        return Err(arg_err!("action loss needs equal labels, got {} and {}", a.label, b.label));
    }
    let (ta, tb) = (a.z.shape()[0], b.z.shape()[0]);
    match opts.pool_len {
        Some(len) => {
            if len == 0 {
                return Err(arg_err!("pool length must be positive"));
            }
            let len = len.min(ta).min(tb);
            symmetric_loss(a.z, b.z, predictor, opts, Some(len))
        }
        None => {
            let (ia, ib) = align_linear(ta, tb);
            let za = if ta == ia.len() { a.z } else { a.z.gather_rows(&ia)? };
            let zb = if tb == ib.len() { b.z } else { b.z.gather_rows(&ib)? };
            symmetric_loss(za, zb, predictor, opts, None)
        }
    }
}

fn one_hot<S: Scalar>(labels: &[u16], classes: usize) -> Result<Tensor<S>> {
    let mut data = vec![S::zero(); labels.len() * classes];
    for (t, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(arg_err!("label {l} at frame {t} outside [0, {classes})"));
        }
        data[t * classes + l as usize] = S::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean frame-wise cross-entropy of `[T×C]` logits against `labels`.
pub fn cross_entropy<'t, S: Scalar>(logits: Var<'t, S>, labels: &[u16]) -> Result<Var<'t, S>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(shape_err!("logits {shape:?} for {} labels", labels.len()));
    }
    let target = logits.tape().constant(one_hot(labels, shape[1])?);
    let inv = S::lit(-1.0 / labels.len() as f64);
    Ok(logits.log_softmax().mul(target)?.sum().scale(inv))
}

/// Truncated temporal smoothing of log-probabilities: mean over `t ≥ 1` and
/// classes of `min(clamp, |log p_t − log p_{t−1}|)²`, with frame `t−1` held
/// constant. Zero for a single frame.
pub fn smoothing_loss<'t, S: Scalar>(logits: Var<'t, S>, clamp: f64) -> Result<Option<Var<'t, S>>> {
    let frames = logits.shape()[0];
    if frames < 2 {
        return Ok(None);
    }
    let log_p = logits.log_softmax();
    let current = log_p.slice_rows(1, frames)?;
    let previous = log_p.slice_rows(0, frames - 1)?.stop_gradient();
    let d = current.sub(previous)?;
    Ok(Some(d.mul(d)?.clamp(S::zero(), S::lit(clamp * clamp)).mean()))
}

/// Segmentation loss summed over refinement stages:
/// cross-entropy plus `smooth_weight` times the smoothing term.
pub fn tas_loss<'t, S: Scalar>(
    logits_per_stage: &[Var<'t, S>],
    labels: &[u16],
    weights: &LossWeights,
) -> Result<Var<'t, S>> {
    let mut total: Option<Var<'t, S>> = None;
    for &logits in logits_per_stage {
        let mut stage = cross_entropy(logits, labels)?;
        if weights.smooth_weight > 0.0 {
            if let Some(smooth) = smoothing_loss(logits, weights.smooth_clamp)? {
                stage = stage.add(smooth.scale(S::lit(weights.smooth_weight)))?;
            }
        }
        total = Some(match total {
            Some(t) => t.add(stage)?,
            None => stage,
        });
    }
    total.ok_or_else(|| arg_err!("tas loss needs at least one stage"))
}

/// `Σ tas + λ·seq + β·action`. Absent terms contribute nothing.
pub fn total_loss<'t, S: Scalar>(
    tas_terms: &[Var<'t, S>],
    seq: Option<Var<'t, S>>,
    action: Option<Var<'t, S>>,
    weights: &LossWeights,
) -> Result<Var<'t, S>> {
    let (first, rest) = tas_terms
        .split_first()
        .ok_or_else(|| arg_err!("total loss needs a tas term"))?;
    let mut total = *first;
    for &t in rest {
        total = total.add(t)?;
    }
    if let Some(seq) = seq {
        total = total.add(seq.scale(S::lit(weights.lambda)))?;
    }
    if let Some(action) = action {
        total = total.add(action.scale(S::lit(weights.beta)))?;
    }
    Ok(total)
}

/// Cross-entropy of a linear view classifier on `z`, behind a gradient
/// reversal: the head descends the loss while the encoder ascends it,
/// scaled by `reversal`.
pub fn adversarial_view_loss<'t, S: Scalar>(
    z: Var<'t, S>,
    view_id: usize,
    head: &Linear<Var<'t, S>>,
    reversal: f64,
) -> Result<Var<'t, S>> {
    let views = head.weight.shape()[1];
    if view_id >= views {
        return Err(arg_err!("view id {view_id} outside [0, {views})"));
    }
    let frames = z.shape()[0];
    let logits = linear(z.grad_reverse(S::lit(reversal)), head)?;
    cross_entropy(logits, &vec![view_id as u16; frames])
}

/// One batch member of the contrastive baseline.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveEntry<'t, S: Scalar> {
    pub sequence_id: u32,
    pub view_id: u32,
    /// `[T×D]`, globally averaged before comparison.
    pub z: Var<'t, S>,
}

/// InfoNCE over globally pooled, L2-normalised embeddings. Positives share
/// the sequence and differ in view; anchors without positives are skipped.
pub fn contrastive_loss<'t, S: Scalar>(
    entries: &[ContrastiveEntry<'t, S>],
    temperature: f64,
) -> Result<Var<'t, S>> {
    let n = entries.len();
    if n < 2 {
        return Err(arg_err!("contrastive loss needs at least two entries"));
    }
    if !(temperature > 0.0) {
        return Err(arg_err!("temperature must be positive"));
    }
    let tape = entries[0].z.tape();
    let mut positives = vec![S::zero(); n * n];
    let mut others = vec![S::zero(); n * n];
    let mut anchors = Vec::new();
    for (i, a) in entries.iter().enumerate() {
        let mut has_positive = false;
        for (j, b) in entries.iter().enumerate() {
            if i == j {
                continue;
            }
            others[i * n + j] = S::one();
            if a.sequence_id == b.sequence_id && a.view_id != b.view_id {
                positives[i * n + j] = S::one();
                has_positive = true;
            }
        }
        if has_positive {
            anchors.push(i);
        }
    }
    if anchors.is_empty() {
        return Err(arg_err!("no anchor in the batch has a positive"));
    }
    let pooled = entries
        .iter()
        .map(|e| e.z.adaptive_avg_pool(1))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&pooled, 0)?.l2_normalize(S::lit(NORM_EPS));
    let logits = stacked
        .matmul(stacked.transpose()?)?
        .scale(S::lit(1.0 / temperature));
    let e = logits.exp();
    let pos = tape.constant(Tensor::new(vec![n, n], positives)?);
    let all = tape.constant(Tensor::new(vec![n, n], others)?);
    let numerator = e.mul(pos)?.sum_axis(1)?.ln();
    let denominator = e.mul(all)?.sum_axis(1)?.ln();
    let per_anchor = denominator.sub(numerator)?;
    Ok(per_anchor.gather_rows(&anchors)?.mean())
}

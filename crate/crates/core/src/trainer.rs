//! Joint training loop and the method grid.
//!
//! Every step draws one training sequence and an ordered pair of its seen
//! views, encodes both and adds the segmentation loss of every stage of both
//! views. Depending on the method it then adds the sequence loss between the
//! two views, the action loss between same-class segments from different
//! recordings, an adversarial view-classification term, or an InfoNCE term
//! over a batch of sequences. One Adam update follows.
//!
//! Randomness is split into independent ChaCha8 streams (pair sampling,
//! action pairs, sync shifts, contrastive batches), so a term whose weight is
//! zero neither runs nor perturbs the draws of the others.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{apply_sync_shift, sample_view_pair, ActionIndex, Dataset, SplitSpec};
use crate::error::{arg_err, Error, Result};
use crate::losses::{
    action_loss, adversarial_view_loss, contrastive_loss, sequence_loss, tas_loss, total_loss, ContrastiveEntry,
    LossWeights, SegmentEmbedding, SimilarityKind, SimilarityOptions,
};
use crate::metrics::{evaluate_all, EvalReport, METRIC_COLUMNS};
use crate::model::{encode, EncodeOutput, EncoderConfig, Linear, ModelState};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Baseline,
    Ours,
    OursNoSeq,
    OursNoAction,
    Advloss,
    Contrastive,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Baseline,
        Method::OursNoAction,
        Method::OursNoSeq,
        Method::Ours,
        Method::Advloss,
        Method::Contrastive,
    ];

    pub fn uses_seq(self) -> bool {
        matches!(self, Method::Ours | Method::OursNoAction)
    }

    pub fn uses_action(self) -> bool {
        matches!(self, Method::Ours | Method::OursNoSeq)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Ours => "ours",
            Method::OursNoSeq => "ours_no_seq",
            Method::OursNoAction => "ours_no_action",
            Method::Advloss => "advloss",
            Method::Contrastive => "contrastive",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| arg_err!("unknown method {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub weights: LossWeights,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub seed: u64,
    /// Treat the target branch of the similarity losses as a constant.
    pub stop_grad: bool,
    pub similarity: SimilarityKind,
    pub seq_pool_len: Option<usize>,
    pub action_pool_len: Option<usize>,
    /// Largest random delay applied to the second view of each pair.
    pub sync_shift: usize,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    /// Zero evaluates only the last epoch.
    pub eval_every: usize,
    /// Allow action pairs drawn from the same camera view.
    pub allow_same_view: bool,
    pub action_pairs_per_step: usize,
    /// Weight of the adversarial or contrastive term.
    pub aux_weight: f64,
    /// Gradient reversal strength of the adversarial baseline.
    pub adv_reversal: f64,
    pub temperature: f64,
    /// Sequences per contrastive batch, the drawn pair's sequence included.
    pub contrastive_batch: usize,
    pub model: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            weights: LossWeights::default(),
            epochs: 10,
            steps_per_epoch: 160,
            learning_rate: 5e-4,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            seed: 0,
            stop_grad: true,
            similarity: SimilarityKind::Cosine,
            seq_pool_len: None,
            action_pool_len: None,
            sync_shift: 0,
            eval_every: 0,
            allow_same_view: false,
            action_pairs_per_step: 1,
            aux_weight: 0.5,
            adv_reversal: 1.0,
            temperature: 0.07,
            contrastive_batch: 8,
            model: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(arg_err!("epochs and steps_per_epoch must be positive"));
        }
        self.weights.validate()?;
        self.adam().validate()?;
        self.model.validate()?;
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(arg_err!("aux_weight must be finite and non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(arg_err!("temperature must be positive"));
        }
        if self.method == Method::Contrastive && self.contrastive_batch < 1 {
            return Err(arg_err!("contrastive_batch must be positive"));
        }
        if self.seq_pool_len == Some(0) || self.action_pool_len == Some(0) {
            return Err(arg_err!("pool lengths must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_eps,
        }
    }

    /// Loss weights with the terms the method does not use set to zero.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.method.uses_seq() {
            w.lambda = 0.0;
        }
        if !self.method.uses_action() {
            w.beta = 0.0;
        }
        w
    }

    /// Copies the input and class dimensions of `dataset` into the model
    /// configuration.
    pub fn fit_to(&mut self, dataset: &Dataset) {
        self.model.input_dim = dataset.feature_dim;
        self.model.num_classes = dataset.num_classes;
    }
}

/// Mean loss components of one epoch and, if evaluated, its report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub tas: f64,
    pub seq: f64,
    pub action: f64,
    pub aux: f64,
    /// Steps whose action pair could not be drawn.
    pub action_skips: usize,
    /// Adam steps skipped for non-finite gradients.
    pub skipped_updates: usize,
    pub wall_clock_secs: f64,
    pub report: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_report(&self) -> Option<&EvalReport> {
        self.epochs.iter().rev().find_map(|e| e.report.as_ref())
    }

    /// CSV with the loss columns followed by `<group>_<metric>` columns for
    /// `groups`. Epochs without an evaluation leave those cells empty.
    /// Wall-clock time is kept out so the file is reproducible.
    pub fn to_csv(&self, groups: &[String]) -> String {
        let mut out = String::from("epoch,tas,seq,action,aux,action_skips");
        for g in groups {
            for m in METRIC_COLUMNS {
                let _ = write!(out, ",{g}_{m}");
            }
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(
                out,
                "{},{:.9},{:.9},{:.9},{:.9},{}",
                e.epoch, e.tas, e.seq, e.action, e.aux, e.action_skips
            );
            for g in groups {
                let row = e.report.as_ref().and_then(|r| r.group(g));
                for k in 0..METRIC_COLUMNS.len() {
                    match row {
                        Some(row) => {
                            let _ = write!(out, ",{:.6}", row.values()[k]);
                        }
                        None => out.push(','),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

const STREAM_PAIRS: u64 = 1;
const STREAM_ACTION: u64 = 2;
const STREAM_SHIFT: u64 = 3;
const STREAM_CONTRASTIVE: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Seed of the view head of the adversarial baseline, offset from the model
/// seed so the two initialisations are unrelated.
fn view_head_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f_u64.rotate_left(40)
}

struct Totals {
    tas: f64,
    seq: f64,
    action: f64,
    aux: f64,
    seq_steps: usize,
    action_steps: usize,
    aux_steps: usize,
}

fn scalar_of<S: Scalar>(v: Var<'_, S>) -> f64 {
    v.item().map(|x| x.to_f64_lossy()).unwrap_or(f64::NAN)
}

/// Trains a freshly initialised model with `config` on the training
/// sequences of `split`.
pub fn train<S: Scalar>(config: &TrainConfig, dataset: &Dataset, split: &SplitSpec) -> Result<(ModelState<S>, TrainLog)> {
    config.validate()?;
    dataset.validate()?;
    split.validate()?;
    if config.model.input_dim != dataset.feature_dim || config.model.num_classes != dataset.num_classes {
        return Err(arg_err!(
            "model expects {} features and {} classes, dataset has {} and {}",
            config.model.input_dim,
            config.model.num_classes,
            dataset.feature_dim,
            dataset.num_classes
        ));
    }
    let sequences = dataset.training_sequences(split);
    if sequences.is_empty() {
        return Err(arg_err!("no training sequence has two seen views"));
    }

    let weights = config.effective_weights();
    let use_seq = config.method.uses_seq() && weights.lambda > 0.0;
    let use_action = config.method.uses_action() && weights.beta > 0.0 && config.action_pairs_per_step > 0;
    let use_adv = config.method == Method::Advloss && config.aux_weight > 0.0;
    let use_contrastive = config.method == Method::Contrastive && config.aux_weight > 0.0;

    let mut state = ModelState::<S>::init(config.model.clone(), config.seed)?;
    let seen: Vec<u32> = split.seen_views.iter().copied().collect();
    let mut view_head: Option<Linear<Tensor<S>>> =
        use_adv.then(|| Linear::init(config.model.embed_dim, seen.len(), view_head_seed(config.seed)));
    let mut adam = Adam::<S>::new(config.adam())?;

    let features: Vec<Tensor<S>> = dataset
        .recordings
        .iter()
        .map(|r| r.features.to_tensor())
        .collect::<Result<_>>()?;
    let action_index = use_action.then(|| ActionIndex::build(dataset, split));
    let seq_opts = SimilarityOptions { kind: config.similarity, stop_grad: config.stop_grad, pool_len: config.seq_pool_len };
    let action_opts = SimilarityOptions { pool_len: config.action_pool_len, ..seq_opts };

    let mut pair_rng = stream(config.seed, STREAM_PAIRS);
    let mut action_rng = stream(config.seed, STREAM_ACTION);
    let mut shift_rng = stream(config.seed, STREAM_SHIFT);
    let mut contrastive_rng = stream(config.seed, STREAM_CONTRASTIVE);

    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut totals = Totals { tas: 0.0, seq: 0.0, action: 0.0, aux: 0.0, seq_steps: 0, action_steps: 0, aux_steps: 0 };
        let (mut action_skips, mut skipped_updates) = (0, 0);
        for step in 0..config.steps_per_epoch {
            let sequence = sequences[pair_rng.random_range(0..sequences.len())];
            let (iq, ir) = sample_view_pair(dataset, sequence, split, &mut pair_rng)?;
            let shifted_r = if config.sync_shift > 0 {
                let (rec, _) = apply_sync_shift(&dataset.recordings[ir], config.sync_shift, &mut shift_rng)?;
                Some(rec.features.to_tensor::<S>()?)
            } else {
                None
            };

            let tape = Tape::<S>::new();
            let params = state.bind(&tape);
            let head = view_head.as_ref().map(|h| Linear { weight: tape.param(h.weight.clone()), bias: tape.param(h.bias.clone()) });
            let enc = |x: &Tensor<S>| -> Result<EncodeOutput<'_, S>> { encode(&config.model, &params, tape.constant(x.clone())) };
            let q = enc(&features[iq])?;
            let r = enc(shifted_r.as_ref().unwrap_or(&features[ir]))?;
            let labels_q = &dataset.recordings[iq].labels;
            let labels_r = &dataset.recordings[ir].labels;
            let tas_q = tas_loss(&q.logits_per_stage, labels_q, &weights)?;
            let tas_r = tas_loss(&r.logits_per_stage, labels_r, &weights)?;
            totals.tas += scalar_of(tas_q) + scalar_of(tas_r);

            let seq = if use_seq {
                let l = sequence_loss(q.z, r.z, &params.predictor, seq_opts)?;
                totals.seq += scalar_of(l);
                totals.seq_steps += 1;
                Some(l)
            } else {
                None
            };

            let mut action = None;
            if let Some(index) = &action_index {
                // Unshifted encodings of the drawn pair are reused; anything
                // else is encoded in full and sliced.
                let mut cache: BTreeMap<usize, Var<'_, S>> = BTreeMap::new();
                cache.insert(iq, q.z);
                if shifted_r.is_none() {
                    cache.insert(ir, r.z);
                }
                let mut sum: Option<Var<'_, S>> = None;
                let mut drawn = 0;
                for _ in 0..config.action_pairs_per_step {
                    let (a, b) = match index.sample(&mut action_rng, config.allow_same_view) {
                        Ok(pair) => pair,
                        Err(e) => {
                            action_skips += 1;
                            debug!("epoch {epoch} step {step}: action pair skipped: {e}");
                            continue;
                        }
                    };
                    let mut embed = |o: crate::data::Occurrence| -> Result<SegmentEmbedding<'_, S>> {
                        let z = match cache.get(&o.recording) {
                            Some(&z) => z,
                            None => {
                                let z = enc(&features[o.recording])?.z;
                                cache.insert(o.recording, z);
                                z
                            }
                        };
                        Ok(SegmentEmbedding { z: z.slice_rows(o.segment.start, o.segment.end)?, label: o.segment.label })
                    };
                    let (ea, eb) = (embed(a)?, embed(b)?);
                    let l = action_loss(ea, eb, &params.predictor, action_opts)?;
                    sum = Some(match sum {
                        Some(s) => s.add(l)?,
                        None => l,
                    });
                    drawn += 1;
                }
                if let Some(s) = sum {
                    let l = s.scale(S::lit(1.0 / drawn as f64));
                    totals.action += scalar_of(l);
                    totals.action_steps += 1;
                    action = Some(l);
                }
            }

            let mut loss = total_loss(&[tas_q, tas_r], seq, action, &weights)?;

            if let Some(head) = &head {
                let vq = seen.iter().position(|&v| v == dataset.recordings[iq].view_id).expect("seen view");
                let vr = seen.iter().position(|&v| v == dataset.recordings[ir].view_id).expect("seen view");
                let adv = adversarial_view_loss(q.z, vq, head, config.adv_reversal)?
                    .add(adversarial_view_loss(r.z, vr, head, config.adv_reversal)?)?;
                totals.aux += scalar_of(adv);
                totals.aux_steps += 1;
                loss = loss.add(adv.scale(S::lit(config.aux_weight)))?;
            }

            if use_contrastive {
                let mut entries = vec![
                    ContrastiveEntry { sequence_id: sequence, view_id: dataset.recordings[iq].view_id, z: q.z },
                    ContrastiveEntry { sequence_id: sequence, view_id: dataset.recordings[ir].view_id, z: r.z },
                ];
                let others: Vec<u32> = sequences.iter().copied().filter(|&s| s != sequence).collect();
                let extra = (config.contrastive_batch - 1).min(others.len());
                for k in rand::seq::index::sample(&mut contrastive_rng, others.len(), extra) {
                    let s = others[k];
                    let (a, b) = sample_view_pair(dataset, s, split, &mut contrastive_rng)?;
                    for i in [a, b] {
                        let z = enc(&features[i])?.z;
                        entries.push(ContrastiveEntry { sequence_id: s, view_id: dataset.recordings[i].view_id, z });
                    }
                }
                let nce = contrastive_loss(&entries, config.temperature)?;
                totals.aux += scalar_of(nce);
                totals.aux_steps += 1;
                loss = loss.add(nce.scale(S::lit(config.aux_weight)))?;
            }

            let value = scalar_of(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, message: format!("loss is {value}") });
            }
            loss.backward()?;

            let mut grads: Vec<Tensor<S>> = params
                .named()
                .into_iter()
                .map(|(_, v)| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
                .collect();
            if let Some(h) = &head {
                for v in [h.weight, h.bias] {
                    grads.push(v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())));
                }
            }
            let grad_refs: Vec<&Tensor<S>> = grads.iter().collect();
            let mut targets = state.params.leaves_mut();
            if let Some(h) = view_head.as_mut() {
                targets.push(&mut h.weight);
                targets.push(&mut h.bias);
            }
            if !adam.step(&mut targets, &grad_refs)? {
                skipped_updates += 1;
            }
        }

        let steps = config.steps_per_epoch as f64;
        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        let last = epoch + 1 == config.epochs;
        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        let report = if last || due { Some(evaluate_all(&state, dataset, split)?) } else { None };
        let entry = EpochLog {
            epoch: epoch + 1,
            tas: totals.tas / steps,
            seq: mean(totals.seq, totals.seq_steps),
            action: mean(totals.action, totals.action_steps),
            aux: mean(totals.aux, totals.aux_steps),
            action_skips,
            skipped_updates,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            report,
        };
        if action_skips > 0 {
            warn!("epoch {}: {action_skips} action pairs skipped", entry.epoch);
        }
        info!(
            "{} epoch {}: tas {:.4} seq {:.4} action {:.4} aux {:.4}",
            config.method.name(),
            entry.epoch,
            entry.tas,
            entry.seq,
            entry.action,
            entry.aux
        );
        log.epochs.push(entry);
    }
    Ok((state, log))
}

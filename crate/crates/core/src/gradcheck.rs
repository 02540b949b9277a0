//! Finite-difference checks of every differentiable primitive, every loss
//! and the full training objective on small random instances.
//!
//! Non-scalar primitives are reduced with a random probe tensor
//! (`Σ probe ⊙ op(x)`), so every output coordinate is exercised. Inputs of
//! piecewise-smooth ops are kept away from their kinks. Gradient reversal is
//! checked at scale `−1`, where its backward coincides with the true
//! derivative; other scales only rescale that path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    action_loss, adversarial_view_loss, contrastive_loss, framewise_similarity, sequence_loss, tas_loss, total_loss,
    ContrastiveEntry, LossWeights, SegmentEmbedding, SimilarityKind, SimilarityOptions,
};
use crate::model::{encode, predictor_forward, EncoderConfig, Linear, ModelParams, ModelState, PredictorParams};

/// Relative error bound used by [`run_suite`] callers.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

type Objective = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

#[derive(Clone, Copy, Debug)]
enum Range {
    Any,
    Positive,
    AwayFromZero,
}

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    range: Range,
    objective: Objective,
}

/// Worst error of one case over its trials.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_error <= TOLERANCE
    }
}

fn probe<'t>(out: Var<'t, f64>, p: Var<'t, f64>) -> Result<Var<'t, f64>> {
    Ok(out.mul(p)?.sum())
}

fn sample(shape: &[usize], range: Range, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match range {
            Range::Any => rng.random_range(-2.0..2.0),
            Range::Positive => rng.random_range(0.2..2.0),
            Range::AwayFromZero => {
                let m: f64 = rng.random_range(0.05..2.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

fn predictor_from<'t>(v: &[Var<'t, f64>]) -> PredictorParams<Var<'t, f64>> {
    PredictorParams {
        fc1: Linear { weight: v[0], bias: v[1] },
        fc2: Linear { weight: v[2], bias: v[3] },
        fc3: Linear { weight: v[4], bias: v[5] },
    }
}

const PREDICTOR_SHAPES: [&[usize]; 6] = [&[3, 3], &[3], &[3, 3], &[3], &[3, 3], &[3]];

fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", shapes: &[&[3, 4], &[4, 2], &[3, 2]], range: Range::Any, objective: |_, v| probe(v[0].matmul(v[1])?, v[2]) },
        Case { name: "add", shapes: &[&[3, 4], &[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].add(v[1])?, v[2]) },
        Case { name: "sub", shapes: &[&[3, 4], &[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].sub(v[1])?, v[2]) },
        Case { name: "mul", shapes: &[&[3, 4], &[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].mul(v[1])?, v[2]) },
        Case { name: "add_row", shapes: &[&[3, 4], &[4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].add_row(v[1])?, v[2]) },
        Case { name: "scale", shapes: &[&[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].scale(-1.7), v[1]) },
        Case { name: "neg", shapes: &[&[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].neg(), v[1]) },
        Case { name: "add_scalar", shapes: &[&[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].add_scalar(0.3), v[1]) },
        Case { name: "gelu", shapes: &[&[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].gelu(), v[1]) },
        Case { name: "relu", shapes: &[&[3, 4], &[3, 4]], range: Range::AwayFromZero, objective: |_, v| probe(v[0].relu(), v[1]) },
        Case { name: "exp", shapes: &[&[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].exp(), v[1]) },
        Case { name: "ln", shapes: &[&[3, 4], &[3, 4]], range: Range::Positive, objective: |_, v| probe(v[0].ln(), v[1]) },
        Case { name: "softmax", shapes: &[&[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].softmax(), v[1]) },
        Case { name: "log_softmax", shapes: &[&[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].log_softmax(), v[1]) },
        Case { name: "sum_axis0", shapes: &[&[3, 4], &[4]], range: Range::Any, objective: |_, v| probe(v[0].sum_axis(0)?, v[1]) },
        Case { name: "mean_axis1", shapes: &[&[3, 4], &[3]], range: Range::Any, objective: |_, v| probe(v[0].mean_axis(1)?, v[1]) },
        Case { name: "sum", shapes: &[&[3, 4]], range: Range::Any, objective: |_, v| Ok(v[0].sum().scale(0.7)) },
        Case { name: "mean", shapes: &[&[3, 4]], range: Range::Any, objective: |_, v| Ok(v[0].mul(v[0])?.mean()) },
        Case { name: "l2_normalize", shapes: &[&[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].l2_normalize(1e-8), v[1]) },
        Case { name: "concat_rows", shapes: &[&[2, 3], &[1, 3], &[3, 3]], range: Range::Any, objective: |t, v| probe(t.concat(&[v[0], v[1]], 0)?, v[2]) },
        Case { name: "concat_cols", shapes: &[&[2, 3], &[2, 2], &[2, 5]], range: Range::Any, objective: |t, v| probe(t.concat(&[v[0], v[1]], 1)?, v[2]) },
        Case { name: "transpose", shapes: &[&[3, 4], &[4, 3]], range: Range::Any, objective: |_, v| probe(v[0].transpose()?, v[1]) },
        Case { name: "clamp", shapes: &[&[3, 4], &[3, 4]], range: Range::AwayFromZero, objective: |_, v| probe(v[0].clamp(0.0, 1.0), v[1]) },
        Case { name: "stop_gradient", shapes: &[&[3, 4]], range: Range::Any, objective: |_, v| Ok(v[0].mul(v[0].stop_gradient())?.sum()) },
        Case { name: "grad_reverse", shapes: &[&[3, 4], &[3, 4]], range: Range::Any, objective: |_, v| probe(v[0].grad_reverse(-1.0), v[1]) },
        Case { name: "adaptive_avg_pool", shapes: &[&[7, 2], &[3, 2]], range: Range::Any, objective: |_, v| probe(v[0].adaptive_avg_pool(3)?, v[1]) },
        Case { name: "conv1d_d1", shapes: &[&[6, 2], &[3, 2, 3], &[3], &[6, 3]], range: Range::Any, objective: |_, v| probe(v[0].dilated_conv1d(v[1], v[2], 1)?, v[3]) },
        Case { name: "conv1d_d2", shapes: &[&[6, 2], &[3, 2, 3], &[3], &[6, 3]], range: Range::Any, objective: |_, v| probe(v[0].dilated_conv1d(v[1], v[2], 2)?, v[3]) },
        Case { name: "gather_rows", shapes: &[&[4, 3], &[5, 3]], range: Range::Any, objective: |_, v| probe(v[0].gather_rows(&[3, 0, 0, 2, 3])?, v[1]) },
        Case { name: "slice_rows", shapes: &[&[5, 3], &[3, 3]], range: Range::Any, objective: |_, v| probe(v[0].slice_rows(1, 4)?, v[1]) },
        Case {
            name: "predictor",
            shapes: &[&[5, 3], PREDICTOR_SHAPES[0], PREDICTOR_SHAPES[1], PREDICTOR_SHAPES[2], PREDICTOR_SHAPES[3], PREDICTOR_SHAPES[4], PREDICTOR_SHAPES[5], &[5, 3]],
            range: Range::Any,
            objective: |_, v| probe(predictor_forward(&predictor_from(&v[1..7]), v[0])?, v[7]),
        },
        Case { name: "similarity_cosine", shapes: &[&[4, 3], &[4, 3]], range: Range::Any, objective: |_, v| framewise_similarity(v[0], v[1], SimilarityKind::Cosine) },
        Case { name: "similarity_mse", shapes: &[&[4, 3], &[4, 3]], range: Range::Any, objective: |_, v| framewise_similarity(v[0], v[1], SimilarityKind::Mse) },
        Case { name: "similarity_kl", shapes: &[&[4, 3], &[4, 3]], range: Range::Any, objective: |_, v| framewise_similarity(v[0], v[1], SimilarityKind::Kl) },
        Case {
            name: "sequence_loss",
            shapes: &[&[5, 3], &[5, 3], PREDICTOR_SHAPES[0], PREDICTOR_SHAPES[1], PREDICTOR_SHAPES[2], PREDICTOR_SHAPES[3], PREDICTOR_SHAPES[4], PREDICTOR_SHAPES[5]],
            range: Range::Any,
            objective: |_, v| sequence_loss(v[0], v[1], &predictor_from(&v[2..8]), SimilarityOptions::default()),
        },
        Case {
            name: "sequence_loss_pooled_no_stop_grad",
            shapes: &[&[5, 3], &[5, 3], PREDICTOR_SHAPES[0], PREDICTOR_SHAPES[1], PREDICTOR_SHAPES[2], PREDICTOR_SHAPES[3], PREDICTOR_SHAPES[4], PREDICTOR_SHAPES[5]],
            range: Range::Any,
            objective: |_, v| {
                let opts = SimilarityOptions { stop_grad: false, pool_len: Some(2), ..Default::default() };
                sequence_loss(v[0], v[1], &predictor_from(&v[2..8]), opts)
            },
        },
        Case {
            name: "action_loss",
            shapes: &[&[6, 3], &[4, 3], PREDICTOR_SHAPES[0], PREDICTOR_SHAPES[1], PREDICTOR_SHAPES[2], PREDICTOR_SHAPES[3], PREDICTOR_SHAPES[4], PREDICTOR_SHAPES[5]],
            range: Range::Any,
            objective: |_, v| {
                let a = SegmentEmbedding { z: v[0], label: 1 };
                let b = SegmentEmbedding { z: v[1], label: 1 };
                action_loss(a, b, &predictor_from(&v[2..8]), SimilarityOptions::default())
            },
        },
        Case {
            name: "tas_loss",
            shapes: &[&[6, 3], &[6, 3]],
            range: Range::Any,
            objective: |_, v| tas_loss(&[v[0], v[1]], &[0, 0, 2, 2, 1, 1], &LossWeights::default()),
        },
        Case {
            name: "adversarial_view_loss",
            shapes: &[&[4, 3], &[3, 2], &[2]],
            range: Range::Any,
            objective: |_, v| adversarial_view_loss(v[0], 1, &Linear { weight: v[1], bias: v[2] }, -1.0),
        },
        Case {
            name: "contrastive_loss",
            shapes: &[&[3, 2], &[4, 2], &[3, 2], &[2, 2]],
            range: Range::Any,
            objective: |_, v| {
                let ids = [(0, 0), (0, 1), (1, 0), (1, 2)];
                let entries: Vec<_> = ids
                    .iter()
                    .zip(v)
                    .map(|(&(sequence_id, view_id), &z)| ContrastiveEntry { sequence_id, view_id, z })
                    .collect();
                contrastive_loss(&entries, 0.5)
            },
        },
    ]
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        input_dim: 3,
        embed_dim: 3,
        num_classes: 3,
        num_stages: 2,
        layers_per_stage: 2,
        kernel_size: 3,
    }
}

/// Rebuilds a parameter tree from a flat variable list in canonical order.
fn unflatten<'t>(template: &ModelParams<Tensor<f64>>, vars: &[Var<'t, f64>]) -> ModelParams<Var<'t, f64>> {
    let mut k = 0;
    template.map(|_, _| {
        k += 1;
        vars[k - 1]
    })
}

fn higher_ranked<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

/// `Σ tas + λ·seq + β·action` of a two-view step through the full encoder,
/// with every parameter and both views' features as inputs.
fn total_loss_trial(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config();
    let state = ModelState::<f64>::init(cfg.clone(), seed)?;
    let t = 6;
    // Perturbing every parameter, biases included, moves ReLU
    // pre-activations off the exact zeros that zero-initialised biases give.
    let mut perturbed = state.params.clone();
    perturbed.visit_mut(|_, p| {
        let noise = sample(p.shape(), Range::Any, &mut rng);
        p.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += 0.3 * n);
    });
    let mut inputs: Vec<Tensor<f64>> = perturbed.named().into_iter().map(|(_, p)| p.clone()).collect();
    let n_params = inputs.len();
    inputs.push(sample(&[t, cfg.input_dim], Range::Any, &mut rng));
    inputs.push(sample(&[t, cfg.input_dim], Range::Any, &mut rng));
    let labels: Vec<u16> = vec![0, 0, 1, 1, 1, 2];
    let template = state.params;

    let objective = higher_ranked(move |_, v| {
        let params = unflatten(&template, &v[..n_params]);
        let (xq, xr) = (v[n_params], v[n_params + 1]);
        let cfg = tiny_config();
        let q = encode(&cfg, &params, xq)?;
        let r = encode(&cfg, &params, xr)?;
        let weights = LossWeights::default();
        let tas_q = tas_loss(&q.logits_per_stage, &labels, &weights)?;
        let tas_r = tas_loss(&r.logits_per_stage, &labels, &weights)?;
        let opts = SimilarityOptions::default();
        let seq = sequence_loss(q.z, r.z, &params.predictor, opts)?;
        let a = SegmentEmbedding { z: q.z.slice_rows(2, 5)?, label: 1 };
        let b = SegmentEmbedding { z: r.z.slice_rows(1, 3)?, label: 1 };
        let action = action_loss(a, b, &params.predictor, opts)?;
        total_loss(&[tas_q, tas_r], Some(seq), Some(action), &weights)
    });
    finite_difference_check(objective, &inputs, STEP)
}

/// Runs every case `trials` times with seeds derived from `seed`, plus
/// `trials` checks of the full objective. Returns one row per case.
pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    for (c, case) in cases().iter().enumerate() {
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((c as u64) << 32) ^ trial as u64);
            let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| sample(s, case.range, &mut rng)).collect();
            let err = finite_difference_check(case.objective, &inputs, STEP)?;
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
        }
        results.push(CaseResult { name: case.name.to_string(), trials, max_error: worst });
    }
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let err = total_loss_trial(seed.wrapping_add(1000 + trial as u64))?;
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
    }
    results.push(CaseResult { name: "total_loss".to_string(), trials, max_error: worst });
    Ok(results)
}

/// Number of cases [`run_suite`] reports, the full objective included.
pub fn num_cases() -> usize {
    cases().len() + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_with_a_few_trials() {
        for r in run_suite(2, 11).unwrap() {
            assert!(r.passed(), "{}: {}", r.name, r.max_error);
        }
    }
}

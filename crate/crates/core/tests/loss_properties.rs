use proptest::prelude::*;
use viewseg::autodiff::{Tape, Tensor};
use viewseg::losses::{
    action_loss, contrastive_loss, framewise_similarity, sequence_loss, smoothing_loss, ContrastiveEntry,
    SegmentEmbedding, SimilarityKind, SimilarityOptions,
};
use viewseg::model::{EncoderConfig, ModelState, PredictorParams};

const KINDS: [SimilarityKind; 3] = [SimilarityKind::Cosine, SimilarityKind::Mse, SimilarityKind::Kl];

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn predictor_state(dim: usize, seed: u64) -> ModelState<f64> {
    let cfg = EncoderConfig { input_dim: 3, embed_dim: dim, num_classes: 2, num_stages: 1, layers_per_stage: 1, kernel_size: 3 };
    ModelState::init(cfg, seed).unwrap()
}

fn pair_strategy() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, u64, Option<usize>)> {
    (1usize..9, 1usize..7).prop_flat_map(|(t, d)| {
        (matrix(t, d), matrix(t, d), any::<u64>(), prop::option::of(1..=t))
    })
}

fn seq_value(a: &Tensor<f64>, b: &Tensor<f64>, state: &ModelState<f64>, opts: SimilarityOptions) -> f64 {
    let tape = Tape::new();
    let bound = state.bind_frozen(&tape);
    let za = tape.constant(a.clone());
    let zb = tape.constant(b.clone());
    sequence_loss(za, zb, &bound.predictor, opts).unwrap().item().unwrap()
}

fn action_value(a: &Tensor<f64>, b: &Tensor<f64>, state: &ModelState<f64>, opts: SimilarityOptions) -> f64 {
    let tape = Tape::new();
    let bound = state.bind_frozen(&tape);
    let sa = SegmentEmbedding { z: tape.constant(a.clone()), label: 1 };
    let sb = SegmentEmbedding { z: tape.constant(b.clone()), label: 1 };
    action_loss(sa, sb, &bound.predictor, opts).unwrap().item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sequence_loss_swap_is_bit_identical((a, b, seed, pool) in pair_strategy(), stop_grad: bool) {
        let state = predictor_state(a.shape()[1], seed);
        for kind in KINDS {
            let opts = SimilarityOptions { kind, stop_grad, pool_len: pool };
            prop_assert_eq!(seq_value(&a, &b, &state, opts).to_bits(), seq_value(&b, &a, &state, opts).to_bits());
        }
    }

    #[test]
    fn action_loss_swap_is_bit_identical(
        (ta, tb, d) in (1usize..9, 1usize..9, 1usize..7),
        seed: u64,
        pool in prop::option::of(1usize..6),
        values in prop::collection::vec(-3.0f64..3.0, 2 * 8 * 6),
    ) {
        let a = Tensor::new(vec![ta, d], values[..ta * d].to_vec()).unwrap();
        let b = Tensor::new(vec![tb, d], values[48..48 + tb * d].to_vec()).unwrap();
        let state = predictor_state(d, seed);
        for kind in KINDS {
            let opts = SimilarityOptions { kind, stop_grad: true, pool_len: pool };
            prop_assert_eq!(action_value(&a, &b, &state, opts).to_bits(), action_value(&b, &a, &state, opts).to_bits());
        }
    }

    #[test]
    fn cosine_losses_are_bounded((a, b, seed, pool) in pair_strategy()) {
        let state = predictor_state(a.shape()[1], seed);
        let opts = SimilarityOptions { pool_len: pool, ..Default::default() };
        for v in [seq_value(&a, &b, &state, opts), action_value(&a, &b, &state, opts)] {
            prop_assert!((-1.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn cosine_similarity_ignores_positive_scaling(
        (p, z, _, _) in pair_strategy(),
        cp in 1e-3f64..1e3,
        cz in 1e-3f64..1e3,
    ) {
        let tape = Tape::new();
        let base = framewise_similarity(tape.constant(p.clone()), tape.constant(z.clone()), SimilarityKind::Cosine)
            .unwrap().item().unwrap();
        let scaled = framewise_similarity(
            tape.constant(p.map(|v| v * cp)),
            tape.constant(z.map(|v| v * cz)),
            SimilarityKind::Cosine,
        ).unwrap().item().unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9, "{base} vs {scaled}");
    }

    #[test]
    fn contrastive_loss_ignores_positive_scaling(
        values in prop::collection::vec(-3.0f64..3.0, 4 * 3 * 2),
        scale in 1e-2f64..1e2,
    ) {
        let eval = |c: f64| {
            let tape = Tape::new();
            let entries: Vec<_> = (0..4u32).map(|k| ContrastiveEntry {
                sequence_id: k / 2,
                view_id: k % 2,
                z: tape.constant(Tensor::new(vec![3, 2], values[k as usize * 6..k as usize * 6 + 6].iter().map(|v| v * c).collect()).unwrap()),
            }).collect();
            contrastive_loss(&entries, 0.07).unwrap().item().unwrap()
        };
        let (a, b) = (eval(1.0), eval(scale));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn smoothing_vanishes_exactly_for_constant_posteriors(
        (t, c) in (2usize..9, 2usize..5),
        row in prop::collection::vec(-3.0f64..3.0, 4),
        shifts in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let constant: Vec<f64> = (0..t).flat_map(|_| row[..c].to_vec()).collect();
        // Adding the same offset to every class of a frame leaves its log-probabilities unchanged.
        let shifted: Vec<f64> = (0..t).flat_map(|k| row[..c].iter().map(|v| v + shifts[k]).collect::<Vec<_>>()).collect();
        for data in [constant, shifted] {
            let tape = Tape::new();
            let v = smoothing_loss(tape.constant(Tensor::new(vec![t, c], data).unwrap()), 4.0).unwrap().unwrap();
            prop_assert!(v.item().unwrap().abs() <= 1e-12);
        }
    }

    #[test]
    fn smoothing_is_positive_when_posteriors_change(
        (t, c) in (2usize..9, 2usize..5),
        row in prop::collection::vec(-3.0f64..3.0, 4),
        frame in 0usize..8,
        class in 0usize..4,
        delta in prop_oneof![-2.0f64..-0.01, 0.01f64..2.0],
    ) {
        let mut data: Vec<f64> = (0..t).flat_map(|_| row[..c].to_vec()).collect();
        data[(frame % t) * c + class % c] += delta;
        let tape = Tape::new();
        let v = smoothing_loss(tape.constant(Tensor::new(vec![t, c], data).unwrap()), 4.0).unwrap().unwrap();
        prop_assert!(v.item().unwrap() > 1e-12);
    }
}

/// Gradient of the sequence loss with both embeddings as leaves, and the
/// same loss assembled by hand with the targets as detached constants.
fn stop_grad_pair(a: &Tensor<f64>, b: &Tensor<f64>, state: &ModelState<f64>, stop_grad: bool) -> [(Tensor<f64>, Tensor<f64>); 2] {
    let opts = SimilarityOptions { stop_grad, ..Default::default() };
    let tape = Tape::new();
    let bound = state.bind_frozen(&tape);
    let (za, zb) = (tape.param(a.clone()), tape.param(b.clone()));
    sequence_loss(za, zb, &bound.predictor, opts).unwrap().backward().unwrap();
    let library = (za.grad().unwrap(), zb.grad().unwrap());

    let tape = Tape::new();
    let bound = state.bind_frozen(&tape);
    let (za, zb) = (tape.param(a.clone()), tape.param(b.clone()));
    let branch = |src, target, predictor: &PredictorParams<_>| {
        let p = viewseg::model::predictor_forward(predictor, src).unwrap();
        framewise_similarity(p, target, SimilarityKind::Cosine).unwrap()
    };
    let fwd = branch(za, tape.constant(b.clone()), &bound.predictor);
    let bwd = branch(zb, tape.constant(a.clone()), &bound.predictor);
    fwd.add(bwd).unwrap().scale(-0.5).backward().unwrap();
    [library, (za.grad().unwrap(), zb.grad().unwrap())]
}

#[test]
fn stop_gradient_removes_the_target_branch_exactly() {
    for seed in 0..20u64 {
        let state = predictor_state(4, seed);
        let mut rng_vals = (0..2 * 6 * 4).map(|k| ((k as f64 + seed as f64) * 0.713).sin() * 2.0);
        let a = Tensor::new(vec![6, 4], rng_vals.by_ref().take(24).collect()).unwrap();
        let b = Tensor::new(vec![6, 4], rng_vals.take(24).collect()).unwrap();
        let [lib, manual] = stop_grad_pair(&a, &b, &state, true);
        assert_eq!(lib.0, manual.0, "seed {seed}");
        assert_eq!(lib.1, manual.1, "seed {seed}");
        let [full, manual] = stop_grad_pair(&a, &b, &state, false);
        let diff = full.0.data().iter().zip(manual.0.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-8, "seed {seed}: target branch contributed nothing without stop-gradient");
    }
}

#[test]
fn stop_gradient_target_only_leaf_gets_zero_gradient() {
    let tape = Tape::<f64>::new();
    let p = tape.param(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.3, 0.1, -0.7]).unwrap());
    let z = tape.param(Tensor::matrix(2, 3, vec![0.2, 0.4, -1.0, 2.0, -0.3, 0.9]).unwrap());
    for kind in KINDS {
        tape.zero_grad();
        framewise_similarity(p, z.stop_gradient(), kind).unwrap().backward().unwrap();
        let g = z.grad().unwrap_or_else(|| Tensor::zeros(&[2, 3]));
        assert!(g.data().iter().all(|&v| v == 0.0), "{kind:?}");
        assert!(p.grad().unwrap().data().iter().any(|&v| v != 0.0));
    }
}

//! Multi-stage dilated temporal convolutional encoder with per-stage frame
//! classifiers and the Siamese predictor head.
//!
//! Each stage projects its input to `embed_dim` channels with a 1×1
//! convolution and applies `layers_per_stage` residual blocks
//! `h ← h + relu(conv_k,2^ℓ(h))`. A per-frame linear head turns the stage
//! features into class logits. The first stage reads the input features,
//! later stages read the softmax of the previous stage's logits. The last
//! stage's features, before its head, are the embedding `z` used by the
//! similarity losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub num_stages: usize,
    pub layers_per_stage: usize,
    pub kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            embed_dim: 16,
            num_classes: 6,
            num_stages: 2,
            layers_per_stage: 6,
            kernel_size: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
            ("num_stages", self.num_stages),
            ("layers_per_stage", self.layers_per_stage),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(arg_err!("{name} must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(arg_err!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.layers_per_stage >= usize::BITS as usize {
            return Err(arg_err!("too many layers per stage"));
        }
        Ok(())
    }

    /// Dilation of layer `layer` within a stage.
    pub fn dilation(&self, layer: usize) -> usize {
        1 << layer
    }

    /// Frames on each side that influence one output frame of a stage.
    pub fn stage_radius(&self) -> usize {
        let half = (self.kernel_size - 1) / 2;
        (0..self.layers_per_stage).map(|l| half * self.dilation(l)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<P> {
    pub kernel: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<P> {
    pub proj: Linear<P>,
    pub layers: Vec<ConvLayer<P>>,
    pub head: Linear<P>,
}

/// Three affine maps with GELU after the first two.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams<P> {
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
    pub fc3: Linear<P>,
}

/// Parameter tree, shared between stored tensors and tape variables.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub stages: Vec<StageParams<P>>,
    pub predictor: PredictorParams<P>,
}

impl<P> Linear<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<P> ModelParams<P> {
    /// Rebuilds the tree with `f` applied to every named leaf, in canonical
    /// order.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| StageParams {
                proj: st.proj.map(&format!("stage{s}.proj"), &mut f),
                layers: st
                    .layers
                    .iter()
                    .enumerate()
                    .map(|(l, layer)| ConvLayer {
                        kernel: f(&format!("stage{s}.layer{l}.kernel"), &layer.kernel),
                        bias: f(&format!("stage{s}.layer{l}.bias"), &layer.bias),
                    })
                    .collect(),
                head: st.head.map(&format!("stage{s}.head"), &mut f),
            })
            .collect();
        let predictor = PredictorParams {
            fc1: self.predictor.fc1.map("predictor.fc1", &mut f),
            fc2: self.predictor.fc2.map("predictor.fc2", &mut f),
            fc3: self.predictor.fc3.map("predictor.fc3", &mut f),
        };
        ModelParams { stages, predictor }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        for (s, st) in self.stages.iter_mut().enumerate() {
            st.proj.visit_mut(&format!("stage{s}.proj"), &mut f);
            for (l, layer) in st.layers.iter_mut().enumerate() {
                f(&format!("stage{s}.layer{l}.kernel"), &mut layer.kernel);
                f(&format!("stage{s}.layer{l}.bias"), &mut layer.bias);
            }
            st.head.visit_mut(&format!("stage{s}.head"), &mut f);
        }
        self.predictor.fc1.visit_mut("predictor.fc1", &mut f);
        self.predictor.fc2.visit_mut("predictor.fc2", &mut f);
        self.predictor.fc3.visit_mut("predictor.fc3", &mut f);
    }

    /// Leaves in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut names = Vec::new();
        self.map(|name, _| names.push(name.to_string()));
        let mut refs = Vec::with_capacity(names.len());
        collect_refs(self, &mut refs);
        names.into_iter().zip(refs).collect()
    }

    /// Mutable leaves in the same canonical order as [`Self::named`].
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        for st in &mut self.stages {
            out.push(&mut st.proj.weight);
            out.push(&mut st.proj.bias);
            for layer in &mut st.layers {
                out.push(&mut layer.kernel);
                out.push(&mut layer.bias);
            }
            out.push(&mut st.head.weight);
            out.push(&mut st.head.bias);
        }
        let pred = &mut self.predictor;
        for fc in [&mut pred.fc1, &mut pred.fc2, &mut pred.fc3] {
            out.push(&mut fc.weight);
            out.push(&mut fc.bias);
        }
        out
    }
}

fn collect_refs<'a, P>(params: &'a ModelParams<P>, out: &mut Vec<&'a P>) {
    for st in &params.stages {
        out.push(&st.proj.weight);
        out.push(&st.proj.bias);
        for layer in &st.layers {
            out.push(&layer.kernel);
            out.push(&layer.bias);
        }
        out.push(&st.head.weight);
        out.push(&st.head.bias);
    }
    for fc in [&params.predictor.fc1, &params.predictor.fc2, &params.predictor.fc3] {
        out.push(&fc.weight);
        out.push(&fc.bias);
    }
}

/// Encoder, classification heads and predictor with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub config: EncoderConfig,
    pub params: ModelParams<Tensor<S>>,
}

/// Tape-side outputs of [`encode`].
#[derive(Clone, Debug)]
pub struct EncodeOutput<'t, S: Scalar> {
    /// `[T×D]` features of the last stage before its classifier.
    pub z: Var<'t, S>,
    /// `[T×C]` logits of every stage, first to last.
    pub logits_per_stage: Vec<Var<'t, S>>,
}

/// Plain-value encoder outputs for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<S> {
    pub z: Tensor<S>,
    pub logits_per_stage: Vec<Tensor<S>>,
}

fn uniform_tensor<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::lit(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn linear_init<S: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear<Tensor<S>> {
    Linear {
        weight: uniform_tensor(&[fan_in, fan_out], fan_in, rng),
        bias: Tensor::zeros(&[fan_out]),
    }
}

impl<S: Scalar> Linear<Tensor<S>> {
    /// Uniform `±1/√fan_in` weights and zero bias.
    pub fn init(fan_in: usize, fan_out: usize, seed: u64) -> Self {
        linear_init(fan_in, fan_out, &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

impl<S: Scalar> ModelState<S> {
    /// Seeded initialisation: weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c, k) = (config.embed_dim, config.num_classes, config.kernel_size);
        let stages = (0..config.num_stages)
            .map(|s| {
                let input = if s == 0 { config.input_dim } else { c };
                StageParams {
                    proj: linear_init(input, d, &mut rng),
                    layers: (0..config.layers_per_stage)
                        .map(|_| ConvLayer {
                            kernel: uniform_tensor(&[k, d, d], k * d, &mut rng),
                            bias: Tensor::zeros(&[d]),
                        })
                        .collect(),
                    head: linear_init(d, c, &mut rng),
                }
            })
            .collect();
        let predictor = PredictorParams {
            fc1: linear_init(d, d, &mut rng),
            fc2: linear_init(d, d, &mut rng),
            fc3: linear_init(d, d, &mut rng),
        };
        Ok(Self {
            config,
            params: ModelParams { stages, predictor },
        })
    }

    /// Every parameter tensor with the shape the configuration implies.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = Self::init(self.config.clone(), 0)?;
        let expected = reference.params.named();
        let actual = self.params.named();
        if expected.len() != actual.len() {
            return Err(shape_err!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                actual.len()
            ));
        }
        for ((name, e), (_, a)) in expected.iter().zip(&actual) {
            if e.shape() != a.shape() {
                return Err(shape_err!("{name}: expected {:?}, found {:?}", e.shape(), a.shape()));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> ModelParams<Var<'t, S>> {
        self.params.map(|_, p| tape.param(p.clone()))
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<S>) -> ModelParams<Var<'t, S>> {
        self.params.map(|_, p| tape.constant(p.clone()))
    }

    /// Runs the encoder on a `[T×H]` feature matrix outside any training tape.
    pub fn encode(&self, features: &Tensor<S>) -> Result<Encoded<S>> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let input = tape.constant(features.clone());
        let out = encode(&self.config, &bound, input)?;
        Ok(Encoded {
            z: Tensor::clone(&out.z.value()),
            logits_per_stage: out
                .logits_per_stage
                .iter()
                .map(|l| Tensor::clone(&l.value()))
                .collect(),
        })
    }

    /// Frame labels from the final stage.
    pub fn segment(&self, features: &Tensor<S>) -> Result<Vec<u16>> {
        let out = self.encode(features)?;
        Ok(predict_labels(out.logits_per_stage.last().expect("at least one stage")))
    }
}

/// Per-frame affine map `x·W + b`.
pub fn linear<'t, S: Scalar>(x: Var<'t, S>, layer: &Linear<Var<'t, S>>) -> Result<Var<'t, S>> {
    x.matmul(layer.weight)?.add_row(layer.bias)
}

/// Encodes `[T×H]` features into the embedding and per-stage logits.
pub fn encode<'t, S: Scalar>(
    config: &EncoderConfig,
    params: &ModelParams<Var<'t, S>>,
    features: Var<'t, S>,
) -> Result<EncodeOutput<'t, S>> {
    let shape = features.shape();
    if shape.len() != 2 || shape[1] != config.input_dim {
        return Err(shape_err!(
            "encoder expects [T×{}] features, got {shape:?}",
            config.input_dim
        ));
    }
    let mut logits_per_stage = Vec::with_capacity(params.stages.len());
    let mut z = None;
    for (s, stage) in params.stages.iter().enumerate() {
        let input = if s == 0 {
            features
        } else {
            logits_per_stage
                .last()
                .copied()
                .map(|l: Var<'t, S>| l.softmax())
                .expect("previous stage")
        };
        let mut h = linear(input, &stage.proj)?;
        for (l, layer) in stage.layers.iter().enumerate() {
            let conv = h.dilated_conv1d(layer.kernel, layer.bias, config.dilation(l))?;
            h = h.add(conv.relu())?;
        }
        logits_per_stage.push(linear(h, &stage.head)?);
        z = Some(h);
    }
    Ok(EncodeOutput {
        z: z.expect("at least one stage"),
        logits_per_stage,
    })
}

/// `p = fc3(gelu(fc2(gelu(fc1(z)))))`, frame by frame.
pub fn predictor_forward<'t, S: Scalar>(
    predictor: &PredictorParams<Var<'t, S>>,
    z: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let d = predictor.fc1.weight.shape()[0];
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != d {
        return Err(shape_err!("predictor expects [T×{d}], got {shape:?}"));
    }
    let h = linear(z, &predictor.fc1)?.gelu();
    let h = linear(h, &predictor.fc2)?.gelu();
    linear(h, &predictor.fc3)
}

/// Per-frame argmax; ties go to the smallest class index.
pub fn predict_labels<S: Scalar>(logits: &Tensor<S>) -> Vec<u16> {
    let cols = *logits.shape().last().expect("rank");
    logits
        .data()
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            embed_dim: 4,
            num_classes: 3,
            num_stages: 2,
            layers_per_stage: 3,
            kernel_size: 3,
        }
    }

    fn features(t: usize, h: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * h).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(vec![t, h], data).unwrap()
    }

    #[test]
    fn single_frame_shapes() {
        let state = ModelState::<f64>::init(small_config(), 1).unwrap();
        let out = state.encode(&features(1, 3, 2)).unwrap();
        assert_eq!(out.z.shape(), &[1, 4]);
        assert_eq!(out.logits_per_stage.len(), 2);
        for l in &out.logits_per_stage {
            assert_eq!(l.shape(), &[1, 3]);
        }
    }

    #[test]
    fn zero_model_gives_uniform_posteriors() {
        let mut state = ModelState::<f64>::init(small_config(), 1).unwrap();
        state.params.visit_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let out = state.encode(&Tensor::zeros(&[5, 3])).unwrap();
        for l in &out.logits_per_stage {
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(predict_labels(&out.logits_per_stage[1]), vec![0; 5]);
    }

    #[test]
    fn encode_is_deterministic() {
        let state = ModelState::<f64>::init(small_config(), 9).unwrap();
        let x = features(17, 3, 4);
        assert_eq!(state.encode(&x).unwrap(), state.encode(&x).unwrap());
        let again = ModelState::<f64>::init(small_config(), 9).unwrap();
        assert_eq!(state, again);
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let state = ModelState::<f64>::init(small_config(), 1).unwrap();
        assert!(matches!(state.encode(&features(4, 5, 0)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn single_stage_interior_is_shift_equivariant() {
        let cfg = EncoderConfig { num_stages: 1, ..small_config() };
        let state = ModelState::<f64>::init(cfg.clone(), 3).unwrap();
        let radius = cfg.stage_radius();
        let base = features(40, 3, 5);
        let shift = 3;
        // Constant padding: repeat the first frame `shift` times in front.
        let mut shifted = base.row(0).repeat(shift);
        shifted.extend_from_slice(&base.data()[..(40 - shift) * 3]);
        let shifted = Tensor::new(vec![40, 3], shifted).unwrap();
        let a = state.encode(&base).unwrap().z;
        let b = state.encode(&shifted).unwrap().z;
        for t in (radius + shift)..(40 - radius) {
            for (x, y) in a.row(t - shift).iter().zip(b.row(t)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_predictor_is_double_gelu() {
        let d = 3;
        let eye = Tensor::new(vec![d, d], (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let tape = Tape::<f64>::new();
        let fc = || Linear { weight: tape.constant(eye.clone()), bias: tape.constant(Tensor::zeros(&[d])) };
        let pred = PredictorParams { fc1: fc(), fc2: fc(), fc3: fc() };
        let z = tape.constant(features(4, d, 1));
        let p = predictor_forward(&pred, z).unwrap();
        let expected = z.gelu().gelu();
        assert_eq!(p.value().data(), expected.value().data());
    }

    #[test]
    fn zero_weight_predictor_emits_last_bias() {
        let d = 2;
        let tape = Tape::<f64>::new();
        let zero = || Linear { weight: tape.constant(Tensor::zeros(&[d, d])), bias: tape.constant(Tensor::zeros(&[d])) };
        let fc3 = Linear { weight: tape.constant(Tensor::zeros(&[d, d])), bias: tape.constant(Tensor::vector(vec![0.5, -1.5]).unwrap()) };
        let pred = PredictorParams { fc1: zero(), fc2: zero(), fc3 };
        let p = predictor_forward(&pred, tape.constant(features(3, d, 2))).unwrap();
        assert_eq!(p.value().data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn predictor_is_frame_local() {
        let state = ModelState::<f64>::init(small_config(), 4).unwrap();
        let tape = Tape::new();
        let bound = state.bind_frozen(&tape);
        let z = features(6, 4, 7);
        let mut z2 = z.clone();
        z2.data_mut()[2 * 4 + 1] += 0.75;
        let p1 = predictor_forward(&bound.predictor, tape.constant(z)).unwrap().value();
        let p2 = predictor_forward(&bound.predictor, tape.constant(z2)).unwrap().value();
        for t in 0..6 {
            assert_eq!(p1.row(t) == p2.row(t), t != 2, "frame {t}");
        }
    }

    #[test]
    fn predictor_gradient_matches_fd() {
        let state = ModelState::<f64>::init(small_config(), 4).unwrap();
        let pred = &state.params.predictor;
        let inputs = vec![
            features(5, 4, 1),
            pred.fc1.weight.clone(),
            features(1, 4, 2).map(|v| v * 0.1),
            pred.fc2.weight.clone(),
            pred.fc3.weight.clone(),
        ];
        let err = finite_difference_check(
            |tape, v| {
                let b1 = tape.constant(Tensor::zeros(&[4]));
                let p = PredictorParams {
                    fc1: Linear { weight: v[1], bias: v[2].sum_axis(0)? },
                    fc2: Linear { weight: v[3], bias: b1 },
                    fc3: Linear { weight: v[4], bias: b1 },
                };
                let out = predictor_forward(&p, v[0])?;
                Ok(out.mul(out)?.mean())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn label_prediction_rules() {
        let one_hot = Tensor::matrix(3, 3, vec![0., 1., 0., 1., 0., 0., 0., 0., 1.]).unwrap();
        assert_eq!(predict_labels(&one_hot), vec![1, 0, 2]);
        let flat = Tensor::matrix(1, 4, vec![0.3; 4]).unwrap();
        assert_eq!(predict_labels(&flat), vec![0]);
        let mixed = Tensor::matrix(2, 2, vec![0.2, 0.9, 1.5, -1.0]).unwrap();
        assert_eq!(predict_labels(&mixed), vec![1, 0]);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { kernel_size: 4, ..small_config() }.validate().is_err());
        assert!(EncoderConfig { num_stages: 0, ..small_config() }.validate().is_err());
        assert!(small_config().validate().is_ok());
    }
}

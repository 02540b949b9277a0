use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns the largest `|analytic − numeric| / max(1, |numeric|)` over all
/// input coordinates. Perturbed evaluations replay the unperturbed outputs of
/// every `stop_gradient`, so the numeric side differentiates the same
/// surrogate objective the backward pass does.
pub fn finite_difference_check<S, F>(f: F, inputs: &[Tensor<S>], h: S) -> Result<S>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let root = f(&tape, &vars)?;
    root.backward()?;
    let analytic: Vec<Tensor<S>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    let frozen = tape.stop_gradient_values();

    let eval = |perturbed: &[Tensor<S>]| -> Result<S> {
        let tape = Tape::replaying(frozen.clone());
        let vars: Vec<_> = perturbed.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out.item().expect("scalar objective"))
    };

    let two_h = h + h;
    let mut worst = S::zero();
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / two_h;
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(S::one());
            if err > worst || err.is_nan() {
                worst = err;
            }
        }
    }
    Ok(worst)
}

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NnResult;

/// Central-difference step used by the gradient checks.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Elements closer than this are treated as an exact match, which keeps the
/// relative error well defined when both gradients are essentially zero.
const ABS_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` rebuilds the scalar loss from scratch on a fresh tape each call, with
/// the given parameters recorded as the first leaves. Returns the worst
/// relative error over every element of every parameter:
/// |a − n| / max(|a|, |n|), with differences below an absolute floor of 1e-6
/// counting as exact.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> NnResult<f64>
where
    F: Fn(&mut Tape, &[Var]) -> NnResult<Var>,
{
    let eval = |tensors: &[Tensor]| -> NnResult<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    // One reverse sweep for the analytic side.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.len() {
            let orig = param.data()[ei];
            perturbed[pi].data_mut()[ei] = orig + step;
            let up = eval(&perturbed)?;
            perturbed[pi].data_mut()[ei] = orig - step;
            let down = eval(&perturbed)?;
            perturbed[pi].data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.wrt(vars[pi]).data()[ei];
            let diff = (analytic - numeric).abs();
            if diff > ABS_FLOOR {
                worst = worst.max(diff / analytic.abs().max(numeric.abs()));
            }
        }
    }
    Ok(worst)
}

//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used here, so these routines serve as an
//! oracle independent of every VJP in the crate.

use crate::error::Result;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Central-difference gradient of a scalar function of several tensors.
///
/// Each element of each input is perturbed by `±step` in turn; the inputs are
/// restored before returning.
pub fn fd_gradient<F>(inputs: &mut [Tensor<f64>], step: f64, mut loss: F) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut grads: Vec<Tensor<f64>> = inputs.iter().map(|t| Tensor::zeros(t.dims())).collect();
    for t in 0..inputs.len() {
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + step;
            let plus = loss(inputs)?;
            inputs[t].data_mut()[i] = orig - step;
            let minus = loss(inputs)?;
            inputs[t].data_mut()[i] = orig;
            grads[t].data_mut()[i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(grads)
}

/// Central-difference directional derivative of `f` at `inputs` along `dirs`.
pub fn fd_directional<F>(
    inputs: &[Tensor<f64>],
    dirs: &[Tensor<f64>],
    step: f64,
    mut f: F,
) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>,
{
    let shifted = |sign: f64| -> Result<Vec<Tensor<f64>>> {
        inputs
            .iter()
            .zip(dirs)
            .map(|(x, d)| x.add(&d.scale(sign * step)))
            .collect()
    };
    let plus = f(&shifted(1.0)?)?;
    let minus = f(&shifted(-1.0)?)?;
    plus.iter()
        .zip(&minus)
        .map(|(p, m)| Ok(p.sub(m)?.scale(1.0 / (2.0 * step))))
        .collect()
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
}

/// Compares analytic against numeric gradients tensor by tensor, returning
/// the per-tensor norm-wise relative error.
///
/// Tensors whose numeric gradient is below `abs_floor` everywhere are compared
/// in absolute terms against that floor instead.
pub fn compare(
    names: &[String],
    analytic: &[Tensor<f64>],
    numeric: &[Tensor<f64>],
    abs_floor: f64,
) -> Result<Vec<GradCheck>> {
    names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            let scale = n.max_abs().max(abs_floor);
            let diff = a.sub(n)?.max_abs();
            Ok(GradCheck {
                name: name.clone(),
                rel_err: diff / scale,
            })
        })
        .collect()
}

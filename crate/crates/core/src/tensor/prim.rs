//! Uniform forward/VJP interface over the primitives, used by the gradient
//! checkers. Layers call the typed functions directly.

use super::ops::{self, LayerNormCache};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveId {
    Matmul,
    RowSoftmax,
    Gelu,
    LayerNorm,
}

/// Forward values a primitive saves for its VJP.
#[derive(Debug, Clone)]
pub enum PrimitiveCache<T> {
    Matmul { a: Tensor<T>, b: Tensor<T> },
    RowSoftmax { y: Tensor<T> },
    Gelu { x: Tensor<T> },
    LayerNorm { ln: LayerNormCache<T>, gamma: Tensor<T> },
}

impl<T> PrimitiveCache<T> {
    pub fn id(&self) -> PrimitiveId {
        match self {
            PrimitiveCache::Matmul { .. } => PrimitiveId::Matmul,
            PrimitiveCache::RowSoftmax { .. } => PrimitiveId::RowSoftmax,
            PrimitiveCache::Gelu { .. } => PrimitiveId::Gelu,
            PrimitiveCache::LayerNorm { .. } => PrimitiveId::LayerNorm,
        }
    }
}

/// Layer-norm epsilon used throughout the crate.
pub const LN_EPS: f64 = 1e-5;

/// Runs primitive `id` on `inputs` and returns its output with a cache.
///
/// Input order: matmul `[a, b]`, softmax `[x]`, gelu `[x]`,
/// layer norm `[x, gamma, beta]` (eps fixed at [`LN_EPS`]).
pub fn forward_cached<T: Scalar>(
    id: PrimitiveId,
    inputs: &[&Tensor<T>],
) -> Result<(Tensor<T>, PrimitiveCache<T>)> {
    let arity = match id {
        PrimitiveId::Matmul => 2,
        PrimitiveId::RowSoftmax | PrimitiveId::Gelu => 1,
        PrimitiveId::LayerNorm => 3,
    };
    if inputs.len() != arity {
        return Err(Error::Contract(format!(
            "{id:?} takes {arity} inputs, got {}",
            inputs.len()
        )));
    }
    match id {
        PrimitiveId::Matmul => Ok((
            ops::matmul(inputs[0], inputs[1])?,
            PrimitiveCache::Matmul {
                a: inputs[0].clone(),
                b: inputs[1].clone(),
            },
        )),
        PrimitiveId::RowSoftmax => {
            let y = ops::row_softmax(inputs[0]);
            Ok((y.clone(), PrimitiveCache::RowSoftmax { y }))
        }
        PrimitiveId::Gelu => Ok((
            ops::gelu(inputs[0]),
            PrimitiveCache::Gelu {
                x: inputs[0].clone(),
            },
        )),
        PrimitiveId::LayerNorm => {
            let (y, ln) = ops::layer_norm(inputs[0], inputs[1], inputs[2], T::lit(LN_EPS))?;
            Ok((
                y,
                PrimitiveCache::LayerNorm {
                    ln,
                    gamma: inputs[1].clone(),
                },
            ))
        }
    }
}

/// Cotangents for every input of primitive `id`, in forward input order.
pub fn vjp<T: Scalar>(
    id: PrimitiveId,
    cache: &PrimitiveCache<T>,
    d_out: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    if cache.id() != id {
        return Err(Error::Contract(format!(
            "vjp for {id:?} called with a {:?} cache",
            cache.id()
        )));
    }
    match cache {
        PrimitiveCache::Matmul { a, b } => {
            let (da, db) = ops::matmul_vjp(a, b, d_out)?;
            Ok(vec![da, db])
        }
        PrimitiveCache::RowSoftmax { y } => Ok(vec![ops::row_softmax_vjp(y, d_out)?]),
        PrimitiveCache::Gelu { x } => Ok(vec![ops::gelu_vjp(x, d_out)?]),
        PrimitiveCache::LayerNorm { ln, gamma } => {
            let (dx, dg, db) = ops::layer_norm_vjp(ln, gamma, d_out)?;
            Ok(vec![dx, dg, db])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn mismatched_cache_is_a_contract_error() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let (_, cache) = forward_cached(PrimitiveId::Gelu, &[&x]).unwrap();
        let err = vjp(PrimitiveId::RowSoftmax, &cache, &x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn wrong_arity_is_a_contract_error() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(
            forward_cached(PrimitiveId::Matmul, &[&x]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gelu_slope_at_zero_halves_cotangent() {
        let x = Tensor::<f64>::zeros(&[3]);
        let (_, cache) = forward_cached(PrimitiveId::Gelu, &[&x]).unwrap();
        let mut rng = Rng::new(1, 0);
        let d = Tensor::from_fn(&[3], |_| rng.normal());
        let dx = vjp(PrimitiveId::Gelu, &cache, &d).unwrap();
        assert!(dx[0].bit_eq(&d.scale(0.5)));
    }
}

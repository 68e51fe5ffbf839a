//! Sublayers of the reversible block and the non-reversible pieces around it.
//!
//! `F` is pre-norm multi-head self-attention and `G` is a pre-norm GELU MLP.
//! Neither contains a residual connection: the identity path of a reversible
//! block lives entirely in the coupling.

mod attention;
mod boundary;
mod embed;
mod mlp;

pub use attention::{AttentionCache, AttentionGrads, AttentionParams};
pub use boundary::{
    fuse, fuse_vjp, patch_merge, patch_merge_vjp, BoundaryGrads, BoundaryParams, FuseCache,
    FusionKind, MergeCache,
};
pub use embed::{embed_forward, embed_vjp, head_forward, head_vjp, HeadCache};
pub use mlp::{MlpCache, MlpGrads, MlpParams};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Byte size of retained activations.
pub trait Footprint {
    fn bytes(&self) -> u64;
}

/// Named parameter (or cotangent) tensors in a fixed order.
///
/// A parameter struct and its gradient struct list the same names in the
/// same order, which is what lets the optimizer pair them up.
pub trait ParamSet<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)>;
}

/// A function usable as `F` or `G` inside a reversible block.
pub trait Sublayer<T: Scalar>: Send + Sync {
    type Cache: Footprint + Send;
    type Grads: Send;

    fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Self::Cache)>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    /// Input cotangent and parameter cotangents for the forward that
    /// produced `cache`.
    fn vjp(&self, cache: &Self::Cache, d_y: &Tensor<T>) -> Result<(Tensor<T>, Self::Grads)>;
}

pub(crate) fn check_token_input<T: Scalar>(x: &Tensor<T>, d: usize, what: &str) -> Result<(usize, usize)> {
    match *x.dims() {
        [b, n, dd] if dd == d => Ok((b, n)),
        _ => Err(crate::error::shape_err(format!(
            "{what}: expected [B×N×{d}], got {:?}",
            x.dims()
        ))),
    }
}

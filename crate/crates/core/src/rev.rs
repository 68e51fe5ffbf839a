//! The reversible coupling and its local backward step.
//!
//! ```text
//! forward:  o2 = i2 + F(i1)        inverse:  i1 = o1 − G(o2)
//!           o1 = i1 + G(o2)                  i2 = o2 − F(i1)
//! ```
//!
//! Both directions cost one evaluation of `F` and one of `G`. The backward
//! step is split into two halves so the engines can schedule them on
//! different lanes: [`recompute_from_output`] reconstructs the block input and
//! the `F`/`G` intermediates, and [`rev_vjp`] turns those intermediates and
//! the output cotangent into input and parameter cotangents.

use crate::error::{shape_err, Result};
use crate::layers::{AttentionParams, Footprint, MlpParams, ParamSet, Sublayer};
use crate::tensor::{Scalar, Tensor};

/// The activation pair flowing through reversible blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupled<T> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
}

impl<T: Scalar> Coupled<T> {
    pub fn new(x1: Tensor<T>, x2: Tensor<T>) -> Result<Self> {
        if !x1.same_shape(&x2) {
            return Err(shape_err(format!(
                "coupled halves differ: {:?} vs {:?}",
                x1.dims(),
                x2.dims()
            )));
        }
        Ok(Self { x1, x2 })
    }

    /// `(x, x)`
    pub fn duplicate(x: Tensor<T>) -> Self {
        Self { x1: x.clone(), x2: x }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::duplicate(Tensor::zeros(dims))
    }

    pub fn dims(&self) -> &[usize] {
        self.x1.dims()
    }

    pub fn bytes(&self) -> u64 {
        self.x1.bytes() + self.x2.bytes()
    }

    /// Larger of the two halves' norm-wise relative errors against `other`.
    pub fn rel_err(&self, other: &Self) -> Result<f64> {
        Ok(self.x1.rel_err(&other.x1)?.max(self.x2.rel_err(&other.x2)?))
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.x1.bit_eq(&other.x1) && self.x2.bit_eq(&other.x2)
    }
}

/// One reversible block with sublayers `F` and `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct RevBlock<F, G> {
    pub f: F,
    pub g: G,
    pub id: usize,
}

/// Attention as `F`, MLP as `G`.
pub type TransformerBlock<T> = RevBlock<AttentionParams<T>, MlpParams<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct RevBlockGrads<FG, GG> {
    pub d_f: FG,
    pub d_g: GG,
}

pub type TransformerBlockGrads<T> =
    RevBlockGrads<crate::layers::AttentionGrads<T>, crate::layers::MlpGrads<T>>;

/// Intermediates of one block's `F` and `G` evaluations: exactly what the
/// gradient half of the backward step consumes.
pub struct BlockActivations<T: Scalar, F: Sublayer<T>, G: Sublayer<T>> {
    pub f_cache: F::Cache,
    pub g_cache: G::Cache,
}

impl<T: Scalar, F: Sublayer<T>, G: Sublayer<T>> Footprint for BlockActivations<T, F, G> {
    fn bytes(&self) -> u64 {
        self.f_cache.bytes() + self.g_cache.bytes()
    }
}

impl<F, G> RevBlock<F, G> {
    pub fn new(f: F, g: G, id: usize) -> Self {
        Self { f, g, id }
    }
}

/// `o2 = i2 + F(i1); o1 = i1 + G(o2)`.
pub fn rev_forward<T, F, G>(block: &RevBlock<F, G>, inp: &Coupled<T>) -> Result<Coupled<T>>
where
    T: Scalar,
    F: Sublayer<T>,
    G: Sublayer<T>,
{
    let o2 = inp.x2.add(&block.f.forward(&inp.x1)?)?;
    let o1 = inp.x1.add(&block.g.forward(&o2)?)?;
    Ok(Coupled { x1: o1, x2: o2 })
}

/// `i1 = o1 − G(o2); i2 = o2 − F(i1)`.
pub fn rev_inverse<T, F, G>(block: &RevBlock<F, G>, out: &Coupled<T>) -> Result<Coupled<T>>
where
    T: Scalar,
    F: Sublayer<T>,
    G: Sublayer<T>,
{
    let i1 = out.x1.sub(&block.g.forward(&out.x2)?)?;
    let i2 = out.x2.sub(&block.f.forward(&i1)?)?;
    Ok(Coupled { x1: i1, x2: i2 })
}

/// Forward from a known input, keeping the intermediates.
pub fn forward_with_caches<T, F, G>(
    block: &RevBlock<F, G>,
    inp: &Coupled<T>,
) -> Result<(Coupled<T>, BlockActivations<T, F, G>)>
where
    T: Scalar,
    F: Sublayer<T>,
    G: Sublayer<T>,
{
    let (f_out, f_cache) = block.f.forward_cached(&inp.x1)?;
    let o2 = inp.x2.add(&f_out)?;
    let (g_out, g_cache) = block.g.forward_cached(&o2)?;
    let o1 = inp.x1.add(&g_out)?;
    Ok((Coupled { x1: o1, x2: o2 }, BlockActivations { f_cache, g_cache }))
}

/// Inverse that also keeps the intermediates, so the following [`rev_vjp`]
/// needs no further `F`/`G` evaluations.
pub fn recompute_from_output<T, F, G>(
    block: &RevBlock<F, G>,
    out: &Coupled<T>,
) -> Result<(Coupled<T>, BlockActivations<T, F, G>)>
where
    T: Scalar,
    F: Sublayer<T>,
    G: Sublayer<T>,
{
    let (g_out, g_cache) = block.g.forward_cached(&out.x2)?;
    let i1 = out.x1.sub(&g_out)?;
    let (f_out, f_cache) = block.f.forward_cached(&i1)?;
    let i2 = out.x2.sub(&f_out)?;
    Ok((Coupled { x1: i1, x2: i2 }, BlockActivations { f_cache, g_cache }))
}

/// Gradient half of the backward step.
///
/// `d_i2 = d_o2 + G'ᵀ·d_o1`, then `d_i1 = d_o1 + F'ᵀ·d_i2`. The G path is
/// always accumulated before the F path.
pub fn rev_vjp<T, F, G>(
    block: &RevBlock<F, G>,
    acts: &BlockActivations<T, F, G>,
    d_out: &Coupled<T>,
) -> Result<(Coupled<T>, RevBlockGrads<F::Grads, G::Grads>)>
where
    T: Scalar,
    F: Sublayer<T>,
    G: Sublayer<T>,
{
    let (g_back, d_g) = block.g.vjp(&acts.g_cache, &d_out.x1)?;
    let d_i2 = d_out.x2.add(&g_back)?;
    let (f_back, d_f) = block.f.vjp(&acts.f_cache, &d_i2)?;
    let d_i1 = d_out.x1.add(&f_back)?;
    Ok((Coupled { x1: d_i1, x2: d_i2 }, RevBlockGrads { d_f, d_g }))
}

/// Backward step from the block output alone: reconstructs the input, then
/// computes cotangents. The intermediates are dropped on return.
#[allow(clippy::type_complexity)]
pub fn rev_backward_local<T, F, G>(
    block: &RevBlock<F, G>,
    out: &Coupled<T>,
    d_out: &Coupled<T>,
) -> Result<(Coupled<T>, Coupled<T>, RevBlockGrads<F::Grads, G::Grads>)>
where
    T: Scalar,
    F: Sublayer<T>,
    G: Sublayer<T>,
{
    if d_out.dims() != out.dims() {
        return Err(shape_err(format!(
            "d_out {:?} does not match output {:?}",
            d_out.dims(),
            out.dims()
        )));
    }
    let (inp, acts) = recompute_from_output(block, out)?;
    let (d_inp, grads) = rev_vjp(block, &acts, d_out)?;
    Ok((inp, d_inp, grads))
}

/// Backward step from a stored input.
pub fn rev_backward_stored<T, F, G>(
    block: &RevBlock<F, G>,
    inp: &Coupled<T>,
    d_out: &Coupled<T>,
) -> Result<(Coupled<T>, RevBlockGrads<F::Grads, G::Grads>)>
where
    T: Scalar,
    F: Sublayer<T>,
    G: Sublayer<T>,
{
    if d_out.dims() != inp.dims() {
        return Err(shape_err(format!(
            "d_out {:?} does not match input {:?}",
            d_out.dims(),
            inp.dims()
        )));
    }
    let (_, acts) = forward_with_caches(block, inp)?;
    rev_vjp(block, &acts, d_out)
}

impl<FG, GG> RevBlockGrads<FG, GG> {
    /// `f.*` then `g.*` tensors, in a fixed order.
    pub fn named<T>(&self) -> Vec<(String, &Tensor<T>)>
    where
        FG: ParamSet<T>,
        GG: ParamSet<T>,
    {
        let mut v: Vec<(String, &Tensor<T>)> = self
            .d_f
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("f.{n}"), t))
            .collect();
        v.extend(self.d_g.tensors().into_iter().map(|(n, t)| (format!("g.{n}"), t)));
        v
    }
}

impl<F, G> RevBlock<F, G> {
    pub fn named<T>(&self) -> Vec<(String, &Tensor<T>)>
    where
        F: ParamSet<T>,
        G: ParamSet<T>,
    {
        let mut v: Vec<(String, &Tensor<T>)> = self
            .f
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("f.{n}"), t))
            .collect();
        v.extend(self.g.tensors().into_iter().map(|(n, t)| (format!("g.{n}"), t)));
        v
    }

    pub fn named_mut<T>(&mut self) -> Vec<(String, &mut Tensor<T>)>
    where
        F: ParamSet<T>,
        G: ParamSet<T>,
    {
        let mut v: Vec<(String, &mut Tensor<T>)> = self
            .f
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("f.{n}"), t))
            .collect();
        v.extend(
            self.g
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("g.{n}"), t)),
        );
        v
    }
}

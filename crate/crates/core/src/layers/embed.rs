use super::Footprint;
use crate::error::{shape_err, Result};
use crate::tensor::{linear, linear_vjp, mm, mm_nt, mm_tn, Scalar, Tensor};

/// Token embedding: `inputs [B×N×in_dim] · embed_w [in_dim×d]`.
pub fn embed_forward<T: Scalar>(inputs: &Tensor<T>, embed_w: &Tensor<T>) -> Result<Tensor<T>> {
    if inputs.rank() != 3 {
        return Err(shape_err(format!("embed: expected [B×N×in_dim], got {:?}", inputs.dims())));
    }
    linear(inputs, embed_w)
}

/// Cotangent of `embed_w`. The inputs are data, so no input cotangent.
pub fn embed_vjp<T: Scalar>(inputs: &Tensor<T>, embed_w: &Tensor<T>, d_y: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(linear_vjp(inputs, embed_w, d_y)?.1)
}

/// What the head keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    pooled: Tensor<T>,
    token_dims: Vec<usize>,
}

impl<T: Scalar> Footprint for HeadCache<T> {
    fn bytes(&self) -> u64 {
        self.pooled.bytes()
    }
}

/// Classifier head: average the pair, mean-pool over tokens, project.
pub fn head_forward<T: Scalar>(o1: &Tensor<T>, o2: &Tensor<T>, head_w: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
    let (b, n, d) = match *o1.dims() {
        [b, n, d] => (b, n, d),
        _ => return Err(shape_err(format!("head: expected [B×N×d], got {:?}", o1.dims()))),
    };
    if !o1.same_shape(o2) {
        return Err(shape_err(format!("head: {:?} vs {:?}", o1.dims(), o2.dims())));
    }
    head_w.expect_shape(&[d, head_w.last_dim()], "head_w")?;
    let half = T::lit(0.5);
    let inv_n = T::one() / T::lit(n as f64);
    let mut pooled = Tensor::zeros(&[b, d]);
    for (bi, prow) in pooled.data_mut().chunks_exact_mut(d).enumerate() {
        let base = bi * n * d;
        for t in 0..n {
            let r1 = &o1.data()[base + t * d..base + (t + 1) * d];
            let r2 = &o2.data()[base + t * d..base + (t + 1) * d];
            for ((acc, &a), &c) in prow.iter_mut().zip(r1).zip(r2) {
                *acc = *acc + (a + c) * half;
            }
        }
        for v in prow.iter_mut() {
            *v = *v * inv_n;
        }
    }
    let classes = head_w.last_dim();
    let logits = Tensor::new(&[b, classes], mm(pooled.data(), head_w.data(), b, d, classes))?;
    Ok((logits, HeadCache { pooled, token_dims: o1.dims().to_vec() }))
}

/// Returns `(d_o1, d_o2, d_head_w)`; the two pair cotangents are equal.
pub fn head_vjp<T: Scalar>(
    cache: &HeadCache<T>,
    head_w: &Tensor<T>,
    d_logits: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, n, d) = (cache.token_dims[0], cache.token_dims[1], cache.token_dims[2]);
    let classes = head_w.last_dim();
    d_logits.expect_shape(&[b, classes], "head d_logits")?;
    let d_head_w = Tensor::new(&[d, classes], mm_tn(cache.pooled.data(), d_logits.data(), b, d, classes))?;
    let d_pooled = mm_nt(d_logits.data(), head_w.data(), b, classes, d);
    let scale = T::lit(0.5) / T::lit(n as f64);
    let mut d_tok = Tensor::zeros(&cache.token_dims);
    for (bi, chunk) in d_tok.data_mut().chunks_exact_mut(n * d).enumerate() {
        let src = &d_pooled[bi * d..(bi + 1) * d];
        for row in chunk.chunks_exact_mut(d) {
            for (v, &g) in row.iter_mut().zip(src) {
                *v = g * scale;
            }
        }
    }
    Ok((d_tok.clone(), d_tok, d_head_w))
}

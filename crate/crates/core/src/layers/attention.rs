use super::{check_token_input, Footprint, ParamSet, Sublayer};
use crate::error::{Error, Result};
use crate::tensor::{
    layer_norm, layer_norm_vjp, linear, linear_vjp, mm, mm_nt, mm_tn, softmax_in_place,
    softmax_vjp_row, LayerNormCache, Rng, Scalar, Tensor, LN_EPS,
};

/// Pre-norm multi-head self-attention without biases:
/// `y = (softmax(q kᵀ / sqrt(d_head)) v) · w_out` with `[q k v] = LN(x) · w_qkv`.
///
/// With `window = Some(w)` each contiguous run of `w` tokens attends only
/// within itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub w_qkv: Tensor<T>,
    pub w_out: Tensor<T>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    pub heads: usize,
    pub window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads<T> {
    pub w_qkv: Tensor<T>,
    pub w_out: Tensor<T>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    ln: LayerNormCache<T>,
    ln_out: Tensor<T>,
    qkv: Tensor<T>,
    /// Attention probabilities laid out `[B][window][head][w][w]`.
    probs: Vec<T>,
    att: Tensor<T>,
}

impl<T: Scalar> Footprint for AttentionCache<T> {
    fn bytes(&self) -> u64 {
        self.ln.bytes()
            + self.ln_out.bytes()
            + self.qkv.bytes()
            + (self.probs.len() * T::DTYPE.size_of()) as u64
            + self.att.bytes()
    }
}

impl<T: Scalar> AttentionParams<T> {
    /// Weights from a truncated normal with standard deviation `std`;
    /// layer-norm scale one and shift zero.
    pub fn init(d: usize, heads: usize, window: Option<usize>, std: f64, rng: &mut Rng) -> Result<Self> {
        let p = Self {
            w_qkv: Tensor::from_fn(&[d, 3 * d], |_| T::lit(rng.trunc_normal(std))),
            w_out: Tensor::from_fn(&[d, d], |_| T::lit(rng.trunc_normal(std))),
            ln_gamma: Tensor::full(&[d], T::one()),
            ln_beta: Tensor::zeros(&[d]),
            heads,
            window,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(d: usize, heads: usize, window: Option<usize>) -> Result<Self> {
        let p = Self {
            w_qkv: Tensor::zeros(&[d, 3 * d]),
            w_out: Tensor::zeros(&[d, d]),
            ln_gamma: Tensor::zeros(&[d]),
            ln_beta: Tensor::zeros(&[d]),
            heads,
            window,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.w_out.dims()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_out.dims()[0];
        self.w_qkv.expect_shape(&[d, 3 * d], "w_qkv")?;
        self.w_out.expect_shape(&[d, d], "w_out")?;
        self.ln_gamma.expect_shape(&[d], "attention ln_gamma")?;
        self.ln_beta.expect_shape(&[d], "attention ln_beta")?;
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Shape(format!("width {d} not divisible by {} heads", self.heads)));
        }
        if self.window == Some(0) {
            return Err(Error::Shape("attention window must be positive".into()));
        }
        Ok(())
    }

    fn window_len(&self, n: usize) -> Result<usize> {
        let w = self.window.unwrap_or(n);
        if !n.is_multiple_of(w) {
            return Err(Error::Shape(format!(
                "sequence length {n} not divisible by window {w}"
            )));
        }
        Ok(w)
    }

    pub fn zero_grads(&self) -> AttentionGrads<T> {
        AttentionGrads {
            w_qkv: Tensor::zeros(self.w_qkv.dims()),
            w_out: Tensor::zeros(self.w_out.dims()),
            ln_gamma: Tensor::zeros(self.ln_gamma.dims()),
            ln_beta: Tensor::zeros(self.ln_beta.dims()),
        }
    }
}

/// Copies head `h` of section `sec` (0 = q, 1 = k, 2 = v) for tokens
/// `[t0, t0 + w)` of batch row `b` into a `[w × dh]` buffer.
fn gather<T: Scalar>(qkv: &[T], n: usize, d: usize, b: usize, t0: usize, w: usize, sec: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(w * dh);
    for t in t0..t0 + w {
        let base = (b * n + t) * 3 * d + sec * d + h * dh;
        out.extend_from_slice(&qkv[base..base + dh]);
    }
    out
}

impl<T: Scalar> Sublayer<T> for AttentionParams<T> {
    type Cache = AttentionCache<T>;
    type Grads = AttentionGrads<T>;

    fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        let d = self.width();
        let (batch, n) = check_token_input(x, d, "attention input")?;
        let w = self.window_len(n)?;
        let heads = self.heads;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();

        let (ln_out, ln) = layer_norm(x, &self.ln_gamma, &self.ln_beta, T::lit(LN_EPS))?;
        let qkv = linear(&ln_out, &self.w_qkv)?;
        let mut att = Tensor::zeros(x.dims());
        let mut probs = Vec::with_capacity(batch * n * heads * w);

        for b in 0..batch {
            for t0 in (0..n).step_by(w) {
                for h in 0..heads {
                    let q = gather(qkv.data(), n, d, b, t0, w, 0, h, dh);
                    let k = gather(qkv.data(), n, d, b, t0, w, 1, h, dh);
                    let v = gather(qkv.data(), n, d, b, t0, w, 2, h, dh);
                    let mut p = mm_nt(&q, &k, w, dh, w);
                    for row in p.chunks_exact_mut(w) {
                        for s in row.iter_mut() {
                            *s = *s * scale;
                        }
                        softmax_in_place(row);
                    }
                    let o = mm(&p, &v, w, w, dh);
                    let att_data = att.data_mut();
                    for (i, orow) in o.chunks_exact(dh).enumerate() {
                        let base = (b * n + t0 + i) * d + h * dh;
                        att_data[base..base + dh].copy_from_slice(orow);
                    }
                    probs.extend_from_slice(&p);
                }
            }
        }

        let y = linear(&att, &self.w_out)?;
        Ok((
            y,
            AttentionCache {
                ln,
                ln_out,
                qkv,
                probs,
                att,
            },
        ))
    }

    fn vjp(&self, cache: &AttentionCache<T>, d_y: &Tensor<T>) -> Result<(Tensor<T>, AttentionGrads<T>)> {
        let d = self.width();
        d_y.expect_shape(cache.att.dims(), "attention d_y")?;
        let (batch, n) = check_token_input(d_y, d, "attention d_y")?;
        let w = self.window_len(n)?;
        let heads = self.heads;
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        if cache.probs.len() != batch * n * heads * w {
            return Err(Error::Contract("attention cache does not match these params".into()));
        }

        let (d_att, d_w_out) = linear_vjp(&cache.att, &self.w_out, d_y)?;
        let mut d_qkv = Tensor::zeros(cache.qkv.dims());
        let qkv = cache.qkv.data();
        let mut p_chunks = cache.probs.chunks_exact(w * w);
        let mut d_s = vec![T::zero(); w * w];

        for b in 0..batch {
            for t0 in (0..n).step_by(w) {
                for h in 0..heads {
                    let p = p_chunks.next().expect("probs sized above");
                    let q = gather(qkv, n, d, b, t0, w, 0, h, dh);
                    let k = gather(qkv, n, d, b, t0, w, 1, h, dh);
                    let v = gather(qkv, n, d, b, t0, w, 2, h, dh);
                    let mut d_o = Vec::with_capacity(w * dh);
                    for t in t0..t0 + w {
                        let base = (b * n + t) * d + h * dh;
                        d_o.extend_from_slice(&d_att.data()[base..base + dh]);
                    }
                    let d_p = mm_nt(&d_o, &v, w, dh, w);
                    let d_v = mm_tn(p, &d_o, w, w, dh);
                    for ((pr, dpr), dsr) in p
                        .chunks_exact(w)
                        .zip(d_p.chunks_exact(w))
                        .zip(d_s.chunks_exact_mut(w))
                    {
                        softmax_vjp_row(pr, dpr, dsr);
                        for s in dsr.iter_mut() {
                            *s = *s * scale;
                        }
                    }
                    let d_q = mm(&d_s, &k, w, w, dh);
                    let d_k = mm_tn(&d_s, &q, w, w, dh);
                    let out = d_qkv.data_mut();
                    for (sec, src) in [(0, &d_q), (1, &d_k), (2, &d_v)] {
                        for (i, row) in src.chunks_exact(dh).enumerate() {
                            let base = (b * n + t0 + i) * 3 * d + sec * d + h * dh;
                            out[base..base + dh].copy_from_slice(row);
                        }
                    }
                }
            }
        }

        let (d_ln, d_w_qkv) = linear_vjp(&cache.ln_out, &self.w_qkv, &d_qkv)?;
        let (d_x, d_gamma, d_beta) = layer_norm_vjp(&cache.ln, &self.ln_gamma, &d_ln)?;
        Ok((
            d_x,
            AttentionGrads {
                w_qkv: d_w_qkv,
                w_out: d_w_out,
                ln_gamma: d_gamma,
                ln_beta: d_beta,
            },
        ))
    }
}

impl<T> ParamSet<T> for AttentionParams<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_qkv", &self.w_qkv),
            ("w_out", &self.w_out),
            ("ln_gamma", &self.ln_gamma),
            ("ln_beta", &self.ln_beta),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w_qkv", &mut self.w_qkv),
            ("w_out", &mut self.w_out),
            ("ln_gamma", &mut self.ln_gamma),
            ("ln_beta", &mut self.ln_beta),
        ]
    }
}

impl<T> ParamSet<T> for AttentionGrads<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_qkv", &self.w_qkv),
            ("w_out", &self.w_out),
            ("ln_gamma", &self.ln_gamma),
            ("ln_beta", &self.ln_beta),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("w_qkv", &mut self.w_qkv),
            ("w_out", &mut self.w_out),
            ("ln_gamma", &mut self.ln_gamma),
            ("ln_beta", &mut self.ln_beta),
        ]
    }
}

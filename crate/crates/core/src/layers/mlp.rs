use super::{check_token_input, Footprint, ParamSet, Sublayer};
use crate::error::{Error, Result};
use crate::tensor::{
    gelu, gelu_vjp, layer_norm, layer_norm_vjp, linear, linear_vjp, LayerNormCache, Rng, Scalar,
    Tensor, LN_EPS,
};

/// Pre-norm two-layer MLP: `y = GELU(LN(x) · w1 + b1) · w2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    ln: LayerNormCache<T>,
    ln_out: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

impl<T: Scalar> Footprint for MlpCache<T> {
    fn bytes(&self) -> u64 {
        self.ln.bytes() + self.ln_out.bytes() + self.pre.bytes() + self.act.bytes()
    }
}

impl<T: Scalar> MlpParams<T> {
    pub fn init(d: usize, mlp_ratio: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        let h = d * mlp_ratio;
        let p = Self {
            w1: Tensor::from_fn(&[d, h], |_| T::lit(rng.trunc_normal(std))),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::from_fn(&[h, d], |_| T::lit(rng.trunc_normal(std))),
            b2: Tensor::zeros(&[d]),
            ln_gamma: Tensor::full(&[d], T::one()),
            ln_beta: Tensor::zeros(&[d]),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(d: usize, mlp_ratio: usize) -> Result<Self> {
        let h = d * mlp_ratio;
        let p = Self {
            w1: Tensor::zeros(&[d, h]),
            b1: Tensor::zeros(&[h]),
            w2: Tensor::zeros(&[h, d]),
            b2: Tensor::zeros(&[d]),
            ln_gamma: Tensor::zeros(&[d]),
            ln_beta: Tensor::zeros(&[d]),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.dims()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h) = (self.width(), self.hidden());
        if h < d {
            return Err(Error::Shape(format!("mlp hidden width {h} below model width {d}")));
        }
        self.b1.expect_shape(&[h], "b1")?;
        self.w2.expect_shape(&[h, d], "w2")?;
        self.b2.expect_shape(&[d], "b2")?;
        self.ln_gamma.expect_shape(&[d], "mlp ln_gamma")?;
        self.ln_beta.expect_shape(&[d], "mlp ln_beta")?;
        Ok(())
    }

    pub fn zero_grads(&self) -> MlpGrads<T> {
        MlpGrads {
            w1: Tensor::zeros(self.w1.dims()),
            b1: Tensor::zeros(self.b1.dims()),
            w2: Tensor::zeros(self.w2.dims()),
            b2: Tensor::zeros(self.b2.dims()),
            ln_gamma: Tensor::zeros(self.ln_gamma.dims()),
            ln_beta: Tensor::zeros(self.ln_beta.dims()),
        }
    }
}

fn add_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) {
    let n = bias.numel();
    for row in x.data_mut().chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
}

/// Column sums over rows, accumulated top to bottom.
fn bias_grad<T: Scalar>(d_y: &Tensor<T>) -> Tensor<T> {
    let n = d_y.last_dim();
    let mut g = Tensor::zeros(&[n]);
    for row in d_y.data().chunks_exact(n) {
        for (acc, &v) in g.data_mut().iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    g
}

impl<T: Scalar> Sublayer<T> for MlpParams<T> {
    type Cache = MlpCache<T>;
    type Grads = MlpGrads<T>;

    fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        check_token_input(x, self.width(), "mlp input")?;
        let (ln_out, ln) = layer_norm(x, &self.ln_gamma, &self.ln_beta, T::lit(LN_EPS))?;
        let mut pre = linear(&ln_out, &self.w1)?;
        add_bias(&mut pre, &self.b1);
        let act = gelu(&pre);
        let mut y = linear(&act, &self.w2)?;
        add_bias(&mut y, &self.b2);
        Ok((y, MlpCache { ln, ln_out, pre, act }))
    }

    fn vjp(&self, cache: &MlpCache<T>, d_y: &Tensor<T>) -> Result<(Tensor<T>, MlpGrads<T>)> {
        d_y.expect_shape(cache.ln_out.dims(), "mlp d_y")?;
        if cache.pre.last_dim() != self.hidden() {
            return Err(Error::Contract("mlp cache does not match these params".into()));
        }
        let d_b2 = bias_grad(d_y);
        let (d_act, d_w2) = linear_vjp(&cache.act, &self.w2, d_y)?;
        let d_pre = gelu_vjp(&cache.pre, &d_act)?;
        let d_b1 = bias_grad(&d_pre);
        let (d_ln, d_w1) = linear_vjp(&cache.ln_out, &self.w1, &d_pre)?;
        let (d_x, d_gamma, d_beta) = layer_norm_vjp(&cache.ln, &self.ln_gamma, &d_ln)?;
        Ok((
            d_x,
            MlpGrads {
                w1: d_w1,
                b1: d_b1,
                w2: d_w2,
                b2: d_b2,
                ln_gamma: d_gamma,
                ln_beta: d_beta,
            },
        ))
    }
}

macro_rules! mlp_tensors {
    ($s:ident, $($r:tt)*) => {
        vec![
            ("w1", $($r)* $s.w1),
            ("b1", $($r)* $s.b1),
            ("w2", $($r)* $s.w2),
            ("b2", $($r)* $s.b2),
            ("ln_gamma", $($r)* $s.ln_gamma),
            ("ln_beta", $($r)* $s.ln_beta),
        ]
    };
}

impl<T> ParamSet<T> for MlpParams<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        mlp_tensors!(self, &)
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        mlp_tensors!(self, &mut)
    }
}

impl<T> ParamSet<T> for MlpGrads<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        mlp_tensors!(self, &)
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        mlp_tensors!(self, &mut)
    }
}

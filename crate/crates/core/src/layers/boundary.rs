//! Stage-boundary layers for hierarchical models: fusion of the coupled
//! pair into one stream, then patch merging to fewer, wider tokens.

use super::{check_token_input, Footprint, ParamSet};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{linear, linear_vjp, Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// `(i1 + i2) / 2`
    Average,
    /// `concat(i1, i2) · fusion_w`
    Mlp,
}

impl std::str::FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "average" | "avg" => Ok(FusionKind::Average),
            "mlp" => Ok(FusionKind::Mlp),
            other => Err(format!("unknown fusion kind `{other}` (expected average or mlp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryParams<T> {
    /// `[(factor·d) × d_next]`
    pub merge_w: Tensor<T>,
    /// Adjacent tokens merged into one: 2 for sequences, 4 for 2-D grids.
    pub factor: usize,
    pub fusion_kind: FusionKind,
    /// `[2d × d]`, present iff `fusion_kind == Mlp`.
    pub fusion_w: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGrads<T> {
    pub merge_w: Tensor<T>,
    pub fusion_w: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct FuseCache<T> {
    /// `concat(i1, i2)` for the MLP kind; nothing for averaging.
    concat: Option<Tensor<T>>,
    dims: Vec<usize>,
}

impl<T: Scalar> Footprint for FuseCache<T> {
    fn bytes(&self) -> u64 {
        self.concat.as_ref().map_or(0, Tensor::bytes)
    }
}

#[derive(Debug, Clone)]
pub struct MergeCache<T> {
    grouped: Tensor<T>,
    in_dims: Vec<usize>,
}

impl<T: Scalar> Footprint for MergeCache<T> {
    fn bytes(&self) -> u64 {
        self.grouped.bytes()
    }
}

impl<T: Scalar> BoundaryParams<T> {
    pub fn init(d: usize, d_next: usize, factor: usize, fusion_kind: FusionKind, std: f64, rng: &mut Rng) -> Result<Self> {
        let p = Self {
            merge_w: Tensor::from_fn(&[factor * d, d_next], |_| T::lit(rng.trunc_normal(std))),
            factor,
            fusion_kind,
            fusion_w: match fusion_kind {
                FusionKind::Average => None,
                FusionKind::Mlp => Some(Tensor::from_fn(&[2 * d, d], |_| T::lit(rng.trunc_normal(std)))),
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn width_in(&self) -> usize {
        self.merge_w.dims()[0] / self.factor.max(1)
    }

    pub fn width_out(&self) -> usize {
        self.merge_w.dims()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.factor, 2 | 4) {
            return Err(Error::Config(format!("merge factor must be 2 or 4, got {}", self.factor)));
        }
        if self.merge_w.rank() != 2 || !self.merge_w.dims()[0].is_multiple_of(self.factor) {
            return Err(shape_err(format!(
                "merge_w {:?} is not [(factor·d) × d_next]",
                self.merge_w.dims()
            )));
        }
        let d = self.width_in();
        match (self.fusion_kind, &self.fusion_w) {
            (FusionKind::Average, None) => Ok(()),
            (FusionKind::Average, Some(_)) => {
                Err(Error::Config("average fusion takes no fusion_w".into()))
            }
            (FusionKind::Mlp, None) => Err(Error::Config("mlp fusion requires fusion_w".into())),
            (FusionKind::Mlp, Some(w)) => w.expect_shape(&[2 * d, d], "fusion_w"),
        }
    }

    pub fn zero_grads(&self) -> BoundaryGrads<T> {
        BoundaryGrads {
            merge_w: Tensor::zeros(self.merge_w.dims()),
            fusion_w: self.fusion_w.as_ref().map(|w| Tensor::zeros(w.dims())),
        }
    }
}

fn concat_last<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let d = a.last_dim();
    let mut dims = a.dims().to_vec();
    *dims.last_mut().unwrap() = 2 * d;
    let mut data = Vec::with_capacity(2 * a.numel());
    for (ra, rb) in a.data().chunks_exact(d).zip(b.data().chunks_exact(d)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Tensor::new(&dims, data).expect("concat dims consistent")
}

fn split_last<T: Scalar>(x: &Tensor<T>, dims: &[usize]) -> (Tensor<T>, Tensor<T>) {
    let d = *dims.last().unwrap();
    let mut a = Vec::with_capacity(x.numel() / 2);
    let mut b = Vec::with_capacity(x.numel() / 2);
    for row in x.data().chunks_exact(2 * d) {
        a.extend_from_slice(&row[..d]);
        b.extend_from_slice(&row[d..]);
    }
    (
        Tensor::new(dims, a).expect("split dims consistent"),
        Tensor::new(dims, b).expect("split dims consistent"),
    )
}

/// Fuses the coupled pair into a single stream.
pub fn fuse<T: Scalar>(i1: &Tensor<T>, i2: &Tensor<T>, p: &BoundaryParams<T>) -> Result<(Tensor<T>, FuseCache<T>)> {
    if !i1.same_shape(i2) {
        return Err(shape_err(format!("fuse: {:?} vs {:?}", i1.dims(), i2.dims())));
    }
    p.validate()?;
    match p.fusion_kind {
        FusionKind::Average => {
            let half = T::lit(0.5);
            let y = i1.add(i2)?.scale(half);
            Ok((y, FuseCache { concat: None, dims: i1.dims().to_vec() }))
        }
        FusionKind::Mlp => {
            let w = p.fusion_w.as_ref().expect("validated");
            if i1.last_dim() * 2 != w.dims()[0] {
                return Err(shape_err(format!(
                    "fuse: width {} vs fusion_w {:?}",
                    i1.last_dim(),
                    w.dims()
                )));
            }
            let concat = concat_last(i1, i2);
            let y = linear(&concat, w)?;
            Ok((y, FuseCache { concat: Some(concat), dims: i1.dims().to_vec() }))
        }
    }
}

/// Returns `(d_i1, d_i2, d_fusion_w)`.
pub fn fuse_vjp<T: Scalar>(
    cache: &FuseCache<T>,
    p: &BoundaryParams<T>,
    d_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    d_y.expect_shape(&cache.dims, "fuse d_y")?;
    match (p.fusion_kind, &cache.concat) {
        (FusionKind::Average, None) => {
            let g = d_y.scale(T::lit(0.5));
            Ok((g.clone(), g, None))
        }
        (FusionKind::Mlp, Some(concat)) => {
            let w = p.fusion_w.as_ref().ok_or_else(|| Error::Config("mlp fusion requires fusion_w".into()))?;
            let (d_concat, d_w) = linear_vjp(concat, w, d_y)?;
            let (a, b) = split_last(&d_concat, &cache.dims);
            Ok((a, b, Some(d_w)))
        }
        _ => Err(Error::Contract("fuse cache kind does not match params".into())),
    }
}

/// Concatenates each run of `factor` adjacent tokens and projects by `merge_w`.
pub fn patch_merge<T: Scalar>(x: &Tensor<T>, p: &BoundaryParams<T>) -> Result<(Tensor<T>, MergeCache<T>)> {
    let d = p.width_in();
    let (b, n) = check_token_input(x, d, "patch_merge input")?;
    if n % p.factor != 0 {
        return Err(shape_err(format!(
            "patch_merge: {n} tokens not divisible by factor {}",
            p.factor
        )));
    }
    let grouped = x.clone().reshape(&[b, n / p.factor, p.factor * d])?;
    let y = linear(&grouped, &p.merge_w)?;
    Ok((y, MergeCache { grouped, in_dims: x.dims().to_vec() }))
}

/// Returns `(d_x, d_merge_w)`.
pub fn patch_merge_vjp<T: Scalar>(
    cache: &MergeCache<T>,
    p: &BoundaryParams<T>,
    d_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d_grouped, d_w) = linear_vjp(&cache.grouped, &p.merge_w, d_y)?;
    Ok((d_grouped.reshape(&cache.in_dims)?, d_w))
}

impl<T> ParamSet<T> for BoundaryParams<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("merge_w", &self.merge_w)];
        if let Some(w) = &self.fusion_w {
            v.push(("fusion_w", w));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![("merge_w", &mut self.merge_w)];
        if let Some(w) = &mut self.fusion_w {
            v.push(("fusion_w", w));
        }
        v
    }
}

impl<T> ParamSet<T> for BoundaryGrads<T> {
    fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("merge_w", &self.merge_w)];
        if let Some(w) = &self.fusion_w {
            v.push(("fusion_w", w));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut v = vec![("merge_w", &mut self.merge_w)];
        if let Some(w) = &mut self.fusion_w {
            v.push(("fusion_w", w));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_gradient, FD_STEP};

    fn avg_params(d: usize, d_next: usize, w: Tensor<f64>) -> BoundaryParams<f64> {
        assert_eq!(w.dims(), &[2 * d, d_next]);
        BoundaryParams { merge_w: w, factor: 2, fusion_kind: FusionKind::Average, fusion_w: None }
    }

    fn rand(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed, 0);
        Tensor::from_fn(dims, |_| rng.normal())
    }

    #[test]
    fn selector_projection_keeps_even_tokens() {
        let d = 3;
        // merge_w = [I; 0] picks the first token of each pair
        let w = Tensor::from_fn(&[2 * d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        let p = avg_params(d, d, w);
        let x = rand(&[2, 4, d], 1);
        let (y, _) = patch_merge(&x, &p).unwrap();
        assert_eq!(y.dims(), &[2, 2, d]);
        for b in 0..2 {
            for t in 0..2 {
                for j in 0..d {
                    assert_eq!(y.at(&[b, t, j]), x.at(&[b, 2 * t, j]));
                }
            }
        }
    }

    #[test]
    fn merge_matches_concat_then_matmul() {
        let (d, d_next) = (2, 5);
        let p = avg_params(d, d_next, rand(&[2 * d, d_next], 2));
        let x = rand(&[1, 4, d], 3);
        let (y, _) = patch_merge(&x, &p).unwrap();
        assert_eq!(y.dims(), &[1, 2, d_next]);
        for t in 0..2 {
            let cat: Vec<f64> = (0..2 * d).map(|k| x.at(&[0, 2 * t + k / d, k % d])).collect();
            for j in 0..d_next {
                let want: f64 = (0..2 * d).map(|k| cat[k] * p.merge_w.at(&[k, j])).sum();
                assert!((y.at(&[0, t, j]) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn merge_rejects_indivisible_tokens() {
        let p = avg_params(2, 2, rand(&[4, 2], 4));
        assert!(matches!(patch_merge(&rand(&[1, 3, 2], 5), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn average_fusion_cases() {
        let p = avg_params(2, 2, rand(&[4, 2], 6));
        let a = rand(&[1, 3, 2], 7);
        assert!(fuse(&a, &a, &p).unwrap().0.bit_eq(&a));
        let neg = a.scale(-1.0);
        assert!(fuse(&a, &neg, &p).unwrap().0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stacked_identity_fusion_sums() {
        let d = 3;
        let mut p = avg_params(d, d, rand(&[2 * d, d], 8));
        p.fusion_kind = FusionKind::Mlp;
        p.fusion_w = Some(Tensor::from_fn(&[2 * d, d], |i| if (i / d) % d == i % d { 1.0 } else { 0.0 }));
        let a = rand(&[2, 2, d], 9);
        let b = rand(&[2, 2, d], 10);
        let (y, _) = fuse(&a, &b, &p).unwrap();
        assert!(y.rel_err(&a.add(&b).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn fusion_errors() {
        let mut p = avg_params(2, 2, rand(&[4, 2], 11));
        let a = rand(&[1, 2, 2], 12);
        assert!(matches!(fuse(&a, &rand(&[1, 4, 2], 13), &p), Err(Error::Shape(_))));
        p.fusion_kind = FusionKind::Mlp;
        assert!(matches!(fuse(&a, &a, &p), Err(Error::Config(_))));
    }

    #[test]
    fn boundary_vjps_match_finite_differences() {
        let d = 2;
        let mut rng = Rng::new(14, 0);
        let p = BoundaryParams::<f64>::init(d, 3, 2, FusionKind::Mlp, 0.7, &mut rng).unwrap();
        let i1 = rand(&[1, 4, d], 15);
        let i2 = rand(&[1, 4, d], 16);
        let (f, fc) = fuse(&i1, &i2, &p).unwrap();
        let (y, mc) = patch_merge(&f, &p).unwrap();
        let d_y = rand(y.dims(), 17);
        let (d_f, d_merge) = patch_merge_vjp(&mc, &p, &d_y).unwrap();
        let (d1, d2, d_fw) = fuse_vjp(&fc, &p, &d_f).unwrap();

        let mut inputs = vec![i1, i2, p.merge_w.clone(), p.fusion_w.clone().unwrap()];
        let numeric = fd_gradient(&mut inputs, FD_STEP, |ts| {
            let q = BoundaryParams { merge_w: ts[2].clone(), fusion_w: Some(ts[3].clone()), ..p.clone() };
            let (f, _) = fuse(&ts[0], &ts[1], &q)?;
            patch_merge(&f, &q)?.0.dot(&d_y)
        })
        .unwrap();
        for (a, n) in [d1, d2, d_merge, d_fw.unwrap()].iter().zip(&numeric) {
            assert!(a.rel_err(n).unwrap() <= 1e-6);
        }
    }
}

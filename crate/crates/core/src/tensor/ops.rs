use std::sync::Arc;

use super::{shape_err, split_axis, strides, BackwardFn, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out` (row-major), the flat index of the element of
/// `inp` it reads under broadcasting. `inp` must broadcast to `out`.
pub(crate) fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n = out.len();
    let pad = n - inp.len();
    let in_strides = strides(inp);
    let eff: Vec<usize> = (0..n)
        .map(|i| if i < pad || inp[i - pad] == 1 { 0 } else { in_strides[i - pad] })
        .collect();
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    if total == 0 {
        return offsets;
    }
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn reduce_into<T: Scalar>(contrib: &[T], offsets: Option<&[usize]>, len: usize) -> Vec<T> {
    match offsets {
        None => contrib.to_vec(),
        Some(map) => {
            let mut g = vec![T::zero(); len];
            for (&o, &c) in map.iter().zip(contrib) {
                g[o] += c;
            }
            g
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, other: &Tensor<T>, kind: Binary) -> Result<Tensor<T>> {
        let op = kind.name();
        let Some(out_shape) = broadcast_shape(self.shape(), other.shape()) else {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape()));
        };
        let map_a = (self.shape() != out_shape.as_slice())
            .then(|| Arc::new(broadcast_offsets(&out_shape, self.shape())));
        let map_b = (other.shape() != out_shape.as_slice())
            .then(|| Arc::new(broadcast_offsets(&out_shape, other.shape())));
        let (a, b) = (self.data(), other.data());
        let n: usize = out_shape.iter().product();
        let data: Vec<T> = match (&map_a, &map_b) {
            (None, None) => a.iter().zip(b).map(|(&x, &y)| kind.apply(x, y)).collect(),
            (Some(ma), None) => (0..n).map(|i| kind.apply(a[ma[i]], b[i])).collect(),
            (None, Some(mb)) => (0..n).map(|i| kind.apply(a[i], b[mb[i]])).collect(),
            (Some(ma), Some(mb)) => (0..n).map(|i| kind.apply(a[ma[i]], b[mb[i]])).collect(),
        };
        let backward: BackwardFn<T> = Box::new(move |args| {
            let (x, y) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad;
            let xa = |i: usize| x.data()[map_a.as_ref().map_or(i, |m| m[i])];
            let yb = |i: usize| y.data()[map_b.as_ref().map_or(i, |m| m[i])];
            let ga = x.requires_grad().then(|| {
                let contrib: Vec<T> = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => (0..g.len()).map(|i| g[i] * yb(i)).collect(),
                    Binary::Div => (0..g.len()).map(|i| g[i] / yb(i)).collect(),
                };
                reduce_into(&contrib, map_a.as_deref().map(|v| v.as_slice()), x.numel())
            });
            let gb = y.requires_grad().then(|| {
                let contrib: Vec<T> = match kind {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|&v| -v).collect(),
                    Binary::Mul => (0..g.len()).map(|i| g[i] * xa(i)).collect(),
                    Binary::Div => (0..g.len())
                        .map(|i| {
                            let yv = yb(i);
                            -g[i] * xa(i) / (yv * yv)
                        })
                        .collect(),
                };
                reduce_into(&contrib, map_b.as_deref().map(|v| v.as_slice()), y.numel())
            });
            vec![ga, gb]
        });
        Tensor::from_op(op, out_shape, data, vec![self.clone(), other.clone()], backward)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise map with derivative `df(x, y)`.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let backward: BackwardFn<T> = Box::new(move |args| {
            let x = args.inputs[0].data();
            let g = args
                .grad
                .iter()
                .zip(x)
                .zip(args.out)
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        });
        Tensor::from_op(op, self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor<T>> {
        let s = T::lit(s);
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor<T>> {
        let s = T::lit(s);
        self.unary("add_scalar", move |x| x + s, |_, _| T::one())
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn abs(&self) -> Result<Tensor<T>> {
        self.unary("abs", |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary("relu", |x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary("sigmoid", |x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    /// Gaussian error linear unit, exact erf form.
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    pub fn sum(&self) -> Result<Tensor<T>> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        let backward: BackwardFn<T> = Box::new(move |args| vec![Some(vec![args.grad[0]; n])]);
        Tensor::from_op("sum", vec![], vec![s], vec![self.clone()], backward)
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Mean over `axes`, keeping them as extent-1 dimensions.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let mut out_shape = self.shape().to_vec();
        let mut count = 1usize;
        for &a in axes {
            if a >= out_shape.len() {
                return Err(TensorError::Argument { op: "mean_axes", detail: format!("axis {a}") });
            }
            count *= out_shape[a];
            out_shape[a] = 1;
        }
        let map = Arc::new(broadcast_offsets(self.shape(), &out_shape));
        let inv = T::one() / T::lit(count as f64);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        for (&o, &v) in map.iter().zip(self.data()) {
            data[o] += v;
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let backward: BackwardFn<T> = Box::new(move |args| {
            let g = map.iter().map(|&o| args.grad[o] * inv).collect();
            vec![Some(g)]
        });
        Tensor::from_op("mean_axes", out_shape, data, vec![self.clone()], backward)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape(), shape));
        }
        let backward: BackwardFn<T> = Box::new(|args| vec![Some(args.grad.to_vec())]);
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], backward)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", format!("{sa:?} @ {sb:?}: need rank >= 2"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return shape_err("matmul", format!("{sa:?} @ {sb:?}: inner extents differ"));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let Some(batch) = broadcast_shape(ba, bb) else {
            return shape_err("matmul", format!("{sa:?} @ {sb:?}: batch dims"));
        };
        let off_a = Arc::new(broadcast_offsets(&batch, ba));
        let off_b = Arc::new(broadcast_offsets(&batch, bb));
        let nb: usize = batch.iter().product();
        let mut data = vec![T::zero(); nb * m * p];
        let (a, b) = (self.data(), other.data());
        for i in 0..nb {
            let (oa, ob) = (off_a[i] * m * k, off_b[i] * k * p);
            T::gemm(
                m,
                k,
                p,
                T::one(),
                &a[oa..oa + m * k],
                k as isize,
                1,
                &b[ob..ob + k * p],
                p as isize,
                1,
                T::zero(),
                &mut data[i * m * p..(i + 1) * m * p],
                p as isize,
                1,
            );
        }
        let mut out_shape = batch;
        out_shape.extend([m, p]);
        let backward: BackwardFn<T> = Box::new(move |args| {
            let (x, y) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad;
            let ga = x.requires_grad().then(|| {
                let mut ga = vec![T::zero(); x.numel()];
                for i in 0..nb {
                    let (oa, ob) = (off_a[i] * m * k, off_b[i] * k * p);
                    // dA = dC @ B^T
                    T::gemm(
                        m,
                        p,
                        k,
                        T::one(),
                        &g[i * m * p..(i + 1) * m * p],
                        p as isize,
                        1,
                        &y.data()[ob..ob + k * p],
                        1,
                        p as isize,
                        T::one(),
                        &mut ga[oa..oa + m * k],
                        k as isize,
                        1,
                    );
                }
                ga
            });
            let gb = y.requires_grad().then(|| {
                let mut gb = vec![T::zero(); y.numel()];
                for i in 0..nb {
                    let (oa, ob) = (off_a[i] * m * k, off_b[i] * k * p);
                    // dB = A^T @ dC
                    T::gemm(
                        k,
                        m,
                        p,
                        T::one(),
                        &x.data()[oa..oa + m * k],
                        1,
                        k as isize,
                        &g[i * m * p..(i + 1) * m * p],
                        p as isize,
                        1,
                        T::one(),
                        &mut gb[ob..ob + k * p],
                        p as isize,
                        1,
                    );
                }
                gb
            });
            vec![ga, gb]
        });
        Tensor::from_op("matmul", out_shape, data, vec![self.clone(), other.clone()], backward)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(TensorError::Argument { op: "softmax", detail: format!("axis {axis}") });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let mx = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        let backward: BackwardFn<T> = Box::new(move |args| {
            let (y, g) = (args.out, args.grad);
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot = (0..len).fold(T::zero(), |acc, j| acc + g[base + j * inner] * y[base + j * inner]);
                    for j in 0..len {
                        let at = base + j * inner;
                        gx[at] = y[at] * (g[at] - dot);
                    }
                }
            }
            vec![Some(gx)]
        });
        Tensor::from_op("softmax", self.shape().to_vec(), data, vec![self.clone()], backward)
    }

    /// Normalizes to zero mean and unit variance along `axis`, then applies the
    /// optional per-position scale `gamma` and shift `beta` (both of extent
    /// `shape[axis]`).
    pub fn layer_norm(
        &self,
        axis: usize,
        gamma: Option<&Tensor<T>>,
        beta: Option<&Tensor<T>>,
        eps: f64,
    ) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(TensorError::Argument { op: "layer_norm", detail: format!("axis {axis}") });
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        for p in gamma.iter().chain(beta.iter()) {
            if p.numel() != len {
                return shape_err("layer_norm", format!("affine of {} values for axis extent {len}", p.numel()));
            }
        }
        let eps = T::lit(eps);
        let x = self.data();
        let n = T::lit(len as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mean = (0..len).fold(T::zero(), |a, j| a + x[base + j * inner]) / n;
                let var = (0..len).fold(T::zero(), |a, j| {
                    let d = x[base + j * inner] - mean;
                    a + d * d
                }) / n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..len {
                    xhat[base + j * inner] = (x[base + j * inner] - mean) * r;
                }
            }
        }
        let g_vals = gamma.map(|g| g.to_vec());
        let b_vals = beta.map(|b| b.to_vec());
        let mut data = xhat.clone();
        if g_vals.is_some() || b_vals.is_some() {
            for o in 0..outer {
                for j in 0..len {
                    let gj = g_vals.as_ref().map_or(T::one(), |g| g[j]);
                    let bj = b_vals.as_ref().map_or(T::zero(), |b| b[j]);
                    let row = o * len * inner + j * inner;
                    for v in &mut data[row..row + inner] {
                        *v = *v * gj + bj;
                    }
                }
            }
        }
        let mut inputs = vec![self.clone()];
        inputs.extend(gamma.cloned());
        inputs.extend(beta.cloned());
        let has_gamma = gamma.is_some();
        let has_beta = beta.is_some();
        let backward: BackwardFn<T> = Box::new(move |args| {
            let g = args.grad;
            let gamma_vals = has_gamma.then(|| args.inputs[1].data());
            let mut gx = vec![T::zero(); g.len()];
            let mut ggamma = vec![T::zero(); len];
            let mut gbeta = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let r = rstd[o * inner + i];
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..len {
                        let at = base + j * inner;
                        let d = g[at] * gamma_vals.map_or(T::one(), |gv| gv[j]);
                        sum_d += d;
                        sum_dx += d * xhat[at];
                        ggamma[j] += g[at] * xhat[at];
                        gbeta[j] += g[at];
                    }
                    let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
                    for j in 0..len {
                        let at = base + j * inner;
                        let d = g[at] * gamma_vals.map_or(T::one(), |gv| gv[j]);
                        gx[at] = r * (d - mean_d - xhat[at] * mean_dx);
                    }
                }
            }
            let mut out = vec![Some(gx)];
            if has_gamma {
                out.push(Some(ggamma));
            }
            if has_beta {
                out.push(Some(gbeta));
            }
            out
        });
        Tensor::from_op("layer_norm", self.shape().to_vec(), data, inputs, backward)
    }

    /// `x / max(||x||_2, eps)` along the last axis.
    pub fn l2_normalize_last(&self, eps: f64) -> Result<Tensor<T>> {
        let len = *self.shape().last().ok_or(TensorError::Argument {
            op: "l2_normalize",
            detail: "rank-0 input".into(),
        })?;
        let eps = T::lit(eps);
        let rows = self.numel() / len.max(1);
        let x = self.data();
        let norms: Vec<T> = (0..rows)
            .map(|r| x[r * len..(r + 1) * len].iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .collect();
        let mut data = vec![T::zero(); x.len()];
        for r in 0..rows {
            let d = norms[r].max(eps);
            for j in 0..len {
                data[r * len + j] = x[r * len + j] / d;
            }
        }
        let backward: BackwardFn<T> = Box::new(move |args| {
            let (y, g) = (args.out, args.grad);
            let mut gx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let row = r * len..(r + 1) * len;
                if norms[r] > eps {
                    let dot = row.clone().fold(T::zero(), |a, i| a + g[i] * y[i]);
                    for i in row {
                        gx[i] = (g[i] - y[i] * dot) / norms[r];
                    }
                } else {
                    for i in row {
                        gx[i] = g[i] / eps;
                    }
                }
            }
            vec![Some(gx)]
        });
        Tensor::from_op("l2_normalize", self.shape().to_vec(), data, vec![self.clone()], backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_offsets(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn matmul_hand_cases() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let v = t(&[2, 1], &[3.0, 7.0]);
        assert_eq!(eye.matmul(&v).unwrap().to_vec(), vec![3.0, 7.0]);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(a.matmul(&ones).unwrap().to_vec(), vec![3.0, 7.0]);
        assert!(a.matmul(&t(&[3, 1], &[1.0; 3])).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::randn(&[4, 5], &mut rng);
        let b = Tensor::<f32>::randn(&[5, 3], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0f32;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] * b.data()[k * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let b = Tensor::<f64>::randn(&[2, 4, 5], &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        let b1 = Tensor::from_vec(&[4, 5], b.data()[20..].to_vec()).unwrap();
        let c1 = a.matmul(&b1).unwrap();
        assert_eq!(&c.data()[15..], c1.data());
    }

    #[test]
    fn softmax_cases() {
        let s = t(&[2], &[1.0, 1.0]).softmax(0).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
        let s = t(&[2], &[0.0, 3f64.ln()]).softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12 && (s.data()[1] - 0.75).abs() < 1e-12);
        let s = t(&[2], &[1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[2, 4, 3], &mut rng);
        let y = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..4).map(|j| y.data()[o * 12 + j * 3 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let c = t(&[4], &[2.5; 4]);
        let y = c.layer_norm(0, Some(&t(&[4], &[1.0; 4])), Some(&t(&[4], &[0.0; 4])), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[16], &mut rng);
        let beta = t(&[16], &(0..16).map(|i| i as f64).collect::<Vec<_>>());
        let y = x.layer_norm(0, Some(&t(&[16], &[0.0; 16])), Some(&beta), 1e-6).unwrap();
        assert_eq!(y.to_vec(), beta.to_vec());

        let y = x.layer_norm(0, None, None, 1e-6).unwrap();
        let mean = y.data().iter().sum::<f64>() / 16.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gelu_values() {
        let y = t(&[2], &[0.0, 1.0]).gelu().unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746).abs() < 1e-6);
    }

    #[test]
    fn mean_axes_keepdim() {
        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let m = x.mean_axes(&[2, 3]).unwrap();
        assert_eq!(m.shape(), &[1, 2, 1, 1]);
        assert_eq!(m.to_vec(), vec![2.5, 10.0]);
    }

    #[test]
    fn broadcast_mul_grad_reduces() {
        let a = Tensor::<f64>::param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::<f64>::param(&[3], vec![1.0, 10.0, 100.0]).unwrap();
        a.mul(&b).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.grad().unwrap(), vec![1.0, 10.0, 100.0, 1.0, 10.0, 100.0]);
    }

    #[test]
    fn division_by_zero_is_reported() {
        let a = t(&[1], &[1.0]);
        let z = t(&[1], &[0.0]);
        assert_eq!(a.div(&z).unwrap_err(), TensorError::NonFinite { op: "div" });
    }
}

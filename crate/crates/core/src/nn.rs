//! Named parameter storage and the basic layers built on it.
//!
//! Layers hold [`ParamId`]s rather than tensors, so one layer description can
//! run against any [`ParamStore`] with matching names and shapes — the
//! trainable leaves during training, detached copies during inference, or
//! `f64` copies for gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Conv2dSpec, Result, Tensor, TensorError};

/// A tensor error tagged with the layer that raised it.
#[derive(Debug, Error)]
#[error("layer {layer}: {source}")]
pub struct LayerError {
    pub layer: String,
    #[source]
    pub source: TensorError,
}

/// Attaches a layer name to tensor errors.
pub trait LayerContext<V> {
    fn layer(self, name: &str) -> std::result::Result<V, LayerError>;
}

impl<V> LayerContext<V> for Result<V> {
    fn layer(self, name: &str) -> std::result::Result<V, LayerError> {
        self.map_err(|source| LayerError { layer: name.to_string(), source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalars in parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Same names, new tensors (shapes must match).
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != self.tensors.len() {
            return Err(TensorError::Argument {
                op: "ParamStore::with_tensors",
                detail: format!("{} tensors for {} parameters", tensors.len(), self.tensors.len()),
            });
        }
        for ((name, old), new) in self.iter().zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(TensorError::Shape {
                    op: "ParamStore::with_tensors",
                    detail: format!("{name}: {:?} vs {:?}", old.shape(), new.shape()),
                });
            }
        }
        Ok(ParamStore { names: self.names.clone(), tensors })
    }

    /// Replaces one parameter's values, keeping its shape and trainability.
    pub fn set(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let old = &self.tensors[id.0];
        let t = Tensor::from_vec(old.shape(), data)?.requires_grad_(old.requires_grad());
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Sets every parameter whose name satisfies `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut hit = 0;
        for i in 0..self.tensors.len() {
            if pred(&self.names[i]) {
                let n = self.tensors[i].numel();
                self.set(ParamId(i), vec![T::zero(); n]).expect("zeros are finite");
                hit += 1;
            }
        }
        hit
    }

    /// Trainable leaves with the current values.
    pub fn trainable(&self) -> Self {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.requires_grad_(true)).collect() }
    }

    /// Constant copies (no gradient tracking).
    pub fn frozen(&self) -> Self {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::detach).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    pub fn zero_grads(&self) {
        self.tensors.iter().for_each(Tensor::zero_grad);
    }
}

/// Registers parameters under hierarchical names, drawing initial values from
/// a seeded generator in registration order.
pub struct ParamBuilder<T: Scalar> {
    store: ParamStore<T>,
    scope: Vec<String>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore { names: Vec::new(), tensors: Vec::new() },
            scope: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Runs `f` with `name` appended to the current scope.
    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.scope.push(name.into());
        let r = f(self);
        self.scope.pop();
        r
    }

    pub fn path(&self, leaf: &str) -> String {
        let mut parts = self.scope.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn register(&mut self, leaf: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = self.path(leaf);
        assert!(self.store.find(&name).is_none(), "duplicate parameter {name}");
        let data = data.into_iter().map(T::lit).collect();
        self.store.names.push(name);
        self.store.tensors.push(Tensor::param(shape, data).expect("initial values are finite"));
        ParamId(self.store.tensors.len() - 1)
    }

    /// Uniform on `[-bound, bound]`.
    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| dist.sample(&mut self.rng)).collect()
        } else {
            vec![0.0; n]
        };
        self.register(leaf, shape, data)
    }

    /// Normal with standard deviation `std`, truncated to ±2·std.
    pub fn trunc_normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(&mut self.rng);
                if v.abs() <= 2.0 * std {
                    break v;
                }
            })
            .collect();
        self.register(leaf, shape, data)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let n = shape.iter().product();
        self.register(leaf, shape, vec![value; n])
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

/// 2-D convolution with `U(±1/√fan_in)` initialisation for weight and bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        groups: usize,
    ) -> Self {
        let fan_in = cin / groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        b.scoped(name, |b| Conv2d {
            weight: b.uniform("weight", &[cout, cin / groups, kernel, kernel], bound),
            bias: bias.then(|| b.uniform("bias", &[cout], bound)),
            spec: Conv2dSpec { stride: 1, pad: kernel / 2, groups },
        })
    }

    /// `k × k`, stride 1, "same" padding.
    pub fn same<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Self::new(b, name, cin, cout, k, bias, 1)
    }

    pub fn depthwise<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, ch: usize, k: usize, bias: bool) -> Self {
        Self::new(b, name, ch, ch, k, bias, ch)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.spec)
    }
}

/// Affine map over the last axis: `x · Wᵀ + b`, `W` of shape `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        b.scoped(name, |b| Linear {
            weight: b.uniform("weight", &[cout, cin], bound),
            bias: bias.then(|| b.uniform("bias", &[cout], bound)),
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&p.get(self.weight).transpose_last()?)?;
        match self.bias {
            Some(b) => y.add(p.get(b)),
            None => Ok(y),
        }
    }
}

/// Layer normalisation over one axis with learnable scale and optional shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub axis: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, dim: usize, axis: usize, bias: bool, eps: f64) -> Self {
        b.scoped(name, |b| LayerNorm {
            weight: b.constant("weight", &[dim], 1.0),
            bias: bias.then(|| b.constant("bias", &[dim], 0.0)),
            axis,
            eps,
        })
    }

    /// Normalises `[B, C, H, W]` over channels at each pixel.
    pub fn channels<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, dim: usize) -> Self {
        Self::new(b, name, dim, 1, true, 1e-5)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(self.axis, Some(p.get(self.weight)), self.bias.map(|b| p.get(b)), self.eps)
    }
}

/// Tiles a `[B, C]` tensor to `[B, C, 1, 1]` for broadcasting over pixels.
pub fn as_channel_map<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = (v.dim(0), v.dim(1));
    v.reshape(&[b, c, 1, 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_names_and_counts() {
        let mut b = ParamBuilder::<f32>::new(0);
        let conv = b.scoped("enc", |b| Conv2d::same(b, "conv", 3, 8, 1, true));
        let lin = Linear::new(&mut b, "fc", 4, 2, false);
        let ps = b.finish();
        assert_eq!(ps.names(), &["enc.conv.weight", "enc.conv.bias", "fc.weight"]);
        assert_eq!(ps.count(), 3 * 8 + 8 + 8);
        assert_eq!(ps.count_prefix("enc."), 32);
        assert_eq!(ps.get(conv.weight).shape(), &[8, 3, 1, 1]);
        assert!(lin.bias.is_none());
    }

    #[test]
    fn same_seed_same_values() {
        let build = |seed| {
            let mut b = ParamBuilder::<f64>::new(seed);
            Conv2d::same(&mut b, "c", 4, 4, 3, true);
            b.finish()
        };
        let (a, c) = (build(7), build(7));
        assert_eq!(a.tensors()[0].data(), c.tensors()[0].data());
        assert_ne!(a.tensors()[0].data(), build(8).tensors()[0].data());
        let bound = 1.0 / 36f64.sqrt();
        assert!(a.tensors()[0].data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn linear_matches_manual() {
        let mut b = ParamBuilder::<f64>::new(1);
        let lin = Linear::new(&mut b, "fc", 3, 2, true);
        let ps = b.finish();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = lin.forward(&ps, &x).unwrap();
        let (w, bias) = (ps.get(lin.weight).data(), ps.get(lin.bias.unwrap()).data());
        for o in 0..2 {
            let want = (0..3).map(|i| w[o * 3 + i] * x.data()[i]).sum::<f64>() + bias[o];
            assert!((y.data()[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn store_replacement_checks_shapes() {
        let mut b = ParamBuilder::<f64>::new(1);
        Linear::new(&mut b, "fc", 3, 2, true);
        let mut ps = b.finish();
        assert!(ps.with_tensors(vec![Tensor::zeros(&[2, 3])]).is_err());
        assert!(ps.with_tensors(vec![Tensor::zeros(&[3, 2]), Tensor::zeros(&[2])]).is_err());
        assert_eq!(ps.zero_where(|n| n.ends_with("bias")), 1);
        assert!(ps.tensors()[1].data().iter().all(|&v| v == 0.0));
        assert!(ps.tensors()[1].requires_grad());
    }

    #[test]
    fn layer_error_names_layer() {
        let bad: Result<()> = Err(TensorError::NonFinite { op: "gelu" });
        let e = bad.layer("decoder2.block1").unwrap_err();
        assert!(e.to_string().contains("decoder2.block1"));
    }
}

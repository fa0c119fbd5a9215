//! Channel ("transposed") attention transformer block: MDTA + GDFN with
//! pre-norm residuals.

use crate::nn::{Conv2d, LayerNorm, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Default GDFN expansion factor.
pub const FFN_EXPANSION: f64 = 2.66;

/// Multi-Dconv-head transposed attention: attention between channels.
#[derive(Debug, Clone)]
pub struct Mdta {
    pub heads: usize,
    pub dim: usize,
    pub qkv: Conv2d,
    pub qkv_dw: Conv2d,
    /// Per-head scale on the logits, `[heads, 1, 1]`.
    pub temperature: ParamId,
    pub project_out: Conv2d,
}

impl Mdta {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Divisibility { op: "mdta", detail: format!("{dim} channels over {heads} heads") });
        }
        Ok(b.scoped(name, |b| Mdta {
            heads,
            dim,
            qkv: Conv2d::same(b, "qkv", dim, 3 * dim, 1, false),
            qkv_dw: Conv2d::depthwise(b, "qkv_dwconv", 3 * dim, 3, false),
            temperature: b.constant("temperature", &[heads, 1, 1], 1.0),
            project_out: Conv2d::same(b, "project_out", dim, dim, 1, false),
        }))
    }

    /// Output and the `[B, heads, C/heads, C/heads]` attention matrix.
    pub fn forward_with_attention<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if c != self.dim {
            return Err(TensorError::Shape { op: "mdta", detail: format!("{c} channels, block built for {}", self.dim) });
        }
        let qkv = self.qkv_dw.forward(p, &self.qkv.forward(p, x)?)?;
        let heads_view = |t: &Tensor<T>| t.reshape(&[b, self.heads, c / self.heads, h * w]);
        let parts = qkv.chunk(3, 1)?;
        let q = heads_view(&parts[0])?.l2_normalize_last(1e-12)?;
        let k = heads_view(&parts[1])?.l2_normalize_last(1e-12)?;
        let v = heads_view(&parts[2])?;
        let logits = q.matmul(&k.transpose_last()?)?.mul(p.get(self.temperature))?;
        let attn = logits.softmax(3)?;
        let out = attn.matmul(&v)?.reshape(&[b, c, h, w])?;
        Ok((self.project_out.forward(p, &out)?, attn))
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(p, x)?.0)
    }
}

/// Gated-Dconv feed-forward network.
#[derive(Debug, Clone)]
pub struct Gdfn {
    pub hidden: usize,
    pub project_in: Conv2d,
    pub dwconv: Conv2d,
    pub project_out: Conv2d,
}

impl Gdfn {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, dim: usize, expansion: f64) -> Result<Self> {
        if !(expansion > 0.0) {
            return Err(TensorError::Argument { op: "gdfn", detail: format!("expansion {expansion}") });
        }
        let hidden = ((dim as f64 * expansion) as usize).max(1);
        Ok(b.scoped(name, |b| Gdfn {
            hidden,
            project_in: Conv2d::same(b, "project_in", dim, 2 * hidden, 1, false),
            dwconv: Conv2d::depthwise(b, "dwconv", 2 * hidden, 3, false),
            project_out: Conv2d::same(b, "project_out", hidden, dim, 1, false),
        }))
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.dwconv.forward(p, &self.project_in.forward(p, x)?)?;
        let halves = y.chunk(2, 1)?;
        let gated = halves[0].gelu()?.mul(&halves[1])?;
        self.project_out.forward(p, &gated)
    }
}

/// `x + mdta(LN(x))`, then `+ gdfn(LN(·))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Mdta,
    pub norm2: LayerNorm,
    pub ffn: Gdfn,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: &str,
        dim: usize,
        heads: usize,
        expansion: f64,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(TransformerBlock {
                norm1: LayerNorm::channels(b, "norm1", dim),
                attn: Mdta::new(b, "attn", dim, heads)?,
                norm2: LayerNorm::channels(b, "norm2", dim),
                ffn: Gdfn::new(b, "ffn", dim, expansion)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.forward(p, &self.norm1.forward(p, x)?)?)?;
        x.add(&self.ffn.forward(p, &self.norm2.forward(p, &x)?)?)
    }

    /// Names of the weights whose zeroing turns the block into the identity.
    pub fn terminal_weights(&self) -> [ParamId; 2] {
        [self.attn.project_out.weight, self.ffn.project_out.weight]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_channel_heads_attend_to_themselves() {
        let mut b = ParamBuilder::<f64>::new(0);
        let m = Mdta::new(&mut b, "m", 4, 4).unwrap();
        let ps = b.finish();
        let (_, attn) = m.forward_with_attention(&ps, &input(&[1, 4, 3, 3], 1)).unwrap();
        assert_eq!(attn.shape(), &[1, 4, 1, 1]);
        assert!(attn.data().iter().all(|&a| (a - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_temperature_gives_uniform_attention() {
        let mut b = ParamBuilder::<f64>::new(0);
        let m = Mdta::new(&mut b, "m", 4, 2).unwrap();
        let mut ps = b.finish();
        ps.zero_where(|n| n.ends_with("temperature"));
        let (_, attn) = m.forward_with_attention(&ps, &input(&[2, 4, 3, 5], 2)).unwrap();
        assert!(attn.data().iter().all(|&a| (a - 0.5).abs() < 1e-15));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut b = ParamBuilder::<f64>::new(3);
        let m = Mdta::new(&mut b, "m", 8, 2).unwrap();
        let ps = b.finish();
        let (_, attn) = m.forward_with_attention(&ps, &input(&[1, 8, 5, 4], 3)).unwrap();
        for row in attn.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn head_divisibility_checked() {
        let mut b = ParamBuilder::<f64>::new(0);
        assert!(matches!(Mdta::new(&mut b, "m", 6, 4), Err(TensorError::Divisibility { .. })));
        assert!(Gdfn::new(&mut b, "g", 4, 0.0).is_err());
    }

    #[test]
    fn gated_off_ffn_outputs_zero() {
        let mut b = ParamBuilder::<f64>::new(4);
        let g = Gdfn::new(&mut b, "g", 4, 2.66).unwrap();
        let mut ps = b.finish();
        // zero the rows of project_in that feed the gelu half
        let w = ps.get(g.project_in.weight).to_vec();
        let half = g.hidden * 4;
        let zeroed: Vec<f64> = w.iter().enumerate().map(|(i, &v)| if i < half { 0.0 } else { v }).collect();
        ps.set(g.project_in.weight, zeroed).unwrap();
        let y = g.forward(&ps, &input(&[1, 4, 5, 5], 5)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.hidden, 10);
    }

    #[test]
    fn zeroed_projections_make_identity() {
        let mut b = ParamBuilder::<f64>::new(5);
        let t = TransformerBlock::new(&mut b, "t", 8, 2, FFN_EXPANSION).unwrap();
        let mut ps = b.finish();
        for id in t.terminal_weights() {
            let n = ps.get(id).numel();
            ps.set(id, vec![0.0; n]).unwrap();
        }
        let x = input(&[1, 8, 6, 7], 6);
        assert_eq!(t.forward(&ps, &x).unwrap().data(), x.data());
    }

    #[test]
    fn resolution_agnostic() {
        let mut b = ParamBuilder::<f32>::new(6);
        let t = TransformerBlock::new(&mut b, "t", 8, 2, FFN_EXPANSION).unwrap();
        let ps = b.finish();
        for (h, w) in [(16, 16), (24, 40)] {
            let x: Tensor<f32> = input(&[1, 8, h, w], 7).cast();
            assert_eq!(t.forward(&ps, &x).unwrap().shape(), &[1, 8, h, w]);
        }
    }
}

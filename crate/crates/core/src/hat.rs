//! Hybrid attention: shifted-window self-attention with a parallel channel
//! attention branch (HAB), overlapped cross-window attention (OCAB), and the
//! residual group combining them (RHAG).

use std::sync::Arc;

use crate::nn::{Conv2d, LayerNorm, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Pad2d, Result, Tensor, TensorError, ZERO_INDEX};

/// Hyper-parameters shared by every block of a group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HatConfig {
    pub dim: usize,
    pub heads: usize,
    /// Window size `M`.
    pub window: usize,
    /// Weight `β` of the channel-attention branch.
    pub cab_scale: f64,
    /// Overlap ratio `γ` of OCAB key/value windows.
    pub overlap: f64,
    /// CAB bottleneck: `dim / compress` channels.
    pub compress: usize,
    /// Channel-attention squeeze: `dim / squeeze` channels.
    pub squeeze: usize,
    pub mlp_ratio: f64,
}

impl HatConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        HatConfig { dim, heads, window: 8, cab_scale: 0.01, overlap: 0.5, compress: 3, squeeze: 30, mlp_ratio: 2.0 }
    }

    fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TensorError::Argument { op: "hat", detail });
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(TensorError::Divisibility { op: "hat", detail: format!("{} channels over {} heads", self.dim, self.heads) });
        }
        if self.window < 2 {
            return bad(format!("window {} < 2", self.window));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap ratio {} outside [0, 1)", self.overlap));
        }
        if !(self.overlap_window() - self.window).is_multiple_of(2) {
            return bad(format!("overlap window {} - window {} must be even", self.overlap_window(), self.window));
        }
        Ok(())
    }

    /// Key/value window size `M + ⌊γM⌋`.
    pub fn overlap_window(&self) -> usize {
        self.window + (self.overlap * self.window as f64) as usize
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Geometry of a window gather on a `[B, C, H, W]` map.
#[derive(Debug, Clone, Copy)]
struct Windows {
    b: usize,
    h: usize,
    w: usize,
    /// Window stride (the query window size `M`).
    stride: usize,
    /// Extracted window size (`M`, or the overlap window for keys/values).
    kernel: usize,
    /// Zero padding on each border before extraction.
    pad: usize,
    /// Cyclic shift applied before partitioning, `torch.roll(x, -shift)`.
    shift: usize,
}

impl Windows {
    fn count(&self) -> usize {
        (self.h / self.stride) * (self.w / self.stride)
    }

    /// Source `(y, x)` of token `(ty, tx)` in window `(wy, wx)`, if inside the map.
    fn source(&self, wy: usize, wx: usize, ty: usize, tx: usize) -> Option<(usize, usize)> {
        let y = (wy * self.stride + ty).checked_sub(self.pad)?;
        let x = (wx * self.stride + tx).checked_sub(self.pad)?;
        if y >= self.h || x >= self.w {
            return None;
        }
        Some(((y + self.shift) % self.h, (x + self.shift) % self.w))
    }

    /// `[B, Ctot, H, W]` → `[B·nW, heads, K², hd]`, reading channels
    /// `c0 .. c0 + heads·hd`.
    fn gather<T: Scalar>(&self, x: &Tensor<T>, c0: usize, heads: usize, hd: usize) -> Result<Tensor<T>> {
        let ctot = x.dim(1);
        let (nh, nw, k) = (self.h / self.stride, self.w / self.stride, self.kernel);
        let mut index = Vec::with_capacity(self.b * self.count() * heads * k * k * hd);
        for n in 0..self.b {
            for wy in 0..nh {
                for wx in 0..nw {
                    for head in 0..heads {
                        for ty in 0..k {
                            for tx in 0..k {
                                let src = self.source(wy, wx, ty, tx);
                                for d in 0..hd {
                                    let c = c0 + head * hd + d;
                                    index.push(match src {
                                        Some((y, xx)) => (((n * ctot + c) * self.h + y) * self.w + xx) as u32,
                                        None => ZERO_INDEX,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        x.remap("window_gather", vec![self.b * nh * nw, heads, k * k, hd], Arc::new(index))
    }

    /// Inverse of [`Windows::gather`] for non-overlapping windows:
    /// `[B·nW, heads, M², hd]` → `[B, heads·hd, H, W]`.
    fn scatter<T: Scalar>(&self, t: &Tensor<T>, heads: usize, hd: usize) -> Result<Tensor<T>> {
        debug_assert!(self.kernel == self.stride && self.pad == 0);
        let (m, c) = (self.stride, heads * hd);
        let (nh, nw) = (self.h / m, self.w / m);
        let mut index = Vec::with_capacity(self.b * c * self.h * self.w);
        for n in 0..self.b {
            for ch in 0..c {
                let (head, d) = (ch / hd, ch % hd);
                for y in 0..self.h {
                    let ys = (y + self.h - self.shift % self.h) % self.h;
                    for x in 0..self.w {
                        let xs = (x + self.w - self.shift % self.w) % self.w;
                        let win = (n * nh + ys / m) * nw + xs / m;
                        let tok = (ys % m) * m + xs % m;
                        index.push((((win * heads + head) * m * m + tok) * hd + d) as u32);
                    }
                }
            }
        }
        t.remap("window_scatter", vec![self.b, c, self.h, self.w], Arc::new(index))
    }
}

/// Flat index into a `[(M + K − 1)², heads]` table for query token `i` of an
/// `M × M` window and key token `j` of a `K × K` window centred on it.
fn relative_index(m: usize, k: usize) -> Vec<usize> {
    let span = m + k - 1;
    let mut idx = Vec::with_capacity(m * m * k * k);
    for i in 0..m * m {
        let (yi, xi) = (i / m, i % m);
        for j in 0..k * k {
            let (yj, xj) = (j / k, j % k);
            idx.push((yi + k - 1 - yj) * span + (xi + k - 1 - xj));
        }
    }
    idx
}

/// Swin mask for cyclically shifted windows: `0` within a region, `-100`
/// between pixels that were not adjacent before the roll. `[nW, M², M²]`.
pub fn shift_mask(h: usize, w: usize, m: usize, shift: usize) -> Vec<f64> {
    let region = |v: usize, n: usize| -> usize {
        if v < n - m {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / m, w / m);
    let mut mask = Vec::with_capacity(nh * nw * m.pow(4));
    for wy in 0..nh {
        for wx in 0..nw {
            let label = |t: usize| region(wy * m + t / m, h) * 3 + region(wx * m + t % m, w);
            for i in 0..m * m {
                for j in 0..m * m {
                    mask.push(if label(i) == label(j) { 0.0 } else { -100.0 });
                }
            }
        }
    }
    mask
}

/// Multi-head attention of query windows against key/value windows, with a
/// learned relative position bias.
#[derive(Debug, Clone)]
struct WindowCore {
    heads: usize,
    head_dim: usize,
    window: usize,
    kv_window: usize,
    bias_table: ParamId,
    rel_index: Arc<Vec<usize>>,
}

impl WindowCore {
    fn new<T: Scalar>(b: &mut ParamBuilder<T>, cfg: &HatConfig, kv_window: usize) -> Self {
        let span = cfg.window + kv_window - 1;
        WindowCore {
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            window: cfg.window,
            kv_window,
            bias_table: b.trunc_normal("relative_position_bias_table", &[span * span, cfg.heads], 0.02),
            rel_index: Arc::new(relative_index(cfg.window, kv_window)),
        }
    }

    /// `[heads, M², K²]` bias gathered from the table.
    fn bias<T: Scalar>(&self, p: &ParamStore<T>) -> Result<Tensor<T>> {
        let (mm, kk) = (self.window.pow(2), self.kv_window.pow(2));
        let mut index = Vec::with_capacity(self.heads * mm * kk);
        for h in 0..self.heads {
            for &r in self.rel_index.iter() {
                index.push((r * self.heads + h) as u32);
            }
        }
        p.get(self.bias_table).remap("relative_position_bias", vec![self.heads, mm, kk], Arc::new(index))
    }

    /// `softmax(q kᵀ / √hd + bias [+ mask]) v` and the probabilities.
    fn attend<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        mask: Option<(&Tensor<T>, usize)>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let q = q.scale((self.head_dim as f64).powf(-0.5))?;
        let mut logits = q.matmul(&k.transpose_last()?)?.add(&self.bias(p)?)?;
        if let Some((mask, n_win)) = mask {
            let s = logits.shape().to_vec();
            logits = logits
                .reshape(&[s[0] / n_win, n_win, s[1], s[2], s[3]])?
                .add(mask)?
                .reshape(&s)?;
        }
        let attn = logits.softmax(3)?;
        Ok((attn.matmul(v)?, attn))
    }
}

/// (Shifted) window multi-head self-attention on `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    cfg: HatConfig,
    pub qkv: Conv2d,
    core: WindowCore,
    pub proj: Conv2d,
}

impl WindowAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cfg: &HatConfig) -> Self {
        b.scoped(name, |b| WindowAttention {
            cfg: *cfg,
            qkv: Conv2d::same(b, "qkv", cfg.dim, 3 * cfg.dim, 1, true),
            core: WindowCore::new(b, cfg, cfg.window),
            proj: Conv2d::same(b, "proj", cfg.dim, cfg.dim, 1, true),
        })
    }

    pub fn bias_table(&self) -> ParamId {
        self.core.bias_table
    }

    /// Output and attention probabilities `[B·nW, heads, M², M²]`.
    pub fn forward_with_attention<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x: &Tensor<T>,
        shift: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, _, h, w) = dims(x, self.cfg.dim)?;
        let m = self.cfg.window;
        if h % m != 0 || w % m != 0 {
            return Err(TensorError::Divisibility { op: "window_attention", detail: format!("{h}x{w} by window {m}") });
        }
        let g = Windows { b, h, w, stride: m, kernel: m, pad: 0, shift };
        let (heads, hd, c) = (self.cfg.heads, self.cfg.head_dim(), self.cfg.dim);
        let qkv = self.qkv.forward(p, x)?;
        let q = g.gather(&qkv, 0, heads, hd)?;
        let k = g.gather(&qkv, c, heads, hd)?;
        let v = g.gather(&qkv, 2 * c, heads, hd)?;
        let mask = if shift > 0 {
            let n_win = g.count();
            let values = shift_mask(h, w, m, shift).into_iter().map(T::lit).collect();
            Some((Tensor::from_vec(&[n_win, 1, m * m, m * m], values)?, n_win))
        } else {
            None
        };
        let (out, attn) = self.core.attend(p, &q, &k, &v, mask.as_ref().map(|(t, n)| (t, *n)))?;
        Ok((self.proj.forward(p, &g.scatter(&out, heads, hd)?)?, attn))
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>, shift: usize) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(p, x, shift)?.0)
    }
}

fn dims<T: Scalar>(x: &Tensor<T>, dim: usize) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] if c == dim => Ok((b, c, h, w)),
        _ => Err(TensorError::Shape { op: "hat", detail: format!("{:?}, expected {dim} channels", x.shape()) }),
    }
}

/// Channel attention block: conv–GELU–conv, then squeeze-and-excitation.
#[derive(Debug, Clone)]
pub struct Cab {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl Cab {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cfg: &HatConfig) -> Self {
        let mid = (cfg.dim / cfg.compress).max(1);
        let sq = (cfg.dim / cfg.squeeze).max(1);
        b.scoped(name, |b| Cab {
            conv1: Conv2d::same(b, "conv1", cfg.dim, mid, 3, true),
            conv2: Conv2d::same(b, "conv2", mid, cfg.dim, 3, true),
            squeeze: Conv2d::same(b, "ca_squeeze", cfg.dim, sq, 1, true),
            excite: Conv2d::same(b, "ca_excite", sq, cfg.dim, 1, true),
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv2.forward(p, &self.conv1.forward(p, x)?.gelu()?)?;
        let pooled = y.mean_axes(&[2, 3])?;
        let gate = self.excite.forward(p, &self.squeeze.forward(p, &pooled)?.relu()?)?.sigmoid()?;
        y.mul(&gate)
    }
}

/// Pointwise two-layer MLP with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl Mlp {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, dim: usize, ratio: f64) -> Self {
        let hidden = ((dim as f64 * ratio) as usize).max(1);
        b.scoped(name, |b| Mlp {
            fc1: Conv2d::same(b, "fc1", dim, hidden, 1, true),
            fc2: Conv2d::same(b, "fc2", hidden, dim, 1, true),
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu()?)
    }
}

/// Hybrid attention block:
/// `y = x + wmsa(LN(x)) + β·cab(LN(x))`, `out = y + mlp(LN(y))`.
#[derive(Debug, Clone)]
pub struct Hab {
    pub cfg: HatConfig,
    pub shift: usize,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub cab: Cab,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Hab {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cfg: &HatConfig, shift: usize) -> Result<Self> {
        cfg.validate()?;
        if shift >= cfg.window {
            return Err(TensorError::Argument { op: "hab", detail: format!("shift {shift} >= window {}", cfg.window) });
        }
        Ok(b.scoped(name, |b| Hab {
            cfg: *cfg,
            shift,
            norm1: LayerNorm::channels(b, "norm1", cfg.dim),
            attn: WindowAttention::new(b, "attn", cfg),
            cab: Cab::new(b, "conv_block", cfg),
            norm2: LayerNorm::channels(b, "norm2", cfg.dim),
            mlp: Mlp::new(b, "mlp", cfg.dim, cfg.mlp_ratio),
        }))
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xn = self.norm1.forward(p, x)?;
        let attn = self.attn.forward(p, &xn, self.shift)?;
        let conv = self.cab.forward(p, &xn)?.scale(self.cfg.cab_scale)?;
        let y = x.add(&attn)?.add(&conv)?;
        y.add(&self.mlp.forward(p, &self.norm2.forward(p, &y)?)?)
    }

    pub fn terminal_weights(&self) -> Vec<ParamId> {
        let mut v = vec![self.attn.proj.weight, self.cab.conv2.weight, self.mlp.fc2.weight];
        v.extend(self.attn.proj.bias);
        v.extend(self.cab.conv2.bias);
        v.extend(self.mlp.fc2.bias);
        v
    }
}

/// Overlapped cross-attention block: `M × M` query windows attend to
/// zero-padded `(M + ⌊γM⌋)²` key/value windows at stride `M`.
#[derive(Debug, Clone)]
pub struct Ocab {
    pub cfg: HatConfig,
    pub norm1: LayerNorm,
    pub qkv: Conv2d,
    core: WindowCore,
    pub proj: Conv2d,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Ocab {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cfg: &HatConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(b.scoped(name, |b| Ocab {
            cfg: *cfg,
            norm1: LayerNorm::channels(b, "norm1", cfg.dim),
            qkv: Conv2d::same(b, "qkv", cfg.dim, 3 * cfg.dim, 1, true),
            core: WindowCore::new(b, cfg, cfg.overlap_window()),
            proj: Conv2d::same(b, "proj", cfg.dim, cfg.dim, 1, true),
            norm2: LayerNorm::channels(b, "norm2", cfg.dim),
            mlp: Mlp::new(b, "mlp", cfg.dim, cfg.mlp_ratio),
        }))
    }

    pub fn bias_table(&self) -> ParamId {
        self.core.bias_table
    }

    /// The attention branch alone (before residual and MLP) on a normalised map.
    pub fn attention<T: Scalar>(&self, p: &ParamStore<T>, xn: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, _, h, w) = dims(xn, self.cfg.dim)?;
        let (m, k) = (self.cfg.window, self.cfg.overlap_window());
        if h % m != 0 || w % m != 0 {
            return Err(TensorError::Divisibility { op: "ocab", detail: format!("{h}x{w} by window {m}") });
        }
        let qg = Windows { b, h, w, stride: m, kernel: m, pad: 0, shift: 0 };
        let kvg = Windows { kernel: k, pad: (k - m) / 2, ..qg };
        let (heads, hd, c) = (self.cfg.heads, self.cfg.head_dim(), self.cfg.dim);
        let qkv = self.qkv.forward(p, xn)?;
        let q = qg.gather(&qkv, 0, heads, hd)?;
        let kk = kvg.gather(&qkv, c, heads, hd)?;
        let v = kvg.gather(&qkv, 2 * c, heads, hd)?;
        let (out, _) = self.core.attend(p, &q, &kk, &v, None)?;
        self.proj.forward(p, &qg.scatter(&out, heads, hd)?)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.add(&self.attention(p, &self.norm1.forward(p, x)?)?)?;
        y.add(&self.mlp.forward(p, &self.norm2.forward(p, &y)?)?)
    }

    pub fn terminal_weights(&self) -> Vec<ParamId> {
        let mut v = vec![self.proj.weight, self.mlp.fc2.weight];
        v.extend(self.proj.bias);
        v.extend(self.mlp.fc2.bias);
        v
    }
}

/// Residual hybrid attention group:
/// `x + conv3×3(ocab(hab_depth(… hab_1(x))))`, with HAB shifts alternating
/// `0, M/2, 0, …`. Inputs whose sides are not multiples of `M` are
/// reflect-padded and the result cropped back.
#[derive(Debug, Clone)]
pub struct Rhag {
    pub cfg: HatConfig,
    pub blocks: Vec<Hab>,
    pub ocab: Ocab,
    pub conv: Conv2d,
}

impl Rhag {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cfg: &HatConfig, depth: usize) -> Result<Self> {
        cfg.validate()?;
        b.scoped(name, |b| {
            let blocks = (0..depth)
                .map(|i| Hab::new(b, &format!("blocks.{i}"), cfg, if i % 2 == 0 { 0 } else { cfg.window / 2 }))
                .collect::<Result<Vec<_>>>()?;
            Ok(Rhag {
                cfg: *cfg,
                blocks,
                ocab: Ocab::new(b, "overlap_attn", cfg)?,
                conv: Conv2d::same(b, "conv", cfg.dim, cfg.dim, 3, true),
            })
        })
    }

    pub fn shifts(&self) -> Vec<usize> {
        self.blocks.iter().map(|h| h.shift).collect()
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, _, h, w) = dims(x, self.cfg.dim)?;
        let pad = Pad2d::to_multiple(h, w, self.cfg.window);
        let mut y = if pad.is_zero() { x.clone() } else { x.reflect_pad(pad)? };
        for blk in &self.blocks {
            y = blk.forward(p, &y)?;
        }
        y = self.conv.forward(p, &self.ocab.forward(p, &y)?)?;
        if !pad.is_zero() {
            y = y.crop(0, 0, h, w)?;
        }
        x.add(&y)
    }

    pub fn terminal_weights(&self) -> Vec<ParamId> {
        let mut v = vec![self.conv.weight];
        v.extend(self.conv.bias);
        v
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

    fn small(dim: usize, heads: usize, m: usize) -> HatConfig {
        HatConfig { window: m, ..HatConfig::new(dim, heads) }
    }

    #[test]
    fn relative_index_is_swin_for_equal_windows() {
        let m = 3;
        let idx = relative_index(m, m);
        for i in 0..9 {
            for j in 0..9 {
                let (yi, xi, yj, xj) = (i / 3, i % 3, j / 3, j % 3);
                assert_eq!(idx[i * 9 + j], (yi + 2 - yj) * 5 + (xi + 2 - xj));
            }
        }
        let k = 5;
        assert!(relative_index(m, k).iter().all(|&r| r < (m + k - 1).pow(2)));
    }

    #[test]
    fn shift_mask_regions() {
        // 4x4 map, M = 2, shift 1: the last window mixes four regions
        let mask = shift_mask(4, 4, 2, 1);
        let last = &mask[3 * 16..];
        assert_eq!(last.iter().filter(|&&v| v == 0.0).count(), 4);
        // the first window holds one region only
        assert!(mask[..16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_rows_sum_to_one_with_mask() {
        let cfg = small(4, 2, 4);
        let mut b = ParamBuilder::<f64>::new(1);
        let wa = WindowAttention::new(&mut b, "a", &cfg);
        let ps = b.finish();
        for shift in [0, 2] {
            let (_, attn) = wa.forward_with_attention(&ps, &input(&[2, 4, 8, 12], 2), shift).unwrap();
            for row in attn.data().chunks(16) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shift_changes_output() {
        let cfg = small(4, 1, 4);
        let mut b = ParamBuilder::<f64>::new(2);
        let wa = WindowAttention::new(&mut b, "a", &cfg);
        let ps = b.finish();
        let x = input(&[1, 4, 8, 8], 3);
        let d = wa.forward(&ps, &x, 0).unwrap().max_abs_diff(&wa.forward(&ps, &x, 2).unwrap());
        assert!(d > 1e-6);
    }

    #[test]
    fn window_gather_scatter_roundtrip() {
        let x = input(&[2, 6, 8, 4], 4);
        for shift in [0, 1, 2] {
            let g = Windows { b: 2, h: 8, w: 4, stride: 4, kernel: 4, pad: 0, shift };
            let t = g.gather(&x, 0, 2, 3).unwrap();
            assert_eq!(g.scatter(&t, 2, 3).unwrap().data(), x.data());
        }
    }

    #[test]
    fn zero_overlap_equals_window_attention() {
        let cfg = HatConfig { overlap: 0.0, ..small(4, 2, 4) };
        let mut b = ParamBuilder::<f64>::new(5);
        let oc = Ocab::new(&mut b, "o", &cfg).unwrap();
        let ps = b.finish();
        let mut b2 = ParamBuilder::<f64>::new(5);
        let wa = WindowAttention::new(&mut b2, "w", &cfg);
        let ps2 = b2.finish();
        // copy OCAB's weights into the window-attention layer
        let copy = |from: ParamId, to: ParamId, dst: &mut ParamStore<f64>| dst.set(to, ps.get(from).to_vec()).unwrap();
        let mut ps2 = ps2;
        copy(oc.qkv.weight, wa.qkv.weight, &mut ps2);
        copy(oc.qkv.bias.unwrap(), wa.qkv.bias.unwrap(), &mut ps2);
        copy(oc.proj.weight, wa.proj.weight, &mut ps2);
        copy(oc.proj.bias.unwrap(), wa.proj.bias.unwrap(), &mut ps2);
        copy(oc.bias_table(), wa.bias_table(), &mut ps2);
        let x = input(&[1, 4, 8, 8], 6);
        let d = oc.attention(&ps, &x).unwrap().max_abs_diff(&wa.forward(&ps2, &x, 0).unwrap());
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn ocab_shape() {
        let cfg = small(4, 2, 4);
        assert_eq!(cfg.overlap_window(), 6);
        let mut b = ParamBuilder::<f64>::new(6);
        let oc = Ocab::new(&mut b, "o", &cfg).unwrap();
        let ps = b.finish();
        assert_eq!(oc.forward(&ps, &input(&[1, 4, 8, 8], 7)).unwrap().shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn rhag_shift_pattern_and_identity() {
        let cfg = small(6, 2, 4);
        let mut b = ParamBuilder::<f64>::new(7);
        let g = Rhag::new(&mut b, "g", &cfg, 4).unwrap();
        assert_eq!(g.shifts(), vec![0, 2, 0, 2]);
        let mut ps = b.finish();
        for id in g.terminal_weights() {
            let n = ps.get(id).numel();
            ps.set(id, vec![0.0; n]).unwrap();
        }
        for (h, w) in [(8, 8), (10, 6)] {
            let x = input(&[1, 6, h, w], 8);
            assert_eq!(g.forward(&ps, &x).unwrap().data(), x.data());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut b = ParamBuilder::<f64>::new(0);
        assert!(Hab::new(&mut b, "h", &small(6, 4, 4), 0).is_err());
        assert!(Hab::new(&mut b, "h", &small(4, 2, 1), 0).is_err());
        assert!(Hab::new(&mut b, "h", &small(4, 2, 4), 4).is_err());
        assert!(Ocab::new(&mut b, "o", &HatConfig { overlap: 1.0, ..small(4, 2, 4) }).is_err());
    }
}

//! Data-movement ops. Most are expressed as a single index-map gather, which
//! makes them bit-exact and gives them a scatter-add backward for free.

use std::sync::Arc;

use super::{shape_err, strides, BackwardFn, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Index-map entry meaning "write zero here".
pub const ZERO_INDEX: u32 = u32::MAX;

/// Amounts of padding on each side of the two spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pad2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad2d {
    /// Bottom/right padding that rounds `(h, w)` up to a multiple of `m`.
    pub fn to_multiple(h: usize, w: usize, m: usize) -> Self {
        Pad2d { top: 0, bottom: (m - h % m) % m, left: 0, right: (m - w % m) % m }
    }

    pub fn is_zero(&self) -> bool {
        *self == Pad2d::default()
    }
}

fn spatial<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => shape_err(op, format!("expected [B, C, H, W], got {:?}", x.shape())),
    }
}

impl<T: Scalar> Tensor<T> {
    /// `out[i] = self[index[i]]`, or zero where `index[i] == ZERO_INDEX`.
    pub fn remap(&self, op: &'static str, shape: Vec<usize>, index: Arc<Vec<u32>>) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != index.len() {
            return shape_err(op, format!("index map of {} for shape {shape:?}", index.len()));
        }
        let x = self.data();
        let data = index
            .iter()
            .map(|&i| if i == ZERO_INDEX { T::zero() } else { x[i as usize] })
            .collect();
        let n = self.numel();
        let backward: BackwardFn<T> = Box::new(move |args| {
            let mut gx = vec![T::zero(); n];
            for (&i, &g) in index.iter().zip(args.grad) {
                if i != ZERO_INDEX {
                    gx[i as usize] += g;
                }
            }
            vec![Some(gx)]
        });
        Tensor::from_op(op, shape, data, vec![self.clone()], backward)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Argument { op: "permute", detail: format!("{axes:?} for rank {nd}") });
        }
        let src = strides(self.shape());
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let st: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let total = self.numel();
        let mut index = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..total {
            index.push(off as u32);
            for d in (0..nd).rev() {
                idx[d] += 1;
                off += st[d];
                if idx[d] < shape[d] {
                    break;
                }
                off -= st[d] * idx[d];
                idx[d] = 0;
            }
        }
        self.remap("permute", shape, Arc::new(index))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let nd = self.ndim();
        if nd < 2 {
            return shape_err("transpose", "rank < 2");
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return shape_err("narrow", format!("axis {axis} [{start}, {}) of {:?}", start + len, self.shape()));
        }
        let (outer, full, inner) = super::split_axis(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        let backward: BackwardFn<T> = Box::new(move |args| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                gx[(o * full + start) * inner..][..len * inner]
                    .copy_from_slice(&args.grad[o * len * inner..][..len * inner]);
            }
            vec![Some(gx)]
        });
        Tensor::from_op("narrow", shape, data, vec![self.clone()], backward)
    }

    /// Splits `axis` into `parts` equal chunks.
    pub fn chunk(&self, parts: usize, axis: usize) -> Result<Vec<Tensor<T>>> {
        let ext = self.shape().get(axis).copied().unwrap_or(0);
        if parts == 0 || ext % parts != 0 {
            return Err(TensorError::Divisibility { op: "chunk", detail: format!("{ext} into {parts}") });
        }
        let len = ext / parts;
        (0..parts).map(|p| self.narrow(axis, p * len, len)).collect()
    }

    pub fn concat(xs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = xs.first().ok_or(TensorError::Argument { op: "concat", detail: "no inputs".into() })?;
        if axis >= first.ndim() {
            return Err(TensorError::Argument { op: "concat", detail: format!("axis {axis}") });
        }
        for x in xs {
            let ok = x.ndim() == first.ndim()
                && x.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return shape_err("concat", format!("{:?} vs {:?} along {axis}", x.shape(), first.shape()));
            }
        }
        let (outer, _, inner) = super::split_axis(first.shape(), axis);
        let lens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &l) in xs.iter().zip(&lens) {
                data.extend_from_slice(&x.data()[o * l * inner..][..l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let backward: BackwardFn<T> = Box::new(move |args| {
            let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&args.grad[pos..pos + l * inner]);
                    pos += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        });
        Tensor::from_op("concat", shape, data, xs.to_vec(), backward)
    }

    /// [B, C·r², H, W] → [B, C, H·r, W·r].
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = spatial(self, "pixel_shuffle")?;
        if r == 0 || c % (r * r) != 0 {
            return Err(TensorError::Divisibility { op: "pixel_shuffle", detail: format!("{c} channels by r^2 = {}", r * r) });
        }
        let co = c / (r * r);
        let (ho, wo) = (h * r, w * r);
        let mut index = Vec::with_capacity(self.numel());
        for n in 0..b {
            for ch in 0..co {
                for y in 0..ho {
                    for x in 0..wo {
                        let src_c = ch * r * r + (y % r) * r + x % r;
                        index.push((((n * c + src_c) * h + y / r) * w + x / r) as u32);
                    }
                }
            }
        }
        self.remap("pixel_shuffle", vec![b, co, ho, wo], Arc::new(index))
    }

    /// [B, C, H, W] → [B, C·r², H/r, W/r].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = spatial(self, "pixel_unshuffle")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(TensorError::Divisibility { op: "pixel_unshuffle", detail: format!("{h}x{w} by {r}") });
        }
        let (ho, wo) = (h / r, w / r);
        let mut index = Vec::with_capacity(self.numel());
        for n in 0..b {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        for y in 0..ho {
                            for x in 0..wo {
                                index.push((((n * c + ch) * h + y * r + i) * w + x * r + j) as u32);
                            }
                        }
                    }
                }
            }
        }
        self.remap("pixel_unshuffle", vec![b, c * r * r, ho, wo], Arc::new(index))
    }

    /// Mirror padding that excludes the edge sample; each pad must be smaller
    /// than the corresponding extent.
    pub fn reflect_pad(&self, pad: Pad2d) -> Result<Tensor<T>> {
        let (b, c, h, w) = spatial(self, "reflect_pad")?;
        if pad.top.max(pad.bottom) >= h.max(1) || pad.left.max(pad.right) >= w.max(1) {
            if pad.is_zero() {
                return Ok(self.clone());
            }
            return Err(TensorError::Argument { op: "reflect_pad", detail: format!("{pad:?} for {h}x{w}") });
        }
        if pad.is_zero() {
            return Ok(self.clone());
        }
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
            r as usize
        };
        let (ho, wo) = (h + pad.top + pad.bottom, w + pad.left + pad.right);
        let mut index = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            for y in 0..ho {
                let sy = reflect(y as isize - pad.top as isize, h);
                for x in 0..wo {
                    let sx = reflect(x as isize - pad.left as isize, w);
                    index.push(((plane * h + sy) * w + sx) as u32);
                }
            }
        }
        self.remap("reflect_pad", vec![b, c, ho, wo], Arc::new(index))
    }

    /// Spatial window `[y0, y0 + h) × [x0, x0 + w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let (_, _, ih, iw) = spatial(self, "crop")?;
        if y0 + h > ih || x0 + w > iw {
            return shape_err("crop", format!("[{y0}+{h}, {x0}+{w}] outside {ih}x{iw}"));
        }
        if (y0, x0, h, w) == (0, 0, ih, iw) {
            return Ok(self.clone());
        }
        self.narrow(2, y0, h)?.narrow(3, x0, w)
    }

    /// Cyclic shift of the spatial axes: `out[y][x] = in[(y - dy) mod H][(x - dx) mod W]`.
    pub fn roll2d(&self, dy: isize, dx: isize) -> Result<Tensor<T>> {
        let (b, c, h, w) = spatial(self, "roll2d")?;
        let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
        let mut index = Vec::with_capacity(self.numel());
        for plane in 0..b * c {
            for y in 0..h {
                let sy = wrap(y as isize - dy, h);
                for x in 0..w {
                    index.push(((plane * h + sy) * w + wrap(x as isize - dx, w)) as u32);
                }
            }
        }
        self.remap("roll2d", vec![b, c, h, w], Arc::new(index))
    }

    /// Bilinear resize with half-pixel centres (no corner alignment).
    pub fn interpolate_bilinear(&self, ho: usize, wo: usize) -> Result<Tensor<T>> {
        let (b, c, h, w) = spatial(self, "interpolate_bilinear")?;
        if ho == 0 || wo == 0 || h == 0 || w == 0 {
            return Err(TensorError::Argument { op: "interpolate_bilinear", detail: format!("{h}x{w} -> {ho}x{wo}") });
        }
        let taps = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
            let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        };
        let ys: Vec<_> = (0..ho).map(|y| taps(y, h, ho)).collect();
        let xs: Vec<_> = (0..wo).map(|x| taps(x, w, wo)).collect();
        let lerp = |a: T, b: T, t: f64| a + (b - a) * T::lit(t);
        let xdat = self.data();
        let mut data = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let p = &xdat[plane * h * w..][..h * w];
            for &(y0, y1, ly) in &ys {
                for &(x0, x1, lx) in &xs {
                    let top = lerp(p[y0 * w + x0], p[y0 * w + x1], lx);
                    let bot = lerp(p[y1 * w + x0], p[y1 * w + x1], lx);
                    data.push(lerp(top, bot, ly));
                }
            }
        }
        let n = self.numel();
        let backward: BackwardFn<T> = Box::new(move |args| {
            let mut gx = vec![T::zero(); n];
            let mut k = 0;
            for plane in 0..b * c {
                let gp = &mut gx[plane * h * w..][..h * w];
                for &(y0, y1, ly) in &ys {
                    for &(x0, x1, lx) in &xs {
                        let g = args.grad[k];
                        k += 1;
                        let (ly, lx) = (T::lit(ly), T::lit(lx));
                        let (oy, ox) = (T::one() - ly, T::one() - lx);
                        gp[y0 * w + x0] += g * oy * ox;
                        gp[y0 * w + x1] += g * oy * lx;
                        gp[y1 * w + x0] += g * ly * ox;
                        gp[y1 * w + x1] += g * ly * lx;
                    }
                }
            }
            vec![Some(gx)]
        });
        Tensor::from_op("interpolate_bilinear", vec![b, c, ho, wo], data, vec![self.clone()], backward)
    }
}

/// [B, C, H, W] → [B·nW, M², C], windows in row-major order, pixels within a
/// window row-major.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = spatial(x, "window_partition")?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(TensorError::Divisibility { op: "window_partition", detail: format!("{h}x{w} by window {m}") });
    }
    let (nh, nw) = (h / m, w / m);
    let mut index = Vec::with_capacity(x.numel());
    for n in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..m {
                    for tx in 0..m {
                        for ch in 0..c {
                            index.push((((n * c + ch) * h + wy * m + ty) * w + wx * m + tx) as u32);
                        }
                    }
                }
            }
        }
    }
    x.remap("window_partition", vec![b * nh * nw, m * m, c], Arc::new(index))
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, m: usize, b: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
        return Err(TensorError::Divisibility { op: "window_reverse", detail: format!("{h}x{w} by window {m}") });
    }
    let (nh, nw) = (h / m, w / m);
    let c = match *windows.shape() {
        [nwin, mm, c] if nwin == b * nh * nw && mm == m * m => c,
        _ => return shape_err("window_reverse", format!("{:?} for B={b}, {h}x{w}, M={m}", windows.shape())),
    };
    let mut index = Vec::with_capacity(windows.numel());
    for n in 0..b {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let win = (n * nh + y / m) * nw + x / m;
                    let tok = (y % m) * m + x % m;
                    index.push(((win * m * m + tok) * c + ch) as u32);
                }
            }
        }
    }
    windows.remap("window_reverse", vec![b, c, h, w], Arc::new(index))
}

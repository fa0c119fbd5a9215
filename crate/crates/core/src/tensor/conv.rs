use super::{shape_err, BackwardFn, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Stride, symmetric zero padding and group count of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, pad: 0, groups: 1 }
    }
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Conv2dSpec { stride: 1, pad: kernel / 2, groups: 1 }
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Conv2dSpec { stride: 1, pad: kernel / 2, groups: channels }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }
    /// For stride 1: the output columns `[lo, hi)` whose input column under
    /// tap `k` lies inside the image.
    #[inline]
    fn unit_stride_span(&self, k: usize) -> Option<(usize, usize)> {
        if self.stride != 1 {
            return None;
        }
        let lo = self.pad.saturating_sub(k);
        let hi = (self.w + self.pad).saturating_sub(k).min(self.wo);
        Some((lo, hi.max(lo)))
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

/// Gathers the receptive fields of group `g` of image `x_img` ([Cin, H, W])
/// into `col` ([Cin_g * kh * kw, Ho * Wo]).
fn im2col<T: Scalar>(geo: &Geom, x_img: &[T], g: usize, col: &mut [T]) {
    let (hw, howo) = (geo.h * geo.w, geo.ho * geo.wo);
    for ci in 0..geo.cin_g() {
        let plane = &x_img[(g * geo.cin_g() + ci) * hw..][..hw];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = &mut col[((ci * geo.kh + ky) * geo.kw + kx) * howo..][..howo];
                for oy in 0..geo.ho {
                    let dst = &mut row[oy * geo.wo..(oy + 1) * geo.wo];
                    match geo.src(oy, ky, geo.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = geo.src(ox, kx, geo.w).map_or(T::zero(), |ix| plane[iy * geo.w + ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(geo: &Geom, col: &[T], g: usize, gx_img: &mut [T]) {
    let (hw, howo) = (geo.h * geo.w, geo.ho * geo.wo);
    for ci in 0..geo.cin_g() {
        let plane = &mut gx_img[(g * geo.cin_g() + ci) * hw..][..hw];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = &col[((ci * geo.kh + ky) * geo.kw + kx) * howo..][..howo];
                for oy in 0..geo.ho {
                    let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                    for ox in 0..geo.wo {
                        if let Some(ix) = geo.src(ox, kx, geo.w) {
                            plane[iy * geo.w + ix] += row[oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward_gemm<T: Scalar>(geo: &Geom, x: &[T], w: &[T], out: &mut [T]) {
    let (cin_g, cout_g) = (geo.cin_g(), geo.cout_g());
    let kk = cin_g * geo.kh * geo.kw;
    let howo = geo.ho * geo.wo;
    let mut col = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * howo] };
    for b in 0..geo.b {
        let x_img = &x[b * geo.cin * geo.h * geo.w..][..geo.cin * geo.h * geo.w];
        for g in 0..geo.groups {
            let cols: &[T] = if geo.is_pointwise() {
                &x_img[g * cin_g * howo..][..cin_g * howo]
            } else {
                im2col(geo, x_img, g, &mut col);
                &col
            };
            let o = &mut out[(b * geo.cout + g * cout_g) * howo..][..cout_g * howo];
            T::gemm(
                cout_g,
                kk,
                howo,
                T::one(),
                &w[g * cout_g * kk..][..cout_g * kk],
                kk as isize,
                1,
                cols,
                howo as isize,
                1,
                T::zero(),
                o,
                howo as isize,
                1,
            );
        }
    }
}

fn backward_gemm<T: Scalar>(
    geo: &Geom,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: Option<&mut Vec<T>>,
    gw: Option<&mut Vec<T>>,
) {
    let (cin_g, cout_g) = (geo.cin_g(), geo.cout_g());
    let kk = cin_g * geo.kh * geo.kw;
    let howo = geo.ho * geo.wo;
    let img = geo.cin * geo.h * geo.w;
    let mut col = vec![T::zero(); kk * howo];
    let mut gx = gx;
    let mut gw = gw;
    for b in 0..geo.b {
        let x_img = &x[b * img..][..img];
        for g in 0..geo.groups {
            let go = &gout[(b * geo.cout + g * cout_g) * howo..][..cout_g * howo];
            if let Some(gw) = gw.as_deref_mut() {
                let cols: &[T] = if geo.is_pointwise() {
                    &x_img[g * cin_g * howo..][..cin_g * howo]
                } else {
                    im2col(geo, x_img, g, &mut col);
                    &col
                };
                // dW_g += dOut_g @ col^T
                T::gemm(
                    cout_g,
                    howo,
                    kk,
                    T::one(),
                    go,
                    howo as isize,
                    1,
                    cols,
                    1,
                    howo as isize,
                    T::one(),
                    &mut gw[g * cout_g * kk..][..cout_g * kk],
                    kk as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_deref_mut() {
                let wg = &w[g * cout_g * kk..][..cout_g * kk];
                if geo.is_pointwise() {
                    let dst = &mut gx[b * img + g * cin_g * howo..][..cin_g * howo];
                    T::gemm(cin_g, cout_g, howo, T::one(), wg, 1, kk as isize, go, howo as isize, 1, T::one(), dst, howo as isize, 1);
                } else {
                    // dcol = W_g^T @ dOut_g
                    T::gemm(kk, cout_g, howo, T::one(), wg, 1, kk as isize, go, howo as isize, 1, T::zero(), &mut col, howo as isize, 1);
                    col2im(geo, &col, g, &mut gx[b * img..][..img]);
                }
            }
        }
    }
}

fn forward_depthwise<T: Scalar>(geo: &Geom, x: &[T], w: &[T], out: &mut [T]) {
    let (hw, howo, taps) = (geo.h * geo.w, geo.ho * geo.wo, geo.kh * geo.kw);
    for b in 0..geo.b {
        for c in 0..geo.cin {
            let plane = &x[(b * geo.cin + c) * hw..][..hw];
            let k = &w[c * taps..][..taps];
            let o = &mut out[(b * geo.cin + c) * howo..][..howo];
            for oy in 0..geo.ho {
                for ky in 0..geo.kh {
                    let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                    let src_row = &plane[iy * geo.w..][..geo.w];
                    let dst_row = &mut o[oy * geo.wo..][..geo.wo];
                    for kx in 0..geo.kw {
                        let kv = k[ky * geo.kw + kx];
                        if let Some((lo, hi)) = geo.unit_stride_span(kx) {
                            let src = &src_row[lo + kx - geo.pad..hi + kx - geo.pad];
                            for (d, &v) in dst_row[lo..hi].iter_mut().zip(src) {
                                *d += kv * v;
                            }
                            continue;
                        }
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            if let Some(ix) = geo.src(ox, kx, geo.w) {
                                *d += kv * src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums (fixed order).
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

fn backward_depthwise<T: Scalar>(
    geo: &Geom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut Vec<T>>,
    mut gw: Option<&mut Vec<T>>,
) {
    let (hw, howo, taps) = (geo.h * geo.w, geo.ho * geo.wo, geo.kh * geo.kw);
    for b in 0..geo.b {
        for c in 0..geo.cin {
            let plane = &x[(b * geo.cin + c) * hw..][..hw];
            let go = &gout[(b * geo.cin + c) * howo..][..howo];
            for oy in 0..geo.ho {
                for ky in 0..geo.kh {
                    let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                    for kx in 0..geo.kw {
                        let tap = c * taps + ky * geo.kw + kx;
                        let kv = w[tap];
                        let mut acc = T::zero();
                        if let Some((lo, hi)) = geo.unit_stride_span(kx) {
                            let off = kx + lo - geo.pad;
                            let g = &go[oy * geo.wo + lo..oy * geo.wo + hi];
                            let src = &plane[iy * geo.w + off..iy * geo.w + off + (hi - lo)];
                            acc += lane_dot(g, src);
                            if let Some(gx) = gx.as_deref_mut() {
                                let row = (b * geo.cin + c) * hw + iy * geo.w + off;
                                for (d, &gv) in gx[row..row + (hi - lo)].iter_mut().zip(g) {
                                    *d += gv * kv;
                                }
                            }
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[tap] += acc;
                            }
                            continue;
                        }
                        for ox in 0..geo.wo {
                            if let Some(ix) = geo.src(ox, kx, geo.w) {
                                let gv = go[oy * geo.wo + ox];
                                acc += gv * plane[iy * geo.w + ix];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[(b * geo.cin + c) * hw + iy * geo.w + ix] += gv * kv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[tap] += acc;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-D cross-correlation of `self` ([B, Cin, H, W]) with `weight`
    /// ([Cout, Cin / groups, kh, kw]) and optional `bias` ([Cout]).
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, spec: Conv2dSpec) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("input {xs:?}, weight {ws:?}: need rank 4"));
        }
        let (groups, stride) = (spec.groups, spec.stride);
        if groups == 0 || stride == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 {
            return Err(TensorError::Divisibility {
                op: "conv2d",
                detail: format!("channels {} / out {} not divisible by groups {groups}", xs[1], ws[0]),
            });
        }
        if ws[1] != xs[1] / groups {
            return shape_err("conv2d", format!("weight {ws:?} expects {} input channels per group, input has {}", ws[1], xs[1] / groups));
        }
        if let Some(b) = bias {
            if b.numel() != ws[0] {
                return shape_err("conv2d", format!("bias of {} for {} outputs", b.numel(), ws[0]));
            }
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
            return shape_err("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}"));
        }
        let geo = Geom {
            b: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            kh,
            kw,
            ho: (h + 2 * spec.pad - kh) / stride + 1,
            wo: (w + 2 * spec.pad - kw) / stride + 1,
            stride,
            pad: spec.pad,
            groups,
        };
        let howo = geo.ho * geo.wo;
        let mut out = vec![T::zero(); geo.b * geo.cout * howo];
        if geo.is_depthwise() && !geo.is_pointwise() {
            forward_depthwise(&geo, self.data(), weight.data(), &mut out);
        } else {
            forward_gemm(&geo, self.data(), weight.data(), &mut out);
        }
        if let Some(bias) = bias {
            for (i, chunk) in out.chunks_mut(howo).enumerate() {
                let bv = bias.data()[i % geo.cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        let backward: BackwardFn<T> = Box::new(move |args| {
            let (x, wt) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad;
            let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
            let mut gw = wt.requires_grad().then(|| vec![T::zero(); wt.numel()]);
            if geo.is_depthwise() && !geo.is_pointwise() {
                backward_depthwise(&geo, x.data(), wt.data(), g, gx.as_mut(), gw.as_mut());
            } else {
                backward_gemm(&geo, x.data(), wt.data(), g, gx.as_mut(), gw.as_mut());
            }
            let mut grads = vec![gx, gw];
            if args.inputs.len() == 3 {
                let gb = args.inputs[2].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); geo.cout];
                    for (i, chunk) in g.chunks(howo).enumerate() {
                        gb[i % geo.cout] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    gb
                });
                grads.push(gb);
            }
            grads
        });
        Tensor::from_op("conv2d", vec![geo.b, geo.cout, geo.ho, geo.wo], out, inputs, backward)
    }
}

//! Simulated baseline JPEG compression.
//!
//! Reproduces the lossy stages of a libjpeg round trip: BT.601 full-range
//! colour conversion, optional 2×2 chroma subsampling, per-block DCT with
//! IJG-scaled quantisation, and reconstruction. Entropy coding is lossless and
//! skipped.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageBuffer;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("quality {0} outside [1, 100]")]
    Quality(u32),
    #[error("cannot compress a {0}x{1} image")]
    Degenerate(usize, usize),
    #[error("unknown subsampling mode {0:?} (expected 4:2:0 or 4:4:4)")]
    Subsampling(String),
    #[error("unknown chroma upsampling {0:?} (expected fancy or nearest)")]
    Upsampling(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Subsampling {
    #[default]
    #[serde(rename = "4:2:0")]
    S420,
    #[serde(rename = "4:4:4")]
    S444,
}

impl fmt::Display for Subsampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subsampling::S420 => "4:2:0",
            Subsampling::S444 => "4:4:4",
        })
    }
}

impl FromStr for Subsampling {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "420" | "4:2:0" => Ok(Subsampling::S420),
            "444" | "4:4:4" => Ok(Subsampling::S444),
            other => Err(CodecError::Subsampling(other.to_string())),
        }
    }
}

/// How the decoder restores subsampled chroma to full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChromaUpsampling {
    /// libjpeg's default triangle filter (3/4–1/4 weights in each direction).
    #[default]
    Fancy,
    /// Pixel duplication.
    Nearest,
}

impl fmt::Display for ChromaUpsampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChromaUpsampling::Fancy => "fancy",
            ChromaUpsampling::Nearest => "nearest",
        })
    }
}

impl FromStr for ChromaUpsampling {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fancy" => Ok(ChromaUpsampling::Fancy),
            "nearest" => Ok(ChromaUpsampling::Nearest),
            other => Err(CodecError::Upsampling(other.to_string())),
        }
    }
}

/// Quality factor and chroma layout of one compression pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradeSpec {
    quality: u8,
    pub subsampling: Subsampling,
    #[serde(default)]
    pub upsampling: ChromaUpsampling,
}

impl DegradeSpec {
    pub fn new(quality: u32, subsampling: Subsampling) -> Result<Self, CodecError> {
        if !(1..=100).contains(&quality) {
            return Err(CodecError::Quality(quality));
        }
        Ok(DegradeSpec { quality: quality as u8, subsampling, upsampling: ChromaUpsampling::default() })
    }

    pub fn with_upsampling(self, upsampling: ChromaUpsampling) -> Self {
        DegradeSpec { upsampling, ..self }
    }

    pub fn quality(&self) -> u32 {
        self.quality as u32
    }
}

/// IJG Annex K luminance table, natural (row-major) order.
pub const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// IJG Annex K chrominance table.
pub const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTable {
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
}

/// IJG quality scaling: `s = 5000 / q` below 50, `200 - 2q` otherwise; each
/// entry becomes `clamp((base * s + 50) / 100, 1, 255)`.
pub fn build_quant_table(quality: u32) -> Result<QuantTable, CodecError> {
    if !(1..=100).contains(&quality) {
        return Err(CodecError::Quality(quality));
    }
    let s = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let scale = |base: &[u16; 64]| base.map(|b| ((b as u32 * s + 50) / 100).clamp(1, 255) as u16);
    Ok(QuantTable { luma: scale(&BASE_LUMA), chroma: scale(&BASE_CHROMA) })
}

fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; 8]; 8];
        for (u, row) in c.iter_mut().enumerate() {
            let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = alpha * (((2 * x + 1) as f64) * u as f64 * PI / 16.0).cos();
            }
        }
        c
    })
}

/// `out = L · block · R` for 8×8 row-major matrices, with `L`/`R` given by the
/// basis either directly or transposed.
fn sandwich<T: Scalar>(block: &[T; 64], left_t: bool) -> [T; 64] {
    let c = dct_basis();
    let basis = |i: usize, j: usize| T::lit(if left_t { c[j][i] } else { c[i][j] });
    let mut tmp = [T::zero(); 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut s = T::zero();
            for k in 0..8 {
                s += basis(i, k) * block[k * 8 + j];
            }
            tmp[i * 8 + j] = s;
        }
    }
    let mut out = [T::zero(); 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut s = T::zero();
            for k in 0..8 {
                s += tmp[i * 8 + k] * basis(j, k);
            }
            out[i * 8 + j] = s;
        }
    }
    out
}

/// Orthonormal 2-D DCT-II of an 8×8 block (row-major). A constant block of
/// value `v` maps to DC `8v`.
pub fn dct8<T: Scalar>(block: &[T; 64]) -> [T; 64] {
    sandwich(block, false)
}

/// Inverse of [`dct8`] (orthonormal DCT-III).
pub fn idct8<T: Scalar>(coeffs: &[T; 64]) -> [T; 64] {
    sandwich(coeffs, true)
}

/// One 8-bit sample plane.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<u8>,
}

impl Plane {
    /// Extends to `h × w` by replicating the last row and column.
    fn pad_replicate(&self, h: usize, w: usize) -> Plane {
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            let sy = y.min(self.h - 1);
            for x in 0..w {
                v.push(self.v[sy * self.w + x.min(self.w - 1)]);
            }
        }
        Plane { h, w, v }
    }

    /// 2×2 box average with libjpeg's alternating rounding bias.
    fn downsample_2x2(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.v[yy * self.w + xx] as u32;
                let sum = at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1);
                let bias = if x % 2 == 0 { 1 } else { 2 };
                v.push(((sum + bias) >> 2) as u8);
            }
        }
        Plane { h, w, v }
    }

    fn upsample_nearest_2x2(&self) -> Plane {
        let (h, w) = (self.h * 2, self.w * 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                v.push(self.v[(y / 2) * self.w + x / 2]);
            }
        }
        Plane { h, w, v }
    }

    /// libjpeg `h2v2_fancy_upsample`: each output sample weights its nearest
    /// input by 9/16, the two edge neighbours by 3/16 and the diagonal by
    /// 1/16, in integer arithmetic with alternating rounding. Only the first
    /// `vh × vw` samples are real; beyond them the edge is replicated.
    fn upsample_fancy_2x2(&self, vh: usize, vw: usize) -> Plane {
        let (h, w) = (self.h * 2, self.w * 2);
        let at = |y: usize, x: usize| self.v[y.min(vh - 1) * self.w + x.min(vw - 1)] as i32;
        let mut v = vec![0u8; h * w];
        for y in 0..self.h {
            for (dy, other) in [(0, y.saturating_sub(1)), (1, y + 1)] {
                let col = |x: usize| 3 * at(y, x) + at(other, x);
                let row = &mut v[(2 * y + dy) * w..(2 * y + dy + 1) * w];
                for x in 0..self.w {
                    let this = col(x);
                    let left = if x == 0 { this } else { col(x - 1) };
                    let right = if x + 1 >= vw { this } else { col(x + 1) };
                    row[2 * x] = ((3 * this + left + 8) >> 4) as u8;
                    row[2 * x + 1] = ((3 * this + right + 7) >> 4) as u8;
                }
            }
        }
        Plane { h, w, v }
    }

    /// Quantises every 8×8 block with `table` and reconstructs it. Dimensions
    /// must be multiples of 8.
    fn quantize_blocks(&mut self, table: &[u16; 64]) {
        debug_assert!(self.h.is_multiple_of(8) && self.w.is_multiple_of(8));
        for by in (0..self.h).step_by(8) {
            for bx in (0..self.w).step_by(8) {
                let mut block = [0.0f64; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = self.v[(by + y) * self.w + bx + x] as f64 - 128.0;
                    }
                }
                let mut coeffs = dct8(&block);
                for (c, &q) in coeffs.iter_mut().zip(table) {
                    let q = q as f64;
                    *c = (*c / q).round() * q;
                }
                let recon = idct8(&coeffs);
                for y in 0..8 {
                    for x in 0..8 {
                        self.v[(by + y) * self.w + bx + x] = (recon[y * 8 + x] + 128.0).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }

    fn crop(&self, h: usize, w: usize) -> Plane {
        if (h, w) == (self.h, self.w) {
            return self.clone();
        }
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            v.extend_from_slice(&self.v[y * self.w..y * self.w + w]);
        }
        Plane { h, w, v }
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn rgb_to_ycbcr(img: &ImageBuffer) -> [Plane; 3] {
    let (h, w) = (img.height(), img.width());
    let mut planes = [(); 3].map(|_| Vec::with_capacity(h * w));
    for px in img.data().chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        planes[0].push(to_u8(0.299 * r + 0.587 * g + 0.114 * b));
        planes[1].push(to_u8(-0.168_735_892 * r - 0.331_264_108 * g + 0.5 * b + 128.0));
        planes[2].push(to_u8(0.5 * r - 0.418_687_589 * g - 0.081_312_411 * b + 128.0));
    }
    planes.map(|v| Plane { h, w, v })
}

fn ycbcr_to_rgb(y: &Plane, cb: &Plane, cr: &Plane) -> ImageBuffer {
    let mut data = Vec::with_capacity(y.h * y.w * 3);
    for i in 0..y.h * y.w {
        let (l, u, v) = (y.v[i] as f64, cb.v[i] as f64 - 128.0, cr.v[i] as f64 - 128.0);
        data.push(to_u8(l + 1.402 * v));
        data.push(to_u8(l - 0.344_136_286 * u - 0.714_136_286 * v));
        data.push(to_u8(l + 1.772 * u));
    }
    ImageBuffer::new(y.h, y.w, data).expect("plane sizes agree")
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Compresses and decompresses `img` with the given quality and subsampling.
pub fn jpeg_degrade(img: &ImageBuffer, spec: &DegradeSpec) -> Result<ImageBuffer, CodecError> {
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return Err(CodecError::Degenerate(h, w));
    }
    let tables = build_quant_table(spec.quality())?;
    let [y, cb, cr] = rgb_to_ycbcr(img);
    let (y, cb, cr) = match spec.subsampling {
        Subsampling::S444 => {
            let (ph, pw) = (round_up(h, 8), round_up(w, 8));
            let mut planes = [y, cb, cr].map(|p| p.pad_replicate(ph, pw));
            planes[0].quantize_blocks(&tables.luma);
            planes[1].quantize_blocks(&tables.chroma);
            planes[2].quantize_blocks(&tables.chroma);
            let [y, cb, cr] = planes;
            (y.crop(h, w), cb.crop(h, w), cr.crop(h, w))
        }
        Subsampling::S420 => {
            let (ph, pw) = (round_up(h, 16), round_up(w, 16));
            let mut y = y.pad_replicate(ph, pw);
            y.quantize_blocks(&tables.luma);
            let chroma = |p: Plane| {
                let mut small = p.pad_replicate(ph, pw).downsample_2x2();
                small.quantize_blocks(&tables.chroma);
                match spec.upsampling {
                    ChromaUpsampling::Fancy => small.upsample_fancy_2x2(h.div_ceil(2), w.div_ceil(2)),
                    ChromaUpsampling::Nearest => small.upsample_nearest_2x2(),
                }
                .crop(h, w)
            };
            (y.crop(h, w), chroma(cb), chroma(cr))
        }
    };
    Ok(ycbcr_to_rgb(&y, &cb, &cr))
}

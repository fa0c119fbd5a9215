//! Direct-loop reference implementations used as oracles by the integration
//! tests. Everything here is written for clarity, on plain `Vec<f64>` in
//! `[C, H, W]` layout (batch 1), independently of the library kernels.

#![allow(dead_code)]

use promptcir::nn::{Conv2d, LayerNorm, ParamStore};
use promptcir::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Feature map `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        assert_eq!(t.dim(0), 1);
        Map { c: t.dim(1), h: t.dim(2), w: t.dim(3), v: t.to_vec() }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, val: f64) {
        self.v[(c * self.h + y) * self.w + x] = val;
    }

    pub fn add(&self, o: &Map) -> Map {
        Map { v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(), ..self.clone() }
    }

    pub fn channels(&self, from: usize, n: usize) -> Map {
        Map { c: n, v: self.v[from * self.h * self.w..(from + n) * self.h * self.w].to_vec(), ..self.clone() }
    }

    pub fn max_diff(&self, t: &Tensor<f64>) -> f64 {
        assert_eq!(t.numel(), self.v.len());
        self.v.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Zero-padded "same" convolution with groups, by direct summation.
pub fn conv(p: &ParamStore<f64>, layer: &Conv2d, x: &Map) -> Map {
    let w = p.get(layer.weight);
    let (cout, cin_g, k) = (w.dim(0), w.dim(1), w.dim(2));
    let groups = layer.spec.groups;
    let cout_g = cout / groups;
    let pad = k as isize / 2;
    let bias = layer.bias.map(|b| p.get(b).to_vec());
    let mut out = Map::zeros(cout, x.h, x.w);
    for o in 0..cout {
        let g = o / cout_g;
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = bias.as_ref().map_or(0.0, |b| b[o]);
                for ci in 0..cin_g {
                    let c = g * cin_g + ci;
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - pad;
                            let sx = xx as isize + kx as isize - pad;
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            s += w.data()[((o * cin_g + ci) * k + ky) * k + kx] * x.at(c, sy as usize, sx as usize);
                        }
                    }
                }
                out.set(o, y, xx, s);
            }
        }
    }
    out
}

/// Per-pixel normalisation over channels (biased variance).
pub fn layer_norm(p: &ParamStore<f64>, ln: &LayerNorm, x: &Map) -> Map {
    let g = p.get(ln.weight).to_vec();
    let b = ln.bias.map(|b| p.get(b).to_vec()).unwrap_or_else(|| vec![0.0; x.c]);
    let mut out = x.clone();
    for y in 0..x.h {
        for xx in 0..x.w {
            let vals: Vec<f64> = (0..x.c).map(|c| x.at(c, y, xx)).collect();
            let mean = vals.iter().sum::<f64>() / x.c as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
            for c in 0..x.c {
                out.set(c, y, xx, (vals[c] - mean) / (var + ln.eps).sqrt() * g[c] + b[c]);
            }
        }
    }
    out
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

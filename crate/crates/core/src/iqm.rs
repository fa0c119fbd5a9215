//! Full-reference quality metrics on 8-bit RGB: PSNR, SSIM and PSNR-B.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::image::ImageBuffer;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("{metric} needs at least {min}x{min} pixels, got {h}x{w}")]
    TooSmall { metric: &'static str, min: usize, h: usize, w: usize },
}

const PEAK: f64 = 255.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const BLOCK: usize = 8;

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricError> {
    if !a.same_dims(b) {
        return Err(MetricError::ShapeMismatch(a.height(), a.width(), b.height(), b.width()));
    }
    Ok(())
}

fn mse(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    sum / a.data().len() as f64
}

fn to_db(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

/// `10·log10(255² / MSE)` over all RGB samples; `+inf` for identical images.
pub fn psnr(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64, MetricError> {
    check_pair(reference, test)?;
    Ok(to_db(mse(reference, test)))
}

fn channel(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - r;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&prod(a, a), h, w, &k);
    let e_bb = filter_valid(&prod(b, b), h, w, &k);
    let e_ab = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .sum();
    total / n as f64
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03,
/// L = 255) over fully-covered windows, averaged across R, G and B.
pub fn ssim(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64, MetricError> {
    check_pair(reference, test)?;
    let (h, w) = (reference.height(), reference.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall { metric: "ssim", min: SSIM_WINDOW, h, w });
    }
    let s: f64 = (0..3).map(|c| ssim_plane(&channel(reference, c), &channel(test, c), h, w)).sum();
    Ok(s / 3.0)
}

/// Blocking-effect factor of one plane: mean squared step across 8-aligned
/// block boundaries minus the mean step elsewhere, weighted by
/// `log2(8) / log2(min(H, W))` and floored at zero.
pub fn blocking_effect_factor(p: &[f64], h: usize, w: usize) -> f64 {
    let (mut b_sum, mut b_n, mut nb_sum, mut nb_n) = (0.0, 0usize, 0.0, 0usize);
    let mut add = |is_boundary: bool, d: f64| {
        if is_boundary {
            b_sum += d * d;
            b_n += 1;
        } else {
            nb_sum += d * d;
            nb_n += 1;
        }
    };
    for y in 0..h {
        for x in 0..w - 1 {
            add(x % BLOCK == BLOCK - 1, p[y * w + x] - p[y * w + x + 1]);
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            add(y % BLOCK == BLOCK - 1, p[y * w + x] - p[(y + 1) * w + x]);
        }
    }
    if b_n == 0 || nb_n == 0 {
        return 0.0;
    }
    let boundary = b_sum / b_n as f64;
    let non_boundary = nb_sum / nb_n as f64;
    if boundary <= non_boundary {
        return 0.0;
    }
    let scaler = (BLOCK as f64).log2() / (h.min(w) as f64).log2();
    scaler * (boundary - non_boundary)
}

/// `10·log10(255² / (MSE + BEF))` where BEF is the blocking-effect factor of
/// `test` averaged over the three channels.
pub fn psnrb(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64, MetricError> {
    check_pair(reference, test)?;
    let (h, w) = (test.height(), test.width());
    if h <= BLOCK || w <= BLOCK {
        return Err(MetricError::TooSmall { metric: "psnrb", min: BLOCK + 1, h, w });
    }
    let bef: f64 = (0..3).map(|c| blocking_effect_factor(&channel(test, c), h, w)).sum::<f64>() / 3.0;
    Ok(to_db(mse(reference, test) + bef))
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t:?}"))),
    }
}

/// PSNR / SSIM / PSNR-B of one image pair, or a mean over many.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnrb: f64,
}

impl MetricReport {
    pub fn measure(reference: &ImageBuffer, test: &ImageBuffer) -> Result<Self, MetricError> {
        Ok(MetricReport { psnr: psnr(reference, test)?, ssim: ssim(reference, test)?, psnrb: psnrb(reference, test)? })
    }

    /// Mean of per-image values.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(MetricReport {
            psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
            psnrb: reports.iter().map(|r| r.psnrb).sum::<f64>() / n,
        })
    }
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub dataset: String,
    /// Fixed quality factor for non-blind rows; `None` for blind sets.
    pub qf: Option<u32>,
    pub n_images: usize,
    #[serde(flatten)]
    pub metrics: MetricReport,
    /// Averaging rule: always `"mean_of_per_image"`.
    pub pooling: String,
}

impl CorpusReport {
    pub fn new(dataset: impl Into<String>, qf: Option<u32>, per_image: &[MetricReport]) -> Option<Self> {
        Some(CorpusReport {
            dataset: dataset.into(),
            qf,
            n_images: per_image.len(),
            metrics: MetricReport::mean(per_image)?,
            pooling: "mean_of_per_image".into(),
        })
    }

    pub fn text_row(&self) -> String {
        let qf = self.qf.map_or_else(|| "blind".to_string(), |q| q.to_string());
        format!(
            "{:<12} {:>6} {:>5} {:>8.2} {:>7.4} {:>8.2}",
            self.dataset, qf, self.n_images, self.metrics.psnr, self.metrics.ssim, self.metrics.psnrb
        )
    }

    pub fn text_header() -> String {
        format!("{:<12} {:>6} {:>5} {:>8} {:>7} {:>8}", "dataset", "qf", "n", "psnr", "ssim", "psnrb")
    }
}

/// Aligned text table of report rows.
pub fn text_table(rows: &[CorpusReport]) -> String {
    let mut out = CorpusReport::text_header();
    for r in rows {
        out.push('\n');
        out.push_str(&r.text_row());
    }
    out.push('\n');
    out
}

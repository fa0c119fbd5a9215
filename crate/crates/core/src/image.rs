//! 8-bit RGB images and their conversion to network tensors.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image data of {got} bytes does not match {height}x{width}x3")]
    Size { height: usize, width: usize, got: usize },
    #[error("{path}: {source}")]
    Codec { path: String, source: image::ImageError },
    #[error("expected tensor [1, 3, H, W], got {0:?}")]
    TensorShape(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != height * width * 3 {
            return Err(ImageError::Size { height, width, got: data.len() });
        }
        Ok(ImageBuffer { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        ImageBuffer { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        ImageBuffer { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Reads PNG or binary PPM (any format the decoder recognises).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(ImageBuffer { height: h as usize, width: w as usize, data: img.into_raw() })
    }

    /// Writes PNG, or binary PPM when the extension is `.ppm`/`.pnm`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        let path = path.as_ref();
        let err = |source| ImageError::Codec { path: path.display().to_string(), source };
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction");
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ppm") | Some("pnm") => {
                let file = std::fs::File::create(path).map_err(|e| err(image::ImageError::IoError(e)))?;
                PnmEncoder::new(std::io::BufWriter::new(file))
                    .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                    .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
                    .map_err(err)
            }
            _ => img.save_with_format(path, ImageFormat::Png).map_err(err),
        }
    }

    /// Sub-image `[y0, y0 + h) × [x0, x0 + w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> ImageBuffer {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop outside image");
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        ImageBuffer { height: h, width: w, data }
    }

    pub fn flip_horizontal(&self) -> ImageBuffer {
        ImageBuffer::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> ImageBuffer {
        ImageBuffer::from_fn(self.height, self.width, |y, x| self.pixel(self.height - 1 - y, x))
    }

    /// Rotation by 90° counter-clockwise.
    pub fn rot90(&self) -> ImageBuffer {
        ImageBuffer::from_fn(self.width, self.height, |y, x| self.pixel(x, self.width - 1 - y))
    }

    /// [1, 3, H, W] tensor with values in [0, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut v = vec![T::zero(); 3 * h * w];
        let inv = T::lit(1.0 / 255.0);
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                v[c * h * w + i] = T::lit(px[c] as f64) * inv;
            }
        }
        Tensor::from_vec(&[1, 3, h, w], v).expect("shape matches buffer")
    }

    /// Stacks images of equal size into [B, 3, H, W].
    pub fn batch_to_tensor<T: Scalar>(images: &[ImageBuffer]) -> Result<Tensor<T>, ImageError> {
        let parts: Vec<Tensor<T>> = images.iter().map(|im| im.to_tensor()).collect();
        Ok(Tensor::concat(&parts, 0)?)
    }

    /// Inverse of [`ImageBuffer::to_tensor`]: clamps to [0, 1] and rounds.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, ImageError> {
        let (h, w) = match *t.shape() {
            [1, 3, h, w] => (h, w),
            _ => return Err(ImageError::TensorShape(t.shape().to_vec())),
        };
        let d = t.data();
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            for c in 0..3 {
                let v = d[c * h * w + i].as_f64().clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
        Ok(ImageBuffer { height: h, width: w, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, |y, x| [(y * 10) as u8, (x * 7) as u8, ((x + y) * 3) as u8])
    }

    #[test]
    fn size_checked() {
        assert!(ImageBuffer::new(2, 2, vec![0; 11]).is_err());
    }

    #[test]
    fn tensor_roundtrip_is_exact() {
        let im = gradient(5, 7);
        let t: Tensor<f32> = im.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 5, 7]);
        assert_eq!(ImageBuffer::from_tensor(&t).unwrap(), im);
    }

    #[test]
    fn rotations_compose() {
        let im = gradient(3, 5);
        let r = im.rot90();
        assert_eq!((r.height(), r.width()), (5, 3));
        assert_eq!(r.rot90().rot90().rot90(), im);
        assert_eq!(im.flip_horizontal().flip_horizontal(), im);
        assert_eq!(im.flip_vertical().pixel(0, 0), im.pixel(2, 0));
    }

    #[test]
    fn png_and_ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let im = gradient(9, 4);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            im.save(&p).unwrap();
            assert_eq!(ImageBuffer::load(&p).unwrap(), im);
        }
        let head = std::fs::read(dir.path().join("a.ppm")).unwrap();
        assert_eq!(&head[..2], b"P6");
    }
}

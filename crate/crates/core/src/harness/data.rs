//! Datasets: manifests, blind-set generation, quality-factor policies,
//! augmentation and the training-batch sampler.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{jpeg_degrade, ChromaUpsampling, CodecError, DegradeSpec, Subsampling};
use crate::image::{ImageBuffer, ImageError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{path}:{line}: {detail}")]
    Manifest { path: String, line: usize, detail: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Lowest and highest quality factor of the blind protocols.
pub const QF_RANGE: (u32, u32) = (10, 70);

/// How the compression level of each training sample is chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QfPolicy {
    /// Uniform over a fixed list.
    Fixed(Vec<u32>),
    /// Uniform over the integers `lo..=hi`.
    Uniform { lo: u32, hi: u32 },
}

impl QfPolicy {
    /// `{10, 20, …, 70}`.
    pub fn fixed_levels() -> Self {
        QfPolicy::Fixed((1..=7).map(|k| 10 * k).collect())
    }

    pub fn uniform() -> Self {
        QfPolicy::Uniform { lo: QF_RANGE.0, hi: QF_RANGE.1 }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |q: u32| (1..=100).contains(&q);
        match self {
            QfPolicy::Fixed(v) if v.is_empty() => Err("empty quality-factor list".into()),
            QfPolicy::Fixed(v) if !v.iter().all(|&q| ok(q)) => Err(format!("quality factors {v:?} outside 1..=100")),
            QfPolicy::Uniform { lo, hi } if lo > hi || !ok(*lo) || !ok(*hi) => Err(format!("bad range [{lo}, {hi}]")),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match self {
            QfPolicy::Fixed(v) => v[rng.random_range(0..v.len())],
            QfPolicy::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
        }
    }
}

/// Random dihedral augmentation toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Augment {
    pub fn all() -> Self {
        Augment { hflip: true, vflip: true, rot90: true }
    }

    pub fn none() -> Self {
        Augment { hflip: false, vflip: false, rot90: false }
    }

    /// Draws the three coin flips (always all three, so the random stream does
    /// not depend on which toggles are enabled).
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> [bool; 3] {
        let coins: [bool; 3] = [rng.random(), rng.random(), rng.random()];
        [coins[0] && self.hflip, coins[1] && self.vflip, coins[2] && self.rot90]
    }

    pub fn apply(flags: [bool; 3], img: &ImageBuffer) -> ImageBuffer {
        let mut out = img.clone();
        if flags[0] {
            out = out.flip_horizontal();
        }
        if flags[1] {
            out = out.flip_vertical();
        }
        if flags[2] {
            out = out.rot90();
        }
        out
    }
}

/// One image of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub split: String,
    pub clean: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qf: Option<u32>,
}

/// A list of images, stored as JSON lines. Relative paths resolve against
/// `root` (the manifest's directory).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub records: Vec<ManifestRecord>,
}

/// PNG and PPM files of a directory in name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "ppm")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetManifest {
    /// Clean-only manifest over the images of a directory.
    pub fn from_clean_dir(dir: &Path, split: &str) -> Result<Self> {
        let records = list_images(dir)?
            .into_iter()
            .map(|p| ManifestRecord {
                split: split.to_string(),
                clean: PathBuf::from(p.file_name().expect("listed files have names")),
                degraded: None,
                qf: None,
            })
            .collect();
        Ok(DatasetManifest { root: dir.to_path_buf(), split: split.to_string(), records })
    }

    /// Loads a `.jsonl` manifest, or builds a clean-only one from a directory.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let split = path.file_name().and_then(|s| s.to_str()).unwrap_or("dataset");
            return Self::from_clean_dir(path, split);
        }
        Self::load(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| DataError::Manifest {
                path: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })?;
            records.push(rec);
        }
        let split = records.first().map(|r| r.split.clone()).unwrap_or_default();
        if let Some(r) = records.iter().find(|r| r.split != split) {
            return Err(DataError::Invalid(format!("mixed splits {split:?} and {:?}", r.split)));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetManifest { root, split, records })
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialise"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io_err(path))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Checks that every file exists and decodes, and that degraded images
    /// carry their quality factor.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            ImageBuffer::load(self.resolve(&r.clean))?;
            if let Some(d) = &r.degraded {
                ImageBuffer::load(self.resolve(d))?;
                if r.qf.is_none() {
                    return Err(DataError::Invalid(format!("{}: degraded image without a quality factor", d.display())));
                }
            }
        }
        Ok(())
    }
}

/// Per-image quality factors of a blind set: uniform integers in
/// [`QF_RANGE`], drawn in image order from `seed`.
pub fn draw_blind_qfs(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| QfPolicy::uniform().sample(&mut rng)).collect()
}

/// Compresses every image of `clean_dir` at a random quality factor, writes
/// `<stem>_q<qf>.png` into `out_dir` and saves `manifest.jsonl` beside them.
pub fn make_blind_set(
    clean_dir: &Path,
    out_dir: &Path,
    seed: u64,
    subsampling: Subsampling,
    upsampling: ChromaUpsampling,
) -> Result<DatasetManifest> {
    let images = list_images(clean_dir)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let clean_root = std::path::absolute(clean_dir).map_err(io_err(clean_dir))?;
    let split = clean_dir.file_name().and_then(|s| s.to_str()).unwrap_or("blind").to_string();
    let mut records = Vec::with_capacity(images.len());
    for (path, qf) in images.iter().zip(draw_blind_qfs(images.len(), seed)) {
        let img = ImageBuffer::load(path)?;
        let spec = DegradeSpec::new(qf, subsampling)?.with_upsampling(upsampling);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let name = PathBuf::from(format!("{stem}_q{qf}.png"));
        jpeg_degrade(&img, &spec)?.save(out_dir.join(&name))?;
        records.push(ManifestRecord {
            split: split.clone(),
            clean: clean_root.join(path.file_name().expect("listed files have names")),
            degraded: Some(name),
            qf: Some(qf),
        });
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), split, records };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// How training pairs are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Whole images compressed once per level, then paired crops
    /// (the precomputed fixed-level set).
    Precompressed,
    /// Crop first, then compress the crop.
    Online,
}

/// Clean training images plus the cache of compressed copies.
pub struct TrainData {
    images: Vec<ImageBuffer>,
    spec_base: (Subsampling, ChromaUpsampling),
    cache: HashMap<(usize, u32), ImageBuffer>,
}

/// A batch of `[B, 3, crop, crop]` degraded inputs and clean targets.
pub struct Batch<T: crate::scalar::Scalar> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
    pub qfs: Vec<u32>,
}

impl TrainData {
    pub fn new(images: Vec<ImageBuffer>, subsampling: Subsampling, upsampling: ChromaUpsampling) -> Result<Self> {
        if images.is_empty() {
            return Err(DataError::Invalid("no training images".into()));
        }
        Ok(TrainData { images, spec_base: (subsampling, upsampling), cache: HashMap::new() })
    }

    pub fn from_manifest(m: &DatasetManifest, subsampling: Subsampling, upsampling: ChromaUpsampling) -> Result<Self> {
        let images = m.records.iter().map(|r| ImageBuffer::load(m.resolve(&r.clean))).collect::<Result<_, _>>()?;
        Self::new(images, subsampling, upsampling)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn spec(&self, qf: u32) -> Result<DegradeSpec> {
        Ok(DegradeSpec::new(qf, self.spec_base.0)?.with_upsampling(self.spec_base.1))
    }

    fn compressed(&mut self, idx: usize, qf: u32) -> Result<&ImageBuffer> {
        if !self.cache.contains_key(&(idx, qf)) {
            let img = jpeg_degrade(&self.images[idx], &self.spec(qf)?)?;
            self.cache.insert((idx, qf), img);
        }
        Ok(&self.cache[&(idx, qf)])
    }

    /// Writes every image compressed at every level of `qfs` to
    /// `dir/q<qf>/<index>.png` and reloads the cache from those files.
    pub fn precompute(&mut self, qfs: &[u32], dir: &Path) -> Result<()> {
        for &qf in qfs {
            let sub = dir.join(format!("q{qf}"));
            std::fs::create_dir_all(&sub).map_err(io_err(&sub))?;
            for idx in 0..self.images.len() {
                let path = sub.join(format!("{idx:05}.png"));
                self.compressed(idx, qf)?.save(&path)?;
                let back = ImageBuffer::load(&path)?;
                self.cache.insert((idx, qf), back);
            }
        }
        Ok(())
    }

    /// Draws a batch. All randomness comes from `rng`, in a fixed order.
    pub fn sample<T: crate::scalar::Scalar, R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        batch: usize,
        crop: usize,
        policy: &QfPolicy,
        augment: Augment,
        mode: PairMode,
    ) -> Result<Batch<T>> {
        let (mut inputs, mut targets, mut qfs) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..batch {
            let idx = rng.random_range(0..self.images.len());
            let (h, w) = (self.images[idx].height(), self.images[idx].width());
            if h < crop || w < crop {
                return Err(DataError::Invalid(format!("image {idx} is {h}×{w}, smaller than crop {crop}")));
            }
            let qf = policy.sample(rng);
            let y0 = rng.random_range(0..=h - crop);
            let x0 = rng.random_range(0..=w - crop);
            let flags = augment.draw(rng);
            let clean = self.images[idx].crop(y0, x0, crop, crop);
            let degraded = match mode {
                PairMode::Precompressed => self.compressed(idx, qf)?.crop(y0, x0, crop, crop),
                PairMode::Online => jpeg_degrade(&clean, &self.spec(qf)?)?,
            };
            inputs.push(Augment::apply(flags, &degraded));
            targets.push(Augment::apply(flags, &clean));
            qfs.push(qf);
        }
        Ok(Batch {
            input: ImageBuffer::batch_to_tensor(&inputs)?,
            target: ImageBuffer::batch_to_tensor(&targets)?,
            qfs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fixed = QfPolicy::fixed_levels();
        assert_eq!(fixed, QfPolicy::Fixed(vec![10, 20, 30, 40, 50, 60, 70]));
        assert!((0..200).all(|_| fixed.sample(&mut rng).is_multiple_of(10)));
        let draws: Vec<u32> = (0..2000).map(|_| QfPolicy::uniform().sample(&mut rng)).collect();
        assert_eq!((*draws.iter().min().unwrap(), *draws.iter().max().unwrap()), (10, 70));
        assert!(QfPolicy::Fixed(vec![]).validate().is_err());
        assert!(QfPolicy::Uniform { lo: 70, hi: 10 }.validate().is_err());
        let json = serde_json::to_string(&QfPolicy::uniform()).unwrap();
        assert_eq!(json, r#"{"uniform":{"lo":10,"hi":70}}"#);
    }

    #[test]
    fn augment_flags_respect_toggles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..50).all(|_| Augment::none().draw(&mut rng) == [false; 3]));
        let img = noise(4, 6, 2);
        let out = Augment::apply([true, true, true], &img);
        assert_eq!((out.height(), out.width()), (6, 4));
        assert_eq!(Augment::apply([true, true, false], &Augment::apply([true, true, false], &img)), img);
    }

    #[test]
    fn sampler_is_seed_deterministic_and_paired() {
        let imgs = vec![noise(40, 48, 3), noise(32, 32, 4)];
        let mut a = TrainData::new(imgs.clone(), Subsampling::S420, ChromaUpsampling::Fancy).unwrap();
        let mut b = TrainData::new(imgs, Subsampling::S420, ChromaUpsampling::Fancy).unwrap();
        for mode in [PairMode::Precompressed, PairMode::Online] {
            let x: Batch<f32> = a
                .sample(&mut ChaCha8Rng::seed_from_u64(9), 3, 16, &QfPolicy::fixed_levels(), Augment::all(), mode)
                .unwrap();
            let y: Batch<f32> = b
                .sample(&mut ChaCha8Rng::seed_from_u64(9), 3, 16, &QfPolicy::fixed_levels(), Augment::all(), mode)
                .unwrap();
            assert_eq!(x.input.data(), y.input.data());
            assert_eq!(x.target.data(), y.target.data());
            assert_eq!(x.input.shape(), &[3, 3, 16, 16]);
            assert_ne!(x.input.data(), x.target.data());
        }
        let too_big: Result<Batch<f32>> =
            a.sample(&mut ChaCha8Rng::seed_from_u64(0), 1, 64, &QfPolicy::uniform(), Augment::none(), PairMode::Online);
        assert!(too_big.is_err());
    }
}

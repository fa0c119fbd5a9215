//! Blind and non-blind evaluation protocols.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::{DataError, DatasetManifest};
use crate::codec::{jpeg_degrade, ChromaUpsampling, CodecError, DegradeSpec, Subsampling};
use crate::image::{ImageBuffer, ImageError};
use crate::iqm::{text_table, CorpusReport, MetricError, MetricReport};
use crate::network::{NetworkError, PromptCir};
use crate::nn::ParamStore;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{0}")]
    Protocol(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Quality factors of the non-blind tables.
pub const NONBLIND_QFS: [u32; 4] = [10, 20, 30, 40];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Score the manifest's degraded images as they are.
    Blind,
    /// Compress every clean image at each listed quality factor.
    Nonblind(Vec<u32>),
}

/// What produces the restored image.
pub enum Restorer<'a> {
    /// Returns its input: scores the compressed images themselves.
    Identity,
    Model { net: &'a PromptCir, params: &'a ParamStore<f32> },
}

impl Restorer<'_> {
    pub fn restore(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        match self {
            Restorer::Identity => Ok(img.clone()),
            Restorer::Model { net, params } => {
                let out = net.restore(params, &img.to_tensor::<f32>())?;
                Ok(ImageBuffer::from_tensor(&out)?)
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Restorer::Identity => "identity",
            Restorer::Model { .. } => "model",
        }
    }
}

/// Codec settings used to build non-blind inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CodecSettings {
    pub subsampling: Subsampling,
    pub upsampling: ChromaUpsampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub restorer: String,
    pub mode: EvalMode,
    pub codec: CodecSettings,
    pub rows: Vec<CorpusReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise")
    }

    pub fn to_text(&self) -> String {
        text_table(&self.rows)
    }
}

pub fn evaluate(
    restorer: &Restorer<'_>,
    manifest: &DatasetManifest,
    mode: &EvalMode,
    codec: CodecSettings,
) -> Result<EvalReport> {
    if manifest.records.is_empty() {
        return Err(EvalError::Protocol("empty dataset".into()));
    }
    let dataset = manifest.split.clone();
    let mut rows = Vec::new();
    match mode {
        EvalMode::Blind => {
            let mut per_image = Vec::with_capacity(manifest.records.len());
            for r in &manifest.records {
                let degraded = r.degraded.as_ref().ok_or_else(|| {
                    EvalError::Protocol(format!("{}: blind evaluation needs degraded images", r.clean.display()))
                })?;
                let clean = ImageBuffer::load(manifest.resolve(&r.clean))?;
                let input = ImageBuffer::load(manifest.resolve(degraded))?;
                per_image.push(MetricReport::measure(&clean, &restorer.restore(&input)?)?);
            }
            rows.extend(CorpusReport::new(dataset, None, &per_image));
        }
        EvalMode::Nonblind(qfs) => {
            if qfs.is_empty() {
                return Err(EvalError::Protocol("no quality factors requested".into()));
            }
            let cleans = manifest
                .records
                .iter()
                .map(|r| ImageBuffer::load(manifest.resolve(&r.clean)))
                .collect::<Result<Vec<_>, _>>()?;
            for &qf in qfs {
                let spec = DegradeSpec::new(qf, codec.subsampling)?.with_upsampling(codec.upsampling);
                let mut per_image = Vec::with_capacity(cleans.len());
                for clean in &cleans {
                    let input = jpeg_degrade(clean, &spec)?;
                    per_image.push(MetricReport::measure(clean, &restorer.restore(&input)?)?);
                }
                rows.extend(CorpusReport::new(dataset.clone(), Some(qf), &per_image));
            }
        }
    }
    Ok(EvalReport { restorer: restorer.label().into(), mode: mode.clone(), codec, rows })
}

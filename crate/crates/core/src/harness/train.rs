//! Two-stage training loop.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::{Augment, DataError, PairMode, QfPolicy, TrainData};
use super::optim::{AdamW, AdamWConfig, CosineSchedule, STEP_KEY};
use crate::checkpoint::{Checkpoint, CheckpointError, StageInfo};
use crate::codec::{ChromaUpsampling, Subsampling};
use crate::network::{NetworkConfig, NetworkError, PromptCir};
use crate::nn::{LayerError, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stage 2 fine-tunes a stage-1 model: {0}")]
    StageGate(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Hyper-parameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// 1: fixed quality levels from precompressed pairs; 2: online
    /// compression at uniformly drawn levels.
    pub stage: u8,
    #[serde(default = "default_crop")]
    pub crop: usize,
    pub batch_size: usize,
    pub lr: CosineSchedule,
    pub iterations: u64,
    pub qf_policy: QfPolicy,
    pub augment: Augment,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub subsampling: Subsampling,
    #[serde(default)]
    pub upsampling: ChromaUpsampling,
    /// Save a checkpoint every this many iterations (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Record the loss every this many iterations (the first and last
    /// iterations are always recorded).
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_crop() -> usize {
    128
}

fn default_log_every() -> u64 {
    50
}

/// Training budget presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// The published schedule (global batch 24).
    Full,
    /// Single-CPU budget: crop 64, batch 2, 2k + 1k iterations.
    Desk,
}

impl TrainConfig {
    pub fn preset(scale: Scale, stage: u8) -> Self {
        let (lr, iterations, qf_policy) = match stage {
            1 => (2e-4, 800_000, QfPolicy::fixed_levels()),
            _ => (1e-4, 600_000, QfPolicy::uniform()),
        };
        let base = TrainConfig {
            stage: if stage == 1 { 1 } else { 2 },
            crop: 128,
            batch_size: 24,
            lr: CosineSchedule::new(lr),
            iterations,
            qf_policy,
            augment: Augment::all(),
            seed: 0,
            optimizer: AdamWConfig::default(),
            subsampling: Subsampling::default(),
            upsampling: ChromaUpsampling::default(),
            checkpoint_every: 10_000,
            log_every: 1000,
        };
        match scale {
            Scale::Full => base,
            Scale::Desk => TrainConfig {
                crop: 64,
                batch_size: 2,
                iterations: if stage == 1 { 2000 } else { 1000 },
                checkpoint_every: 500,
                log_every: 50,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        match (self.stage, &self.qf_policy) {
            (1, QfPolicy::Fixed(_)) | (2, QfPolicy::Uniform { .. }) => {}
            (1 | 2, p) => return bad(format!("stage {} cannot use quality policy {p:?}", self.stage)),
            (s, _) => return bad(format!("stage {s} (expected 1 or 2)")),
        }
        self.qf_policy.validate().map_err(TrainError::Config)?;
        if self.crop < 16 {
            return bad(format!("crop {} below the network minimum 16", self.crop));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return bad("batch size and iterations must be positive".into());
        }
        if !(self.lr.init > 0.0 && self.lr.floor >= 0.0 && self.lr.floor <= self.lr.init) {
            return bad(format!("learning rates init {} floor {}", self.lr.init, self.lr.floor));
        }
        Ok(())
    }

    fn pair_mode(&self) -> PairMode {
        if self.stage == 1 {
            PairMode::Precompressed
        } else {
            PairMode::Online
        }
    }
}

/// Parameters, optimizer and progress of a run.
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub optimizer: AdamW,
    pub iteration: u64,
}

/// Builds the model and the starting state of a stage.
///
/// Stage 1 starts from a fresh model (seeded by `cfg.seed`) or resumes a
/// stage-1 checkpoint. Stage 2 requires a checkpoint: a stage-1 one starts
/// fine-tuning with a fresh optimizer; a stage-2 one resumes.
pub fn init_stage(
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    from: Option<&Checkpoint>,
) -> Result<(PromptCir, TrainState)> {
    cfg.validate()?;
    let (net, template) = PromptCir::build::<f32>(net_cfg, cfg.seed)?;
    let Some(ckpt) = from else {
        if cfg.stage == 2 {
            return Err(TrainError::StageGate("no stage-1 checkpoint given".into()));
        }
        let params = template.trainable();
        let optimizer = AdamW::new(cfg.optimizer, &params);
        return Ok((net, TrainState { params, optimizer, iteration: 0 }));
    };
    if &ckpt.config != net_cfg {
        return Err(TrainError::Config("checkpoint network config differs from the requested one".into()));
    }
    let params = ckpt.load_into(&template)?.trainable();
    match (cfg.stage, ckpt.training.stage) {
        (s, c) if s == c => {
            let step = ckpt.meta.get(STEP_KEY).copied().unwrap_or(0.0) as u64;
            let optimizer = AdamW::import(cfg.optimizer, &params, &ckpt.extra, step)
                .map_err(CheckpointError::Corrupt)?;
            Ok((net, TrainState { params, optimizer, iteration: ckpt.training.iteration }))
        }
        (2, 1) => {
            let optimizer = AdamW::new(cfg.optimizer, &params);
            Ok((net, TrainState { params, optimizer, iteration: 0 }))
        }
        (s, c) => Err(TrainError::StageGate(format!("cannot run stage {s} from a stage-{c} checkpoint"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// 1-based iteration.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub start_iteration: u64,
    pub end_iteration: u64,
    pub parameters: usize,
    pub loss_curve: Vec<LossPoint>,
}

/// Mean absolute error.
pub fn l1_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<Tensor<f32>, TensorError> {
    pred.sub(target)?.abs()?.mean()
}

/// Per-iteration random stream: independent of every other iteration, so a
/// resumed run draws the same samples as an uninterrupted one.
fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration + 1);
    rng
}

fn non_finite(step: u64) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Tensor(TensorError::NonFinite { op })
        | TrainError::Network(NetworkError::Layer(LayerError { source: TensorError::NonFinite { op }, .. })) => {
            TrainError::NonFinite { step, detail: format!("non-finite values produced by {op}") }
        }
        other => other,
    }
}

/// Snapshot of the current state.
pub fn checkpoint(net: &PromptCir, cfg: &TrainConfig, state: &TrainState) -> Checkpoint {
    let mut c = Checkpoint::from_params(
        &net.config,
        StageInfo { stage: cfg.stage, iteration: state.iteration },
        &state.params,
    );
    c.extra = state.optimizer.export(&state.params);
    c.meta.insert(STEP_KEY.into(), state.optimizer.steps_taken() as f64);
    c
}

/// Runs the remaining iterations of a stage, handing periodic and final
/// checkpoints to `sink`.
pub fn train(
    net: &PromptCir,
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &mut TrainData,
    mut sink: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = state.iteration;
    let mut curve = Vec::new();
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let step = it + 1;
        let lr = cfg.lr.lr(it, cfg.iterations);
        let loss = (|| -> Result<f64> {
            let mut rng = step_rng(cfg.seed, it);
            let batch = data.sample::<f32, _>(
                &mut rng,
                cfg.batch_size,
                cfg.crop,
                &cfg.qf_policy,
                cfg.augment,
                cfg.pair_mode(),
            )?;
            let out = net.forward(&state.params, &batch.input)?;
            let loss = l1_loss(&out, &batch.target)?;
            loss.backward()?;
            let value = loss.item() as f64;
            state.params = state.optimizer.step(&state.params, lr)?;
            Ok(value)
        })()
        .map_err(non_finite(step))?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, detail: format!("loss {loss}") });
        }
        state.iteration = step;
        if step == start + 1 || step.is_multiple_of(cfg.log_every.max(1)) || step == cfg.iterations {
            curve.push(LossPoint { step, lr, loss });
        }
        if (cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every)) || step == cfg.iterations {
            sink(&checkpoint(net, cfg, state))?;
        }
    }
    Ok(TrainReport {
        stage: cfg.stage,
        start_iteration: start,
        end_iteration: state.iteration,
        parameters: state.params.count(),
        loss_curve: curve,
    })
}

/// Everything `pcir train --config` needs. Relative paths are resolved
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkSpec,
    /// Manifest (`.jsonl`) or directory of clean training images.
    pub data: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "desk_stage1")]
    pub stage1: TrainConfig,
    #[serde(default = "desk_stage2")]
    pub stage2: TrainConfig,
}

fn desk_stage1() -> TrainConfig {
    TrainConfig::preset(Scale::Desk, 1)
}

fn desk_stage2() -> TrainConfig {
    TrainConfig::preset(Scale::Desk, 2)
}

/// A preset name (`"toy"`) or a full configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSpec {
    Preset(String),
    Config(NetworkConfig),
}

impl NetworkSpec {
    pub fn resolve(&self) -> Result<NetworkConfig> {
        match self {
            NetworkSpec::Config(c) => Ok(c.clone()),
            NetworkSpec::Preset(name) => {
                NetworkConfig::preset(name).ok_or_else(|| TrainError::Config(format!("unknown network preset {name:?}")))
            }
        }
    }
}

impl RunConfig {
    pub fn stage(&self, stage: u8) -> Result<&TrainConfig> {
        let cfg = match stage {
            1 => &self.stage1,
            2 => &self.stage2,
            s => return Err(TrainError::Config(format!("stage {s} (expected 1 or 2)"))),
        };
        if cfg.stage != stage {
            return Err(TrainError::Config(format!("stage{stage} section declares stage {}", cfg.stage)));
        }
        Ok(cfg)
    }
}

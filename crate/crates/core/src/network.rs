//! The four-level U-shaped restoration network with prompt-guided decoder.
//!
//! ```text
//! x ─ conv3×3 ─ L1 ─ down ─ L2 ─ down ─ L3 ─ down ─ L4
//!                │          │          │            │ up
//!                │          │          └─ concat ─ 1×1 ─ prompt ─ D3
//!                │          └──────────── concat ─ 1×1 ─ prompt ─ D2 ◄─ up
//!                └─────────────────────── concat ─ 1×1 ─ prompt ─ D1 ◄─ up
//!                                         refinement ─ conv3×3 ─ (+ x)
//! ```
//! Levels 1–2 (both paths) use hybrid attention groups when `use_rhag` is set,
//! transposed-attention transformer blocks otherwise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hat::{HatConfig, Rhag};
use crate::nn::{Conv2d, LayerContext, LayerError, ParamBuilder, ParamId, ParamStore};
use crate::prompt::{Pim, PromptBank, PromptBlock, PromptGenerator, StaticPrompt};
use crate::restormer::TransformerBlock;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Pad2d, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Number of prompt bases `N`.
    pub n_bases: usize,
    /// Prompt width `Ĉ` for decoder levels 1, 2, 3; `None` uses each level's width.
    #[serde(default)]
    pub dims: Option<[usize; 3]>,
    /// Side of the fixed-size prompts used when `use_dpm` is off.
    #[serde(default = "default_static_size")]
    pub static_size: usize,
}

fn default_static_size() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub multipliers: [usize; 4],
    /// Blocks per encoder level; decoder levels 1–3 mirror levels 1–3.
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub prompt: PromptConfig,
    pub use_rhag: bool,
    pub use_dpm: bool,
    pub refinement_depth: usize,
    pub ffn_expansion: f64,
    pub cab_scale: f64,
    pub overlap_ratio: f64,
    pub mlp_ratio: f64,
}

impl NetworkConfig {
    /// Full-scale layout with the lineage-default width `C = 48`.
    pub fn reference() -> Self {
        NetworkConfig {
            base_channels: 48,
            multipliers: [1, 2, 4, 8],
            depths: [4, 6, 6, 8],
            heads: [1, 2, 4, 8],
            window: 8,
            prompt: PromptConfig { n_bases: 5, dims: None, static_size: 16 },
            use_rhag: true,
            use_dpm: true,
            refinement_depth: 4,
            ffn_expansion: 2.66,
            cab_scale: 0.01,
            overlap_ratio: 0.5,
            mlp_ratio: 2.0,
        }
    }

    /// Desk-scale configuration.
    pub fn toy() -> Self {
        NetworkConfig {
            base_channels: 16,
            depths: [2, 2, 2, 2],
            prompt: PromptConfig { n_bases: 3, dims: None, static_size: 16 },
            ..Self::reference()
        }
    }

    /// Smallest configuration exercising every block type (gradient checks).
    pub fn micro() -> Self {
        NetworkConfig {
            base_channels: 4,
            depths: [1, 1, 1, 1],
            prompt: PromptConfig { n_bases: 2, dims: None, static_size: 4 },
            refinement_depth: 1,
            ..Self::reference()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "reference" => Some(Self::reference()),
            "toy" => Some(Self::toy()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels * self.multipliers[level]
    }

    pub fn prompt_dim(&self, level: usize) -> usize {
        self.prompt.dims.map_or_else(|| self.width(level), |d| d[level])
    }

    fn hat(&self, level: usize) -> HatConfig {
        HatConfig {
            window: self.window,
            cab_scale: self.cab_scale,
            overlap: self.overlap_ratio,
            mlp_ratio: self.mlp_ratio,
            ..HatConfig::new(self.width(level), self.heads[level])
        }
    }

    fn uses_rhag(&self, level: usize) -> bool {
        self.use_rhag && level < 2
    }

    /// Input sides are padded to a multiple of this: 8 for the three 2×
    /// downsamplings, and enough that both hybrid-attention levels tile into
    /// whole windows.
    pub fn size_multiple(&self) -> usize {
        if self.use_rhag {
            lcm(8, 2 * self.window)
        } else {
            8
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(NetworkError::Config(m));
        if self.base_channels == 0 {
            return err("base_channels must be positive".into());
        }
        if self.multipliers.windows(2).any(|w| w[1] != 2 * w[0]) || self.multipliers[0] == 0 {
            return err(format!("multipliers {:?} must double per level (pixel (un)shuffle)", self.multipliers));
        }
        if !(self.base_channels * self.multipliers[0]).is_multiple_of(2) {
            return err("level widths must be even for downsampling".into());
        }
        for l in 0..4 {
            let (w, h) = (self.width(l), self.heads[l]);
            if h == 0 || w % h != 0 {
                return err(format!("level {} width {w} not divisible by {h} heads", l + 1));
            }
        }
        for l in 0..3 {
            let pd = self.prompt_dim(l);
            if pd == 0 || !(self.width(l) + pd).is_multiple_of(self.heads[l]) {
                return err(format!("level {} prompt width {pd} incompatible with {} heads", l + 1, self.heads[l]));
            }
        }
        if self.prompt.n_bases == 0 || self.prompt.static_size == 0 {
            return err("prompt needs at least one base and a positive static size".into());
        }
        if !(self.ffn_expansion > 0.0) || !(self.mlp_ratio > 0.0) {
            return err("expansion ratios must be positive".into());
        }
        if self.use_rhag {
            if self.window < 2 || !self.window.is_multiple_of(2) {
                return err(format!("window {} must be even and >= 2", self.window));
            }
            if !(0.0..1.0).contains(&self.overlap_ratio) {
                return err(format!("overlap ratio {} outside [0, 1)", self.overlap_ratio));
            }
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Blocks of one U-shape level.
#[derive(Debug, Clone)]
pub enum Stage {
    Transformer(Vec<TransformerBlock>),
    Hybrid(Rhag),
}

impl Stage {
    fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cfg: &NetworkConfig, level: usize) -> Result<Self, TensorError> {
        if cfg.uses_rhag(level) {
            return Ok(Stage::Hybrid(Rhag::new(b, name, &cfg.hat(level), cfg.depths[level])?));
        }
        b.scoped(name, |b| {
            (0..cfg.depths[level])
                .map(|i| TransformerBlock::new(b, &i.to_string(), cfg.width(level), cfg.heads[level], cfg.ffn_expansion))
                .collect::<Result<Vec<_>, _>>()
                .map(Stage::Transformer)
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        match self {
            Stage::Transformer(blocks) => blocks.iter().try_fold(x.clone(), |y, blk| blk.forward(p, &y)),
            Stage::Hybrid(g) => g.forward(p, x),
        }
    }

    fn terminal_weights(&self) -> Vec<ParamId> {
        match self {
            Stage::Transformer(blocks) => blocks.iter().flat_map(|b| b.terminal_weights()).collect(),
            Stage::Hybrid(g) => g.terminal_weights(),
        }
    }
}

/// Layer structure; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PromptCir {
    pub config: NetworkConfig,
    pub patch_embed: Conv2d,
    pub encoders: Vec<Stage>,
    /// `downs[l]`: level `l+1` → `l+2`.
    pub downs: Vec<Conv2d>,
    /// `ups[l]`: level `l+2` → `l+1`.
    pub ups: Vec<Conv2d>,
    pub reduces: Vec<Conv2d>,
    pub prompts: Vec<PromptBlock>,
    pub decoders: Vec<Stage>,
    pub refinement: Vec<TransformerBlock>,
    pub output: Conv2d,
}

/// Parameter-name prefix of the prompt block guiding decoder level `l` (0-based).
pub fn prompt_scope(level: usize) -> String {
    format!("prompt_level{}", level + 1)
}

impl PromptCir {
    /// Builds the layer structure and draws initial parameters from `seed`.
    pub fn build<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let cfg = config;
        let mut b = ParamBuilder::<T>::new(seed);
        let c = cfg.base_channels;
        let patch_embed = Conv2d::same(&mut b, "patch_embed", 3, c, 3, false);
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for l in 0..4 {
            let name = format!("encoder_level{}", l + 1);
            encoders.push(Stage::new(&mut b, &name, cfg, l).layer(&name)?);
            if l < 3 {
                let w = cfg.width(l);
                downs.push(Conv2d::same(&mut b, &format!("down{}_{}", l + 1, l + 2), w, w / 2, 3, false));
            }
        }
        let (mut ups, mut reduces, mut prompts, mut decoders) = (vec![], vec![], vec![], vec![]);
        for l in (0..3).rev() {
            let (w, wn) = (cfg.width(l), cfg.width(l + 1));
            ups.push(Conv2d::same(&mut b, &format!("up{}_{}", l + 2, l + 1), wn, 2 * wn, 3, false));
            reduces.push(Conv2d::same(&mut b, &format!("reduce_chan_level{}", l + 1), 2 * w, w, 1, false));
            let scope = prompt_scope(l);
            let pd = cfg.prompt_dim(l);
            let block = b
                .scoped(&scope, |b| -> Result<PromptBlock, TensorError> {
                    let generator = if cfg.use_dpm {
                        PromptGenerator::Dynamic(PromptBank::new(b, PromptBlock::GENERATOR, w, cfg.prompt.n_bases, pd)?)
                    } else {
                        PromptGenerator::Static(StaticPrompt::new(
                            b,
                            PromptBlock::GENERATOR,
                            w,
                            cfg.prompt.n_bases,
                            pd,
                            cfg.prompt.static_size,
                        )?)
                    };
                    Ok(PromptBlock { generator, pim: Pim::new(b, "pim", w, pd, cfg.heads[l])? })
                })
                .layer(&scope)?;
            prompts.push(block);
            let name = format!("decoder_level{}", l + 1);
            decoders.push(Stage::new(&mut b, &name, cfg, l).layer(&name)?);
        }
        // stored in level order (index 0 = level 1)
        ups.reverse();
        reduces.reverse();
        prompts.reverse();
        decoders.reverse();
        let refinement = b
            .scoped("refinement", |b| {
                (0..cfg.refinement_depth)
                    .map(|i| TransformerBlock::new(b, &i.to_string(), c, cfg.heads[0], cfg.ffn_expansion))
                    .collect::<Result<Vec<_>, _>>()
            })
            .layer("refinement")?;
        let output = Conv2d::same(&mut b, "output", c, 3, 3, true);
        let net = PromptCir {
            config: cfg.clone(),
            patch_embed,
            encoders,
            downs,
            ups,
            reduces,
            prompts,
            decoders,
            refinement,
            output,
        };
        Ok((net, b.finish()))
    }

    /// Restored image and the head-conv branch (`restored − input` before
    /// cropping), without clamping.
    pub fn forward_parts<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w) = match *x.shape() {
            [_, 3, h, w] if h >= 16 && w >= 16 => (h, w),
            _ => return Err(NetworkError::Input(format!("expected [B, 3, H>=16, W>=16], got {:?}", x.shape()))),
        };
        let pad = Pad2d::to_multiple(h, w, self.config.size_multiple());
        let xp = if pad.is_zero() { x.clone() } else { x.reflect_pad(pad).layer("input_pad")? };

        let mut feat = self.patch_embed.forward(p, &xp).layer("patch_embed")?;
        let mut skips = Vec::with_capacity(3);
        for l in 0..4 {
            feat = self.encoders[l].forward(p, &feat).layer(&format!("encoder_level{}", l + 1))?;
            if l < 3 {
                skips.push(feat.clone());
                let name = format!("down{}_{}", l + 1, l + 2);
                feat = self.downs[l].forward(p, &feat).and_then(|t| t.pixel_unshuffle(2)).layer(&name)?;
            }
        }
        for l in (0..3).rev() {
            let up = format!("up{}_{}", l + 2, l + 1);
            feat = self.ups[l].forward(p, &feat).and_then(|t| t.pixel_shuffle(2)).layer(&up)?;
            let reduce = format!("reduce_chan_level{}", l + 1);
            feat = Tensor::concat(&[feat, skips[l].clone()], 1)
                .and_then(|t| self.reduces[l].forward(p, &t))
                .layer(&reduce)?;
            feat = self.prompts[l].forward(p, &feat).layer(&prompt_scope(l))?;
            feat = self.decoders[l].forward(p, &feat).layer(&format!("decoder_level{}", l + 1))?;
        }
        for (i, blk) in self.refinement.iter().enumerate() {
            feat = blk.forward(p, &feat).layer(&format!("refinement.{i}"))?;
        }
        let mut branch = self.output.forward(p, &feat).layer("output")?;
        if !pad.is_zero() {
            branch = branch.crop(0, 0, h, w).layer("output_crop")?;
        }
        let restored = x.add(&branch).layer("global_residual")?;
        Ok((restored, branch))
    }

    /// Training-mode forward: no clamping.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_parts(p, x)?.0)
    }

    /// Inference: no gradient recording, output clamped to `[0, 1]`.
    pub fn restore<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = no_grad(|| self.forward(p, x))?;
        let clamped = y.data().iter().map(|v| v.max(T::zero()).min(T::one())).collect();
        Ok(Tensor::from_vec(y.shape(), clamped).layer("clamp")?)
    }

    /// Output weights of every residual branch, including the head conv.
    pub fn terminal_weights(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.encoders.iter().chain(&self.decoders).flat_map(Stage::terminal_weights).collect();
        for pb in &self.prompts {
            v.extend(pb.pim.block.terminal_weights());
        }
        v.extend(self.refinement.iter().flat_map(|b| b.terminal_weights()));
        v.push(self.output.weight);
        v
    }

    /// Parameters owned by the prompt generators (bases or static prompts,
    /// their mixing layers and fusion convs).
    pub fn prompt_generator_params<T: Scalar>(&self, p: &ParamStore<T>) -> usize {
        (0..3).map(|l| p.count_prefix(&format!("{}.{}.", prompt_scope(l), PromptBlock::GENERATOR))).sum()
    }
}

/// Number of learnable scalars.
pub fn count_params<T: Scalar>(p: &ParamStore<T>) -> usize {
    p.count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_validate() {
        for name in ["reference", "toy", "micro"] {
            NetworkConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(NetworkConfig::preset("huge").is_none());
        let bad = NetworkConfig { heads: [3, 2, 4, 8], ..NetworkConfig::toy() };
        assert!(matches!(bad.validate(), Err(NetworkError::Config(_))));
        assert_eq!(NetworkConfig::toy().size_multiple(), 16);
        assert_eq!(NetworkConfig { use_rhag: false, ..NetworkConfig::toy() }.size_multiple(), 8);
    }

    #[test]
    fn config_json_roundtrip() {
        let c = NetworkConfig::toy();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<NetworkConfig>(&s).unwrap(), c);
    }

    #[test]
    fn micro_forward_shapes() {
        let (net, ps) = PromptCir::build::<f32>(&NetworkConfig::micro(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (h, w) in [(16, 16), (21, 17)] {
            let x = Tensor::rand_uniform(&[1, 3, h, w], 0.0, 1.0, &mut rng);
            assert_eq!(net.forward(&ps, &x).unwrap().shape(), &[1, 3, h, w]);
        }
        let tiny = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        assert!(matches!(net.forward(&ps, &tiny), Err(NetworkError::Input(_))));
    }

    #[test]
    fn layer_names_in_errors() {
        let (net, ps) = PromptCir::build::<f32>(&NetworkConfig::micro(), 0).unwrap();
        let mut ps = ps;
        let id = ps.find("patch_embed.weight").unwrap();
        let n = ps.get(id).numel();
        ps.set(id, vec![1e30; n]).unwrap();
        let x = Tensor::<f32>::full(&[1, 3, 16, 16], 1e10);
        let err = net.forward(&ps, &x).unwrap_err().to_string();
        assert!(err.contains("layer "), "{err}");
    }
}

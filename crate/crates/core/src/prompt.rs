//! Prompt generation and interaction for the decoder stages.
//!
//! The dynamic generator composes a per-pixel prompt from `N` learned
//! `1 × 1 × Ĉ` bases, weighted by a softmax over a pointwise projection of the
//! features: `P = Conv3×3(Σₙ wₙ ⊙ Pₙ)`, `w = Softmax(Conv1×1(F))`. Because the
//! bases carry no spatial extent, prompts exist at any resolution.

use crate::nn::{Conv2d, Linear, ParamBuilder, ParamId, ParamStore};
use crate::restormer::{TransformerBlock, FFN_EXPANSION};
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Dynamic prompt module: `N` bases, a `C → N` weight generator and a `3 × 3`
/// fusion convolution.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub n_bases: usize,
    pub in_dim: usize,
    pub prompt_dim: usize,
    /// `[N, Ĉ]`.
    pub bases: ParamId,
    pub weight_gen: Conv2d,
    pub fuse: Conv2d,
}

impl PromptBank {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: &str,
        in_dim: usize,
        n_bases: usize,
        prompt_dim: usize,
    ) -> Result<Self> {
        if n_bases == 0 || prompt_dim == 0 {
            return Err(TensorError::Argument { op: "dpm", detail: format!("N = {n_bases}, prompt dim = {prompt_dim}") });
        }
        Ok(b.scoped(name, |b| PromptBank {
            n_bases,
            in_dim,
            prompt_dim,
            bases: b.uniform("bases", &[n_bases, prompt_dim], 1.0 / (prompt_dim as f64).sqrt()),
            weight_gen: Conv2d::same(b, "weight_gen", in_dim, n_bases, 1, true),
            fuse: Conv2d::same(b, "fuse", prompt_dim, prompt_dim, 3, true),
        }))
    }

    /// Softmax weights `[B, N, H, W]`.
    pub fn weights<T: Scalar>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        if f.ndim() != 4 || f.dim(1) != self.in_dim {
            return Err(TensorError::Shape {
                op: "dpm",
                detail: format!("features {:?}, bank expects {} channels", f.shape(), self.in_dim),
            });
        }
        self.weight_gen.forward(p, f)?.softmax(1)
    }

    /// Composed prompt before fusion, `[B, Ĉ, H, W]`.
    pub fn compose<T: Scalar>(&self, p: &ParamStore<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n, h, wd) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let bases_t = p.get(self.bases).transpose_last()?;
        bases_t.matmul(&w.reshape(&[b, n, h * wd])?)?.reshape(&[b, self.prompt_dim, h, wd])
    }

    /// Prompt `[B, Ĉ, H, W]` and the weights that produced it.
    pub fn forward_with_weights<T: Scalar>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let w = self.weights(p, f)?;
        let prompt = self.fuse.forward(p, &self.compose(p, &w)?)?;
        Ok((prompt, w))
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_weights(p, f)?.0)
    }
}

/// Fixed-size learned prompts, mixed by a softmax over globally pooled
/// features and bilinearly resized to the feature map.
#[derive(Debug, Clone)]
pub struct StaticPrompt {
    pub n_prompts: usize,
    pub prompt_dim: usize,
    pub size: usize,
    /// `[N, Ĉ, S, S]`.
    pub prompts: ParamId,
    pub mix: Linear,
    pub fuse: Conv2d,
}

impl StaticPrompt {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<T>,
        name: &str,
        in_dim: usize,
        n_prompts: usize,
        prompt_dim: usize,
        size: usize,
    ) -> Result<Self> {
        if n_prompts == 0 || prompt_dim == 0 || size == 0 {
            return Err(TensorError::Argument {
                op: "static_prompt",
                detail: format!("N = {n_prompts}, prompt dim = {prompt_dim}, size = {size}"),
            });
        }
        Ok(b.scoped(name, |b| StaticPrompt {
            n_prompts,
            prompt_dim,
            size,
            prompts: b.uniform("prompts", &[n_prompts, prompt_dim, size, size], 1.0 / (prompt_dim as f64).sqrt()),
            mix: Linear::new(b, "mix", in_dim, n_prompts, true),
            fuse: Conv2d::same(b, "fuse", prompt_dim, prompt_dim, 3, true),
        }))
    }

    /// Mixed prompt at its stored `S × S` size, `[B, Ĉ, S, S]`.
    pub fn mixed<T: Scalar>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, c) = (f.dim(0), f.dim(1));
        let pooled = f.mean_axes(&[2, 3])?.reshape(&[b, c])?;
        let w = self.mix.forward(p, &pooled)?.softmax(1)?;
        let flat = p.get(self.prompts).reshape(&[self.n_prompts, self.prompt_dim * self.size * self.size])?;
        w.matmul(&flat)?.reshape(&[b, self.prompt_dim, self.size, self.size])
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let m = self.mixed(p, f)?;
        let (h, w) = (f.dim(2), f.dim(3));
        let resized = if (h, w) == (self.size, self.size) { m } else { m.interpolate_bilinear(h, w)? };
        self.fuse.forward(p, &resized)
    }
}

/// Prompt interaction: `Conv1×1(TransformerBlock([F; P]))` back to `C`
/// channels.
#[derive(Debug, Clone)]
pub struct Pim {
    pub dim: usize,
    pub block: TransformerBlock,
    pub reduce: Conv2d,
}

impl Pim {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, dim: usize, prompt_dim: usize, heads: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Pim {
                dim,
                block: TransformerBlock::new(b, "block", dim + prompt_dim, heads, FFN_EXPANSION)?,
                reduce: Conv2d::same(b, "reduce", dim + prompt_dim, dim, 1, false),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, f: &Tensor<T>, prompt: &Tensor<T>) -> Result<Tensor<T>> {
        if f.ndim() != 4 || prompt.ndim() != 4 || f.shape()[2..] != prompt.shape()[2..] || f.dim(0) != prompt.dim(0) {
            return Err(TensorError::Shape {
                op: "pim",
                detail: format!("features {:?} vs prompt {:?}", f.shape(), prompt.shape()),
            });
        }
        let joint = Tensor::concat(&[f.clone(), prompt.clone()], 1)?;
        self.reduce.forward(p, &self.block.forward(p, &joint)?)
    }
}

#[derive(Debug, Clone)]
pub enum PromptGenerator {
    Dynamic(PromptBank),
    Static(StaticPrompt),
}

/// A prompt generator followed by interaction with the features.
#[derive(Debug, Clone)]
pub struct PromptBlock {
    pub generator: PromptGenerator,
    pub pim: Pim,
}

impl PromptBlock {
    /// Parameter-name prefix of the generator inside this block's scope.
    pub const GENERATOR: &'static str = "generator";

    pub fn prompt<T: Scalar>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.generator {
            PromptGenerator::Dynamic(bank) => bank.forward(p, f),
            PromptGenerator::Static(s) => s.forward(p, f),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.pim.forward(p, f, &self.prompt(p, f)?)
    }
}

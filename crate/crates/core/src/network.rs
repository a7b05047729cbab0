//! Transformer encoder, masked-patch decoder, regression head and losses.
//!
//! Encoder and decoder blocks are pre-norm ViT blocks:
//! `x + proj(attn(ln1(x)))` followed by `x + fc2(gelu(fc1(ln2(x))))`.
//! Linear weights are stored `in × out` and applied as `x · W + b`.

use std::borrow::Cow;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::patch_mask::{positional_embedding, MaskPlan, PatchGrid};
use crate::rng;
use crate::tensor::Matrix;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for ModelConfig {
    /// 1024-wide, 12-block encoder with 16 heads and a 512-wide, 8-block decoder.
    fn default() -> Self {
        ModelConfig {
            n_channels: 2048,
            patch_size: 16,
            embed_dim: 1024,
            encoder_depth: 12,
            encoder_heads: 16,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mlp_ratio: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_channels", self.n_channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("encoder_heads", self.encoder_heads),
            ("decoder_dim", self.decoder_dim),
            ("decoder_heads", self.decoder_heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model {name} must be at least 1")));
        }
        PatchGrid::new(self.n_channels, self.patch_size)?;
        if !self.embed_dim.is_multiple_of(self.encoder_heads) {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} is not divisible by encoder_heads {}",
                self.embed_dim, self.encoder_heads
            )));
        }
        if !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            return Err(Error::InvalidArgument(format!(
                "decoder_dim {} is not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            )));
        }
        if !self.embed_dim.is_multiple_of(2) || !self.decoder_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "embed_dim and decoder_dim must be even for sine-cosine positions".into(),
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0)
            || self.mlp_hidden(self.embed_dim.min(self.decoder_dim)) == 0
        {
            return Err(Error::InvalidArgument(format!("invalid mlp_ratio {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.n_channels, self.patch_size).expect("validated config")
    }

    pub fn n_patches(&self) -> usize {
        self.n_channels / self.patch_size
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (dim as f64 * self.mlp_ratio) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder<T> {
    pub patch_embed: Linear<T>,
    pub cls_token: T,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder<T> {
    pub embed: Linear<T>,
    pub mask_token: T,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
    pub pred: Linear<T>,
}

/// The full parameter tree. `T` is [`Matrix`] for values and gradients, and
/// [`Var`] while a forward pass is being recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub encoder: Encoder<T>,
    pub decoder: Option<Decoder<T>>,
    pub head: Option<Linear<T>>,
}

pub type ModelParameters = Params<Matrix>;

type Named<'s, T> = Vec<(String, &'s T)>;

impl<T> Linear<T> {
    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
    fn visit<'s>(&'s self, prefix: &str, out: &mut Named<'s, T>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }
    fn visit_mut<'s>(&'s mut self, out: &mut Vec<&'s mut T>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<T> Norm<T> {
    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
    fn visit<'s>(&'s self, prefix: &str, out: &mut Named<'s, T>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }
    fn visit_mut<'s>(&'s mut self, out: &mut Vec<&'s mut T>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

impl<T> Block<T> {
    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Block<U> {
        Block {
            norm1: self.norm1.map(f),
            qkv: self.qkv.map(f),
            proj: self.proj.map(f),
            norm2: self.norm2.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
    fn visit<'s>(&'s self, prefix: &str, out: &mut Named<'s, T>) {
        self.norm1.visit(&format!("{prefix}.norm1"), out);
        self.qkv.visit(&format!("{prefix}.attn.qkv"), out);
        self.proj.visit(&format!("{prefix}.attn.proj"), out);
        self.norm2.visit(&format!("{prefix}.norm2"), out);
        self.fc1.visit(&format!("{prefix}.mlp.fc1"), out);
        self.fc2.visit(&format!("{prefix}.mlp.fc2"), out);
    }
    fn visit_mut<'s>(&'s mut self, out: &mut Vec<&'s mut T>) {
        self.norm1.visit_mut(out);
        self.qkv.visit_mut(out);
        self.proj.visit_mut(out);
        self.norm2.visit_mut(out);
        self.fc1.visit_mut(out);
        self.fc2.visit_mut(out);
    }
}

impl<T> Encoder<T> {
    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Encoder<U> {
        Encoder {
            patch_embed: self.patch_embed.map(f),
            cls_token: f(&self.cls_token),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            norm: self.norm.map(f),
        }
    }
    fn visit<'s>(&'s self, out: &mut Named<'s, T>) {
        self.patch_embed.visit("encoder.patch_embed", out);
        out.push(("encoder.cls_token".into(), &self.cls_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("encoder.blocks.{i}"), out);
        }
        self.norm.visit("encoder.norm", out);
    }
    fn visit_mut<'s>(&'s mut self, out: &mut Vec<&'s mut T>) {
        self.patch_embed.visit_mut(out);
        out.push(&mut self.cls_token);
        for b in &mut self.blocks {
            b.visit_mut(out);
        }
        self.norm.visit_mut(out);
    }
}

impl<T> Decoder<T> {
    fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Decoder<U> {
        Decoder {
            embed: self.embed.map(f),
            mask_token: f(&self.mask_token),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            norm: self.norm.map(f),
            pred: self.pred.map(f),
        }
    }
    fn visit<'s>(&'s self, out: &mut Named<'s, T>) {
        self.embed.visit("decoder.embed", out);
        out.push(("decoder.mask_token".into(), &self.mask_token));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("decoder.blocks.{i}"), out);
        }
        self.norm.visit("decoder.norm", out);
        self.pred.visit("decoder.pred", out);
    }
    fn visit_mut<'s>(&'s mut self, out: &mut Vec<&'s mut T>) {
        self.embed.visit_mut(out);
        out.push(&mut self.mask_token);
        for b in &mut self.blocks {
            b.visit_mut(out);
        }
        self.norm.visit_mut(out);
        self.pred.visit_mut(out);
    }
}

impl<T> Params<T> {
    /// Apply `f` to every tensor in canonical order (the order of [`Params::named`]).
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&'s T) -> U) -> Params<U> {
        Params {
            encoder: self.encoder.map(f),
            decoder: self.decoder.as_ref().map(|d| d.map(f)),
            head: self.head.as_ref().map(|h| h.map(f)),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.encoder.visit(&mut out);
        if let Some(d) = &self.decoder {
            d.visit(&mut out);
        }
        if let Some(h) = &self.head {
            h.visit("head", &mut out);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.encoder.visit_mut(&mut out);
        if let Some(d) = &mut self.decoder {
            d.visit_mut(&mut out);
        }
        if let Some(h) = &mut self.head {
            h.visit_mut(&mut out);
        }
        out
    }

    /// Rebuild a tree with this tree's structure from values in canonical order.
    pub fn rebuild<U>(&self, values: Vec<U>) -> Result<Params<U>> {
        let expected = self.named().len();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{} tensors supplied for a tree of {expected}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        Ok(self.map(&mut |_| it.next().expect("length checked")))
    }
}

#[derive(Clone, Copy)]
enum Role {
    Weight,
    Bias,
    Token,
    Gamma,
    Beta,
}

fn build_linear(fill: &mut impl FnMut(Role, usize, usize) -> Matrix, i: usize, o: usize) -> Linear<Matrix> {
    Linear {
        weight: fill(Role::Weight, i, o),
        bias: fill(Role::Bias, 1, o),
    }
}

fn build_norm(fill: &mut impl FnMut(Role, usize, usize) -> Matrix, d: usize) -> Norm<Matrix> {
    Norm {
        gamma: fill(Role::Gamma, 1, d),
        beta: fill(Role::Beta, 1, d),
    }
}

fn build_block(fill: &mut impl FnMut(Role, usize, usize) -> Matrix, d: usize, hidden: usize) -> Block<Matrix> {
    Block {
        norm1: build_norm(fill, d),
        qkv: build_linear(fill, d, 3 * d),
        proj: build_linear(fill, d, d),
        norm2: build_norm(fill, d),
        fc1: build_linear(fill, d, hidden),
        fc2: build_linear(fill, hidden, d),
    }
}

fn build_params(
    cfg: &ModelConfig,
    with_decoder: bool,
    with_head: bool,
    fill: &mut impl FnMut(Role, usize, usize) -> Matrix,
) -> ModelParameters {
    let d = cfg.embed_dim;
    let encoder = Encoder {
        patch_embed: build_linear(fill, cfg.patch_size, d),
        cls_token: fill(Role::Token, 1, d),
        blocks: (0..cfg.encoder_depth)
            .map(|_| build_block(fill, d, cfg.mlp_hidden(d)))
            .collect(),
        norm: build_norm(fill, d),
    };
    let decoder = with_decoder.then(|| {
        let dd = cfg.decoder_dim;
        Decoder {
            embed: build_linear(fill, d, dd),
            mask_token: fill(Role::Token, 1, dd),
            blocks: (0..cfg.decoder_depth)
                .map(|_| build_block(fill, dd, cfg.mlp_hidden(dd)))
                .collect(),
            norm: build_norm(fill, dd),
            pred: build_linear(fill, dd, cfg.patch_size),
        }
    });
    let head = with_head.then(|| build_linear(fill, d, 1));
    Params { encoder, decoder, head }
}

pub(crate) fn trunc_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn initializer(rng: &mut impl Rng) -> impl FnMut(Role, usize, usize) -> Matrix + '_ {
    move |role, r, c| match role {
        Role::Weight | Role::Token => trunc_normal(rng, r, c, INIT_STD),
        Role::Bias | Role::Beta => Matrix::zeros(r, c),
        Role::Gamma => Matrix::filled(r, c, 1.0),
    }
}

impl ModelParameters {
    /// Truncated-normal (σ = 0.02) weights and tokens, zero biases, unit
    /// layer-norm scales.
    pub fn init(cfg: &ModelConfig, with_decoder: bool, with_head: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::rng_for(seed, &[rng::stream::INIT]);
        let params = build_params(cfg, with_decoder, with_head, &mut initializer(&mut rng));
        Ok(params)
    }

    /// Shape template (all zeros) for a config.
    pub fn zeros(cfg: &ModelConfig, with_decoder: bool, with_head: bool) -> Self {
        build_params(cfg, with_decoder, with_head, &mut |_, r, c| Matrix::zeros(r, c))
    }

    pub fn zeros_like(&self) -> Self {
        self.map(&mut |m| Matrix::zeros(m.rows(), m.cols()))
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// A fresh regression head drawn from its own seed stream.
    pub fn new_head(cfg: &ModelConfig, seed: u64) -> Linear<Matrix> {
        let mut rng = rng::rng_for(seed, &[rng::stream::HEAD_INIT]);
        let head = build_linear(&mut initializer(&mut rng), cfg.embed_dim, 1);
        head
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let template = ModelParameters::zeros(cfg, self.decoder.is_some(), self.head.is_some());
        let (mine, theirs) = (self.named(), template.named());
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "parameter tree has {} tensors, config implies {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((name, m), (tname, t)) in mine.iter().zip(&theirs) {
            if name != tname || m.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, config implies {tname} {:?}",
                    m.shape(),
                    t.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        Ok(())
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParameters, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += scale * y;
            }
        }
    }
}

/// What the encoder sees.
#[derive(Clone, Copy, Debug)]
pub enum EncoderMode<'a> {
    /// Only the listed (kept) patches, in the given order; no class token.
    Pretrain { kept: &'a [usize] },
    /// Every patch, with the class token prepended at row 0.
    Finetune,
}

/// Parameters plus the fixed positional tables derived from the config.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParameters,
    encoder_pos: Matrix,
    decoder_pos: Matrix,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        let n = config.n_patches();
        // Row 0 of the encoder table is reserved for the class token and is
        // all zeros, so only the patch rows are kept here.
        let full = positional_embedding(n, config.embed_dim, true)?;
        let encoder_pos = full.gather_rows(&(1..=n).collect::<Vec<_>>());
        let decoder_pos = positional_embedding(n, config.decoder_dim, false)?;
        Ok(Model {
            config,
            params,
            encoder_pos,
            decoder_pos,
        })
    }

    pub fn init_pretrain(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, true, false, seed)?;
        Model::new(config, params)
    }

    pub fn init_regression(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, false, true, seed)?;
        Model::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParameters {
        &self.params
    }

    /// Mutable access for optimizer updates; shapes must not change.
    pub fn params_mut(&mut self) -> &mut ModelParameters {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParameters {
        self.params
    }

    pub fn has_decoder(&self) -> bool {
        self.params.decoder.is_some()
    }

    pub fn has_head(&self) -> bool {
        self.params.head.is_some()
    }

    /// Swap the decoder for a regression head, as done at fine-tuning.
    pub fn into_regression(mut self, head: Linear<Matrix>) -> Result<Self> {
        self.params.decoder = None;
        self.params.head = Some(head);
        self.params.check_shapes(&self.config)?;
        Ok(self)
    }

    fn check_patches(&self, patches: &Matrix) -> Result<()> {
        let want = (self.config.n_patches(), self.config.patch_size);
        if patches.shape() != want {
            return Err(Error::Shape(format!(
                "expected {}x{} patches, got {}x{}",
                want.0,
                want.1,
                patches.rows(),
                patches.cols()
            )));
        }
        Ok(())
    }

    fn register<'a>(&'a self, g: &mut Graph<'a>, requires_grad: bool) -> Params<Var> {
        self.params.map(&mut |m| g.leaf(m, requires_grad))
    }

    fn encode<'a>(&'a self, g: &mut Graph<'a>, pv: &Params<Var>, patches: Var, mode: EncoderMode<'_>) -> Result<Var> {
        let enc = &pv.encoder;
        let mut x = match mode {
            EncoderMode::Pretrain { kept } => {
                if let Some(&bad) = kept.iter().find(|&&p| p >= self.config.n_patches()) {
                    return Err(Error::Shape(format!("kept patch index {bad} out of range")));
                }
                let visible = g.gather_rows(patches, kept.to_vec());
                let tokens = g.linear(visible, enc.patch_embed.weight, enc.patch_embed.bias);
                let pos = g.leaf_owned(self.encoder_pos.gather_rows(kept), false);
                g.add(tokens, pos)
            }
            EncoderMode::Finetune => {
                let tokens = g.linear(patches, enc.patch_embed.weight, enc.patch_embed.bias);
                let pos = g.leaf(&self.encoder_pos, false);
                let tokens = g.add(tokens, pos);
                // cls position embedding is the zero row
                g.concat_rows(enc.cls_token, tokens)
            }
        };
        for (i, block) in enc.blocks.iter().enumerate() {
            x = transformer_block(g, block, x, self.config.encoder_heads);
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite(format!("encoder block {i} activations")));
            }
        }
        Ok(g.layer_norm(x, enc.norm.gamma, enc.norm.beta))
    }

    fn decode<'a>(&'a self, g: &mut Graph<'a>, pv: &Params<Var>, latents: Var, plan: &MaskPlan) -> Result<Var> {
        let dec = pv
            .decoder
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no decoder (fine-tuned checkpoint?)".into()))?;
        if plan.n_patches != self.config.n_patches() {
            return Err(Error::Shape(format!(
                "mask plan covers {} patches, model has {}",
                plan.n_patches,
                self.config.n_patches()
            )));
        }
        if g.value(latents).rows() != plan.kept.len() {
            return Err(Error::Shape(format!(
                "{} latent tokens for {} kept patches",
                g.value(latents).rows(),
                plan.kept.len()
            )));
        }
        let x = g.linear(latents, dec.embed.weight, dec.embed.bias);
        let x = g.scatter_rows(x, dec.mask_token, plan.kept_slots());
        let pos = g.leaf(&self.decoder_pos, false);
        let mut x = g.add(x, pos);
        for (i, block) in dec.blocks.iter().enumerate() {
            x = transformer_block(g, block, x, self.config.decoder_heads);
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite(format!("decoder block {i} activations")));
            }
        }
        let x = g.layer_norm(x, dec.norm.gamma, dec.norm.beta);
        Ok(g.linear(x, dec.pred.weight, dec.pred.bias))
    }

    fn head<'a>(&'a self, g: &mut Graph<'a>, pv: &Params<Var>, latents: Var) -> Result<Var> {
        let head = pv
            .head
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no regression head (pretrain-only checkpoint?)".into()))?;
        let cls = g.gather_rows(latents, vec![0]);
        Ok(g.linear(cls, head.weight, head.bias))
    }

    /// Latent tokens for the given patches (`n_patches × patch_size`).
    pub fn encoder_forward(&self, patches: &Matrix, mode: EncoderMode<'_>) -> Result<Matrix> {
        self.check_patches(patches)?;
        let mut g = Graph::new();
        let pv = self.register(&mut g, false);
        let x = g.leaf(patches, false);
        let z = self.encode(&mut g, &pv, x, mode)?;
        Ok(g.value(z).clone())
    }

    /// Reconstructed patches (`n_patches × patch_size`) from pretrain-mode latents.
    pub fn decoder_forward(&self, latents: &Matrix, plan: &MaskPlan) -> Result<Matrix> {
        let mut g = Graph::new();
        let pv = self.register(&mut g, false);
        let z = g.leaf(latents, false);
        let out = self.decode(&mut g, &pv, z, plan)?;
        Ok(g.value(out).clone())
    }

    pub fn reconstruct(&self, patches: &Matrix, plan: &MaskPlan) -> Result<Matrix> {
        let latents = self.encoder_forward(patches, EncoderMode::Pretrain { kept: &plan.kept })?;
        self.decoder_forward(&latents, plan)
    }

    /// Normalized-target prediction for one spectrum.
    pub fn regression_forward(&self, patches: &Matrix) -> Result<f64> {
        self.check_patches(patches)?;
        let mut g = Graph::new();
        let pv = self.register(&mut g, false);
        let x = g.leaf(patches, false);
        let z = self.encode(&mut g, &pv, x, EncoderMode::Finetune)?;
        let y = self.head(&mut g, &pv, z)?;
        Ok(g.value(y).get(0, 0))
    }

    fn collect(&self, grads: &mut Gradients, pv: &Params<Var>) -> Result<ModelParameters> {
        let named = self.params.named();
        let mut out = Vec::with_capacity(named.len());
        for ((name, value), var) in named.into_iter().zip(pv.tensors()) {
            let grad = grads
                .take(*var)
                .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()));
            if !grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            out.push(grad);
        }
        self.params.rebuild(out)
    }

    /// Masked reconstruction loss for one spectrum and its gradient with
    /// respect to every parameter, scaled by `weight`.
    pub fn pretrain_loss_grad(&self, patches: &Matrix, plan: &MaskPlan, weight: f64) -> Result<(f64, ModelParameters)> {
        self.check_patches(patches)?;
        if plan.masked.is_empty() {
            return Err(Error::InvalidArgument(
                "mask plan masks no patches; loss undefined".into(),
            ));
        }
        let mut g = Graph::new();
        let pv = self.register(&mut g, true);
        let x = g.leaf(patches, false);
        let z = self.encode(&mut g, &pv, x, EncoderMode::Pretrain { kept: &plan.kept })?;
        let recon = self.decode(&mut g, &pv, z, plan)?;
        let loss = g.masked_mse(recon, Cow::Borrowed(patches), plan.masked.clone());
        let value = g.value(loss).get(0, 0);
        let mut grads = g.backward(loss, weight);
        Ok((value, self.collect(&mut grads, &pv)?))
    }

    /// Squared error of one normalized prediction and its parameter gradient,
    /// scaled by `weight` (use `1 / batch` for a batch mean).
    pub fn regression_loss_grad(&self, patches: &Matrix, target: f64, weight: f64) -> Result<(f64, ModelParameters)> {
        self.check_patches(patches)?;
        let mut g = Graph::new();
        let pv = self.register(&mut g, true);
        let x = g.leaf(patches, false);
        let z = self.encode(&mut g, &pv, x, EncoderMode::Finetune)?;
        let y = self.head(&mut g, &pv, z)?;
        let loss = g.squared_error(y, target);
        let value = g.value(loss).get(0, 0);
        let mut grads = g.backward(loss, weight);
        Ok((value, self.collect(&mut grads, &pv)?))
    }

    /// `∂(ŷ − target)² / ∂patches` plus the prediction `ŷ`.
    pub fn regression_input_gradient(&self, patches: &Matrix, target: f64) -> Result<(f64, Matrix)> {
        self.check_patches(patches)?;
        let mut g = Graph::new();
        let pv = self.register(&mut g, false);
        let x = g.leaf(patches, true);
        let z = self.encode(&mut g, &pv, x, EncoderMode::Finetune)?;
        let y = self.head(&mut g, &pv, z)?;
        let pred = g.value(y).get(0, 0);
        let loss = g.squared_error(y, target);
        let mut grads = g.backward(loss, 1.0);
        let grad = grads
            .take(x)
            .unwrap_or_else(|| Matrix::zeros(patches.rows(), patches.cols()));
        if !grad.is_finite() {
            return Err(Error::NonFinite("input gradient".into()));
        }
        Ok((pred, grad))
    }
}

fn transformer_block(g: &mut Graph<'_>, b: &Block<Var>, x: Var, heads: usize) -> Var {
    let h = g.layer_norm(x, b.norm1.gamma, b.norm1.beta);
    let qkv = g.linear(h, b.qkv.weight, b.qkv.bias);
    let a = g.attention(qkv, heads);
    let a = g.linear(a, b.proj.weight, b.proj.bias);
    let x = g.add(x, a);
    let h = g.layer_norm(x, b.norm2.gamma, b.norm2.beta);
    let h = g.linear(h, b.fc1.weight, b.fc1.bias);
    let h = g.gelu(h);
    let h = g.linear(h, b.fc2.weight, b.fc2.bias);
    g.add(x, h)
}

/// Mean squared error over the masked patches' values only.
pub fn masked_mse_loss(reconstruction: &Matrix, target: &Matrix, plan: &MaskPlan) -> Result<f64> {
    if reconstruction.shape() != target.shape() || reconstruction.rows() != plan.n_patches {
        return Err(Error::Shape(format!(
            "reconstruction {:?}, target {:?}, plan over {} patches",
            reconstruction.shape(),
            target.shape(),
            plan.n_patches
        )));
    }
    if plan.masked.is_empty() {
        return Err(Error::InvalidArgument(
            "mask plan masks no patches; loss undefined".into(),
        ));
    }
    let mut sum = 0.0;
    for &p in &plan.masked {
        for (a, b) in reconstruction.row(p).iter().zip(target.row(p)) {
            sum += (a - b) * (a - b);
        }
    }
    Ok(sum / (plan.masked.len() * target.cols()) as f64)
}

pub fn regression_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// `2 (pred − target) / batch`.
pub fn regression_loss_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect())
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

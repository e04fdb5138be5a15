//! Encoder, decoder and the two discriminators.
//!
//! Every network is written once against [`Graph`] so the same code serves
//! `f32` training, `f32` inference, and `f64` gradient verification. The
//! single-image functions at the bottom ([`encode`], [`decode`],
//! [`discriminate`], [`discriminate_cooccurrence`]) are the inference surface.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Normalization};
use crate::latent::{SliceScheme, StructureTensor, TextureVector, STRUCTURE_CHANNELS, TEXTURE_DIM};
use crate::tensor::{Float, Tensor};

/// Negative slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.2;
const MOD_GAIN: f64 = 1.0;

/// Variance floor of the decoder's per-channel normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Reference crops per target crop in the co-occurrence discriminator.
pub const COOCCUR_REFERENCES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub structure_channels: usize,
    pub texture_dim: usize,
    /// Modulated convolutions per upsampling stage of the decoder (1 or 2).
    #[serde(default = "default_stage_convs")]
    pub stage_convs: usize,
    pub slice_scheme: SliceScheme,
    pub normalization: Normalization,
}

fn default_stage_convs() -> usize {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(64, 16)
    }
}

impl ModelConfig {
    pub fn new(image_size: usize, base_channels: usize) -> Self {
        Self {
            image_size,
            base_channels,
            structure_channels: STRUCTURE_CHANNELS,
            texture_dim: TEXTURE_DIM,
            stage_convs: default_stage_convs(),
            slice_scheme: SliceScheme::default(),
            normalization: Normalization::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(16) || self.image_size < 32 {
            return Err(Error::InvalidArgument(format!("image_size must be a multiple of 16 and at least 32, got {}", self.image_size)));
        }
        if self.base_channels < 8 {
            return Err(Error::InvalidArgument(format!("base_channels must be at least 8, got {}", self.base_channels)));
        }
        if self.structure_channels != STRUCTURE_CHANNELS {
            return Err(Error::InvalidArgument(format!("structure_channels must be {STRUCTURE_CHANNELS}")));
        }
        if self.texture_dim != TEXTURE_DIM {
            return Err(Error::InvalidArgument(format!("texture_dim must be {TEXTURE_DIM}")));
        }
        if !(1..=2).contains(&self.stage_convs) {
            return Err(Error::InvalidArgument(format!("stage_convs must be 1 or 2, got {}", self.stage_convs)));
        }
        self.slice_scheme.validate()?;
        Ok(())
    }

    /// Spatial size of the structure tensor.
    pub fn latent_size(&self) -> usize {
        self.image_size / 16
    }

    /// Side of the square crops fed to the co-occurrence discriminator.
    pub fn patch_size(&self) -> usize {
        self.image_size / 4
    }

    fn encoder_widths(&self) -> [usize; 4] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b, 4 * b]
    }

    fn decoder_widths(&self) -> [usize; 4] {
        let b = self.base_channels;
        [4 * b, 4 * b, 2 * b, b]
    }
}

/// Named parameter tensors in a fixed (sorted) order.
///
/// A tensor may carry a constant runtime multiplier: weights are stored with
/// unit variance and scaled by their fan-in constant in the forward pass, so
/// every parameter sees the same effective learning rate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    multipliers: BTreeMap<String, f64>,
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new(), multipliers: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    /// Inserts a tensor used as `multiplier * t` in the forward pass.
    pub fn insert_scaled(&mut self, name: impl Into<String>, t: Tensor<T>, multiplier: f64) {
        let name = name.into();
        self.multipliers.insert(name.clone(), multiplier);
        self.tensors.insert(name, t);
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        self.multipliers.get(name).copied().unwrap_or(1.0)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(), multipliers: self.multipliers.clone() }
    }

    /// Places every tensor on the graph, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let mut leaves = BTreeMap::new();
        let mut vars = BTreeMap::new();
        for (k, v) in &self.tensors {
            let leaf = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
            let m = self.multiplier(k);
            let var = if m == 1.0 { leaf } else { g.scale(leaf, T::lit(m)) };
            leaves.insert(k.clone(), leaf);
            vars.insert(k.clone(), var);
        }
        Bound { leaves, vars }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Bound {
    leaves: BTreeMap<String, Var>,
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Forward-pass handle (after the runtime multiplier).
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Leaf handles, which receive the gradients.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.leaves.iter()
    }

    /// Forward-pass handles whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Var> {
        self.vars.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), *v)).collect()
    }
}

/// Encoder and decoder weights plus the config they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams<T = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

/// Image discriminator and co-occurrence discriminator weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams<T = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Float>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(g)
            })
            .collect();
        Tensor::new(shape, data)
    }

    fn conv<T: Float>(&mut self, p: &mut ParamSet<T>, name: &str, k: usize, cin: usize, cout: usize) {
        let std = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE) / (k * k * cin) as f64).sqrt();
        p.insert_scaled(format!("{name}.w"), self.normal(&[k, k, cin, cout]), std);
        p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn linear<T: Float>(&mut self, p: &mut ParamSet<T>, name: &str, fin: usize, fout: usize, gain: f64, bias: f64) {
        p.insert_scaled(format!("{name}.w"), self.normal(&[fin, fout]), gain / (fin as f64).sqrt());
        p.insert(format!("{name}.b"), Tensor::full(&[fout], T::lit(bias)));
    }

    fn modulated_conv<T: Float>(&mut self, p: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, texture_dim: usize) {
        self.conv(p, name, 3, cin, cout);
        self.linear(p, &format!("{name}.scale"), texture_dim, cout, MOD_GAIN, 1.0);
        self.linear(p, &format!("{name}.shift"), texture_dim, cout, MOD_GAIN, 0.0);
    }
}

impl<T: Float> AutoencoderParams<T> {
    /// Fresh random weights. Does not validate the config, so tiny
    /// verification networks can be built.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut p = ParamSet::new();
        let enc = config.encoder_widths();
        let mut cin = 3;
        for (i, &c) in enc.iter().enumerate() {
            init.conv(&mut p, &format!("enc.{i}"), 3, cin, c);
            cin = c;
        }
        init.conv(&mut p, "enc.structure", 1, cin, config.structure_channels);
        init.linear(&mut p, "enc.texture", cin, config.texture_dim, 1.0, 0.0);
        let dec = config.decoder_widths();
        let mut cin = config.structure_channels;
        for (i, &c) in dec.iter().enumerate() {
            init.modulated_conv(&mut p, &format!("dec.{i}"), cin, c, config.texture_dim);
            if i > 0 && config.stage_convs > 1 {
                init.modulated_conv(&mut p, &format!("dec.{i}.r"), c, c, config.texture_dim);
            }
            cin = c;
        }
        init.conv(&mut p, "dec.out", 3, cin, 3);
        Self { config: config.clone(), params: p }
    }
}

impl<T: Float> DiscriminatorParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut p = ParamSet::new();
        let widths = config.encoder_widths();
        let mut cin = 3;
        for (i, &c) in widths.iter().enumerate() {
            init.conv(&mut p, &format!("disc.{i}"), 3, cin, c);
            cin = c;
        }
        let side = conv_out_size(config.image_size, 4);
        init.linear(&mut p, "disc.out", side * side * cin, 1, 1.0, 0.0);
        let mut cin = 3;
        for (i, &c) in widths[..3].iter().enumerate() {
            init.conv(&mut p, &format!("cooc.{i}"), 3, cin, c);
            cin = c;
        }
        let side = conv_out_size(config.patch_size(), 3);
        let feat = widths[2];
        init.linear(&mut p, "cooc.embed", side * side * cin, feat, 1.0, 0.0);
        init.linear(&mut p, "cooc.hidden", 2 * feat, 2 * feat, 1.0, 0.0);
        init.linear(&mut p, "cooc.out", 2 * feat, 1, 1.0, 0.0);
        Self { config: config.clone(), params: p }
    }
}

/// Spatial size after `stages` stride-2, pad-1, 3×3 convolutions.
fn conv_out_size(mut n: usize, stages: usize) -> usize {
    for _ in 0..stages {
        n = (n - 1) / 2 + 1;
    }
    n
}

fn conv_act<T: Float>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var, stride: usize) -> Var {
    let pad = 1;
    let y = g.conv2d(x, b.var(&format!("{name}.w")), b.var(&format!("{name}.b")), stride, pad);
    g.leaky_relu(y, T::lit(LEAKY_SLOPE))
}

/// Encoder forward on an NHWC batch. Returns (structure `(N,h,w,8)`, texture `(N,T)`).
pub fn encoder_graph<T: Float>(g: &mut Graph<T>, b: &Bound, x: Var) -> (Var, Var) {
    let mut h = x;
    for i in 0..4 {
        h = conv_act(g, b, &format!("enc.{i}"), h, 2);
    }
    let s = g.conv2d(h, b.var("enc.structure.w"), b.var("enc.structure.b"), 1, 0);
    let pooled = g.global_avg_pool(h);
    let t = g.linear(pooled, b.var("enc.texture.w"), b.var("enc.texture.b"));
    (s, t)
}

/// Conv, per-channel normalization, texture-driven scale and shift, leaky relu.
fn modulated_stage<T: Float>(g: &mut Graph<T>, b: &Bound, name: &str, h: Var, t: Var) -> Var {
    let h = g.conv2d(h, b.var(&format!("{name}.w")), b.var(&format!("{name}.b")), 1, 1);
    let h = g.instance_norm(h, T::lit(NORM_EPS));
    let scale = g.linear(t, b.var(&format!("{name}.scale.w")), b.var(&format!("{name}.scale.b")));
    let shift = g.linear(t, b.var(&format!("{name}.shift.w")), b.var(&format!("{name}.shift.b")));
    let h = g.channel_affine(h, scale, shift);
    g.leaky_relu(h, T::lit(LEAKY_SLOPE))
}

/// Decoder forward: structure `(N,h,w,8)` and texture `(N,T)` to images `(N,16h,16w,3)` in [-1, 1].
pub fn decoder_graph<T: Float>(g: &mut Graph<T>, b: &Bound, s: Var, t: Var) -> Var {
    let mut h = modulated_stage(g, b, "dec.0", s, t);
    for i in 1..4 {
        h = g.upsample2x(h);
        h = modulated_stage(g, b, &format!("dec.{i}"), h, t);
        if b.contains(&format!("dec.{i}.r.w")) {
            h = modulated_stage(g, b, &format!("dec.{i}.r"), h, t);
        }
    }
    h = g.upsample2x(h);
    let out = g.conv2d(h, b.var("dec.out.w"), b.var("dec.out.b"), 1, 1);
    g.tanh(out)
}

/// Decoder parameter handles, for asserting that decodes share weights.
pub fn decoder_vars(b: &Bound) -> BTreeMap<String, Var> {
    b.with_prefix("dec.")
}

/// Image discriminator: `(N,H,W,3)` to logits `(N,1)`.
pub fn discriminator_graph<T: Float>(g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
    let mut h = x;
    for i in 0..4 {
        h = conv_act(g, b, &format!("disc.{i}"), h, 2);
    }
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
    g.linear(flat, b.var("disc.out.w"), b.var("disc.out.b"))
}

fn cooc_embed<T: Float>(g: &mut Graph<T>, b: &Bound, x: Var) -> Var {
    let mut h = x;
    for i in 0..3 {
        h = conv_act(g, b, &format!("cooc.{i}"), h, 2);
    }
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1] * s[2] * s[3]]);
    let e = g.linear(flat, b.var("cooc.embed.w"), b.var("cooc.embed.b"));
    g.leaky_relu(e, T::lit(LEAKY_SLOPE))
}

/// Co-occurrence discriminator. `patches` is `(N,p,p,3)`; `refs` holds
/// `per_sample` reference crops for each target, `(N·per_sample,p,p,3)`.
/// References are embedded and mean-pooled, so their order does not matter.
pub fn cooccurrence_graph<T: Float>(g: &mut Graph<T>, b: &Bound, patches: Var, refs: Var, per_sample: usize) -> Var {
    let target = cooc_embed(g, b, patches);
    let r = cooc_embed(g, b, refs);
    let pooled = g.group_mean(r, per_sample);
    let joint = g.concat_last(target, pooled);
    let h = g.linear(joint, b.var("cooc.hidden.w"), b.var("cooc.hidden.b"));
    let h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
    g.linear(h, b.var("cooc.out.w"), b.var("cooc.out.b"))
}

/// Stacks images into an NHWC tensor after checking every shape.
pub fn stack_images(images: &[&ImageTensor], h: usize, w: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::shape((h, w, 3), (img.height(), img.width(), 3)));
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(&[images.len(), h, w, 3], data))
}

/// Splits an NHWC image batch into [`ImageTensor`]s.
pub fn unstack_images(t: &Tensor<f32>) -> Vec<ImageTensor> {
    let s = t.shape();
    t.unstack().into_iter().map(|img| ImageTensor::new(s[1], s[2], img.into_data()).expect("decoder output is well formed")).collect()
}

fn check_image(config: &ModelConfig, x: &ImageTensor) -> Result<()> {
    let n = config.image_size;
    if x.dims() != (n, n) {
        return Err(Error::shape((n, n, 3), (x.height(), x.width(), 3)));
    }
    Ok(())
}

/// Batched encoder inference.
pub fn encode_batch(params: &AutoencoderParams, xs: &[&ImageTensor]) -> Result<Vec<(StructureTensor, TextureVector)>> {
    for x in xs {
        check_image(&params.config, x)?;
    }
    let n = params.config.image_size;
    let mut g = Graph::new();
    let b = params.params.bind(&mut g, false);
    let x = g.constant(stack_images(xs, n, n)?);
    let (s, t) = encoder_graph(&mut g, &b, x);
    let side = params.config.latent_size();
    let ss = g.value(s).unstack();
    let ts = g.value(t).unstack();
    ss.into_iter()
        .zip(ts)
        .map(|(s, t)| Ok((StructureTensor::new(side, side, s.into_data())?, TextureVector::new(t.into_data())?)))
        .collect()
}

/// Batched decoder inference.
pub fn decode_batch(params: &AutoencoderParams, latents: &[(&StructureTensor, &TextureVector)]) -> Result<Vec<ImageTensor>> {
    let side = params.config.latent_size();
    let mut sdata = Vec::new();
    let mut tdata = Vec::new();
    for (s, t) in latents {
        if s.shape() != (side, side, STRUCTURE_CHANNELS) {
            return Err(Error::shape((side, side, STRUCTURE_CHANNELS), s.shape()));
        }
        if t.data().len() != params.config.texture_dim {
            return Err(Error::shape(params.config.texture_dim, t.data().len()));
        }
        sdata.extend_from_slice(s.data());
        tdata.extend_from_slice(t.data());
    }
    let n = latents.len();
    let mut g = Graph::new();
    let b = params.params.bind(&mut g, false);
    let s = g.constant(Tensor::new(&[n, side, side, STRUCTURE_CHANNELS], sdata));
    let t = g.constant(Tensor::new(&[n, params.config.texture_dim], tdata));
    let y = decoder_graph(&mut g, &b, s, t);
    Ok(unstack_images(g.value(y)))
}

pub fn encode(params: &AutoencoderParams, x: &ImageTensor) -> Result<(StructureTensor, TextureVector)> {
    Ok(encode_batch(params, &[x])?.remove(0))
}

pub fn decode(params: &AutoencoderParams, s: &StructureTensor, t: &TextureVector) -> Result<ImageTensor> {
    Ok(decode_batch(params, &[(s, t)])?.remove(0))
}

pub fn discriminate(d: &DiscriminatorParams, x: &ImageTensor) -> Result<f32> {
    check_image(&d.config, x)?;
    let n = d.config.image_size;
    let mut g = Graph::new();
    let b = d.params.bind(&mut g, false);
    let xv = g.constant(stack_images(&[x], n, n)?);
    let logit = discriminator_graph(&mut g, &b, xv);
    Ok(g.value(logit).item())
}

pub fn discriminate_cooccurrence(d: &DiscriminatorParams, patch: &ImageTensor, references: &[ImageTensor]) -> Result<f32> {
    if references.is_empty() {
        return Err(Error::InvalidArgument("co-occurrence discriminator needs at least one reference patch".into()));
    }
    let p = d.config.patch_size();
    let mut g = Graph::new();
    let b = d.params.bind(&mut g, false);
    let target = g.constant(stack_images(&[patch], p, p)?);
    let refs: Vec<&ImageTensor> = references.iter().collect();
    let refs = g.constant(stack_images(&refs, p, p)?);
    let logit = cooccurrence_graph(&mut g, &b, target, refs, references.len());
    Ok(g.value(logit).item())
}

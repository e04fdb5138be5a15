//! Two-phase training: the style manipulation network (SMN) learns full-image
//! reconstruction and swapping; the mask prediction network (SMPN) is then
//! fine-tuned from SMN weights so that each region's channel slice decodes to
//! that region alone.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::latent::{make_slice_mask, RoiId, SliceScheme, STRUCTURE_CHANNELS};
use crate::losses::{
    composite_graph, discriminator_gan_graph, generator_gan_graph, input_gradients, overall_graph, rec_loss_graph, CompositeVars,
    LossReport, OverallLossReport,
};
use crate::networks::{
    cooccurrence_graph, decoder_graph, decoder_vars, discriminator_graph, encoder_graph, stack_images, AutoencoderParams, Bound,
    DiscriminatorParams, ModelConfig, ParamSet, COOCCUR_REFERENCES,
};
use crate::optim::Adam;
use crate::tensor::{Float, Tensor};

/// Number of trailing steps averaged for the reconstruction regression bound.
pub const REGRESSION_WINDOW: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Smn,
    Smpn,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Smn => "smn",
            Phase::Smpn => "smpn",
        })
    }
}

/// Input images with their five region-separated targets, index-aligned.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingBatch {
    pub x: Vec<ImageTensor>,
    pub y: BTreeMap<RoiId, Vec<ImageTensor>>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for roi in RoiId::ALL {
            let ys = self.y.get(&roi).ok_or_else(|| Error::InvalidArgument(format!("batch is missing targets for {roi}")))?;
            if ys.len() != self.x.len() {
                return Err(Error::InvalidArgument(format!("batch has {} inputs but {} {roi} targets", self.x.len(), ys.len())));
            }
        }
        if self.y.len() != RoiId::ALL.len() {
            return Err(Error::InvalidArgument("batch has targets for unknown regions".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub r1_interval: usize,
    pub r1_gamma: f64,
    pub seed: u64,
    pub phase: Phase,
}

impl TrainConfig {
    pub fn new(phase: Phase, steps: usize) -> Self {
        Self { batch_size: 4, steps, learning_rate: 2e-3, r1_interval: 16, r1_gamma: 1.0, seed: 0, phase }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.r1_interval == 0 {
            return Err(Error::InvalidArgument("r1_interval must be at least 1".into()));
        }
        if !(self.r1_gamma >= 0.0 && self.r1_gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("r1_gamma must be nonnegative, got {}", self.r1_gamma)));
        }
        Ok(())
    }
}

/// Generator-side losses of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepLosses {
    Smpn(OverallLossReport),
    Smn(LossReport),
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub phase: Phase,
    #[serde(flatten)]
    pub losses: StepLosses,
    pub d_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
}

impl StepLog {
    /// Reconstruction loss of the step (mean over regions for SMPN).
    pub fn l_rec(&self) -> f64 {
        match &self.losses {
            StepLosses::Smn(r) => r.l_rec,
            StepLosses::Smpn(o) => o.per_roi.values().map(|r| r.l_rec).sum::<f64>() / o.per_roi.len() as f64,
        }
    }
}

pub struct TrainOutcome {
    pub autoencoder: AutoencoderParams,
    pub discriminator: DiscriminatorParams,
    pub log: Vec<StepLog>,
}

/// Mean `l_rec` over the last `window` log entries.
pub fn windowed_l_rec(log: &[StepLog], window: usize) -> Option<f64> {
    if log.is_empty() || window == 0 {
        return None;
    }
    let tail = &log[log.len().saturating_sub(window)..];
    Some(tail.iter().map(StepLog::l_rec).sum::<f64>() / tail.len() as f64)
}

/// Per-step random choices and constant tensors shared by the generator and
/// discriminator objectives.
#[derive(Debug, Clone)]
pub struct StepSample<T> {
    /// Input images `(B,H,W,3)`.
    pub x: Tensor<T>,
    /// Region-separated targets, each `(B,H,W,3)`.
    pub targets: Vec<(RoiId, Tensor<T>)>,
    /// Image `k` borrows the texture of image `perm[k]`.
    pub perm: Vec<usize>,
    /// Crop origin in each hybrid image.
    pub fake_crops: Vec<(usize, usize)>,
    /// Crop origin in each style source, used as the real co-occurrence target.
    pub real_crops: Vec<(usize, usize)>,
    /// `COOCCUR_REFERENCES` origins per style source, sample-major.
    pub ref_crops: Vec<(usize, usize)>,
    pub patch: usize,
}

/// Rotate-by-one pairing: image `k` takes the texture of image `k + 1 mod B`.
pub fn swap_pairing(b: usize) -> Vec<usize> {
    (0..b).map(|k| (k + 1) % b).collect()
}

impl<T: Float> StepSample<T> {
    pub fn new(x: Tensor<T>, targets: Vec<(RoiId, Tensor<T>)>, patch: usize, rng: &mut impl Rng) -> Self {
        let s = x.shape().to_vec();
        let (b, h, w) = (s[0], s[1], s[2]);
        let mut origin = || (rng.random_range(0..=h - patch), rng.random_range(0..=w - patch));
        let fake_crops = (0..b).map(|_| origin()).collect();
        let real_crops = (0..b).map(|_| origin()).collect();
        let ref_crops = (0..b * COOCCUR_REFERENCES).map(|_| origin()).collect();
        Self { x, targets, perm: swap_pairing(b), fake_crops, real_crops, ref_crops, patch }
    }

    fn repeated_rows(&self) -> Vec<usize> {
        self.perm.iter().flat_map(|&p| std::iter::repeat_n(p, COOCCUR_REFERENCES)).collect()
    }

    /// Reference crops of the style sources of `images`, `(B·R,p,p,3)`.
    fn references(&self, g: &mut Graph<T>, images: Var) -> Var {
        let rows = g.permute_batch(images, self.repeated_rows());
        g.crop(rows, self.ref_crops.clone(), self.patch)
    }

    /// Real co-occurrence targets: crops of the style sources of `images`.
    fn real_patches(&self, g: &mut Graph<T>, images: Var) -> Var {
        let src = g.permute_batch(images, self.perm.clone());
        g.crop(src, self.real_crops.clone(), self.patch)
    }
}

/// Handles produced by the SMN generator objective.
pub struct SmnForward {
    pub terms: CompositeVars,
    pub recon: Var,
    pub hybrid: Var,
}

/// Generator objective on full images: reconstruction, swap realism and
/// co-occurrence of the hybrid decode against its style source.
pub fn smn_objective<T: Float>(g: &mut Graph<T>, ae: &Bound, d: &Bound, sample: &StepSample<T>) -> SmnForward {
    let x = g.constant(sample.x.clone());
    let (s, t) = encoder_graph(g, ae, x);
    let recon = decoder_graph(g, ae, s, t);
    let t_swap = g.permute_batch(t, sample.perm.clone());
    let hybrid = decoder_graph(g, ae, s, t_swap);
    let terms = generator_terms(g, d, sample, recon, hybrid, x, x);
    SmnForward { terms, recon, hybrid }
}

fn generator_terms<T: Float>(
    g: &mut Graph<T>,
    d: &Bound,
    sample: &StepSample<T>,
    pred: Var,
    hybrid: Var,
    target: Var,
    style_images: Var,
) -> CompositeVars {
    let rec = rec_loss_graph(g, pred, target);
    let logit_rec = discriminator_graph(g, d, pred);
    let gan_rec = generator_gan_graph(g, logit_rec);
    let logit_swap = discriminator_graph(g, d, hybrid);
    let gan_swap = generator_gan_graph(g, logit_swap);
    let patches = g.crop(hybrid, sample.fake_crops.clone(), sample.patch);
    let refs = sample.references(g, style_images);
    let logit_cooc = cooccurrence_graph(g, d, patches, refs, COOCCUR_REFERENCES);
    let cooccur = generator_gan_graph(g, logit_cooc);
    composite_graph(g, rec, gan_rec, gan_swap, cooccur)
}

/// Handles produced by the SMPN generator objective.
pub struct SmpnForward {
    pub per_roi: Vec<(RoiId, CompositeVars)>,
    pub overall: Var,
    pub preds: Vec<Var>,
    pub hybrids: Vec<Var>,
    /// Decoder parameter handles used by each region's decode, in region order.
    pub decoder_bindings: Vec<BTreeMap<String, Var>>,
}

/// Constant `(B,h,w,8)` tensor of 0/1 channel weights for one region.
fn slice_weights<T: Float>(scheme: &SliceScheme, roi: RoiId, shape: &[usize]) -> Tensor<T> {
    let keep = make_slice_mask(scheme, roi).expect("validated scheme covers every region").weights();
    let pixels = shape[0] * shape[1] * shape[2];
    let data = (0..pixels).flat_map(|_| keep.iter().map(|&k| T::lit(f64::from(k)))).collect();
    Tensor::new(shape, data)
}

/// Every region's slice decodes against that region's target through the one
/// shared decoder; the five composite losses are averaged with weight 0.2 each.
pub fn smpn_objective<T: Float>(g: &mut Graph<T>, ae: &Bound, d: &Bound, scheme: &SliceScheme, sample: &StepSample<T>) -> SmpnForward {
    let x = g.constant(sample.x.clone());
    let (s, t) = encoder_graph(g, ae, x);
    let t_swap = g.permute_batch(t, sample.perm.clone());
    let s_shape = g.shape(s).to_vec();
    debug_assert_eq!(s_shape[3], STRUCTURE_CHANNELS);
    let mut out = SmpnForward { per_roi: Vec::new(), overall: s, preds: Vec::new(), hybrids: Vec::new(), decoder_bindings: Vec::new() };
    let mut totals = Vec::new();
    for (roi, target) in &sample.targets {
        let weights = g.constant(slice_weights(scheme, *roi, &s_shape));
        let s_roi = g.mul(s, weights);
        out.decoder_bindings.push(decoder_vars(ae));
        let pred = decoder_graph(g, ae, s_roi, t);
        let hybrid = decoder_graph(g, ae, s_roi, t_swap);
        let target = g.constant(target.clone());
        let terms = generator_terms(g, d, sample, pred, hybrid, target, target);
        totals.push(terms.total);
        out.per_roi.push((*roi, terms));
        out.preds.push(pred);
        out.hybrids.push(hybrid);
    }
    out.overall = overall_graph(g, &totals);
    out
}

/// Logistic discriminator objective for both critics.
///
/// `reals` are real images; `style_images` are the images whose crops serve
/// as real co-occurrence targets and references for the matching `fakes`
/// (one style set per fake set).
pub fn discriminator_objective<T: Float>(
    g: &mut Graph<T>,
    d: &Bound,
    sample: &StepSample<T>,
    reals: &[Tensor<T>],
    fakes: &[(Tensor<T>, usize)],
    styles: &[Tensor<T>],
) -> Var {
    let real_vars: Vec<Var> = reals.iter().map(|r| g.constant(r.clone())).collect();
    let real = g.concat_batch(&real_vars);
    let fake_vars: Vec<Var> = fakes.iter().map(|(f, _)| g.constant(f.clone())).collect();
    let fake = g.concat_batch(&fake_vars);
    let real_logits = discriminator_graph(g, d, real);
    let fake_logits = discriminator_graph(g, d, fake);
    let d_img = discriminator_gan_graph(g, real_logits, fake_logits);

    let style_vars: Vec<Var> = styles.iter().map(|s| g.constant(s.clone())).collect();
    let mut real_patches = Vec::new();
    let mut real_refs = Vec::new();
    for &sv in &style_vars {
        real_patches.push(sample.real_patches(g, sv));
        real_refs.push(sample.references(g, sv));
    }
    let mut fake_patches = Vec::new();
    let mut fake_refs = Vec::new();
    for (&fv, (_, style)) in fake_vars.iter().zip(fakes) {
        fake_patches.push(g.crop(fv, sample.fake_crops.clone(), sample.patch));
        fake_refs.push(real_refs[*style]);
    }
    let rp = g.concat_batch(&real_patches);
    let rr = g.concat_batch(&real_refs);
    let fp = g.concat_batch(&fake_patches);
    let fr = g.concat_batch(&fake_refs);
    let cooc_real = cooccurrence_graph(g, d, rp, rr, COOCCUR_REFERENCES);
    let cooc_fake = cooccurrence_graph(g, d, fp, fr, COOCCUR_REFERENCES);
    let d_cooc = discriminator_gan_graph(g, cooc_real, cooc_fake);
    g.add(d_img, d_cooc)
}

/// R1 penalty of the image discriminator on `real`, and its parameter gradient.
///
/// The parameter gradient of `mean‖∇ₓD‖²` equals `2/N · ∇_θ(∇ₓD · v)` with
/// `v = ∇ₓD` held fixed; the inner directional derivative is taken by a
/// central difference along `v`, which needs only first-order reverse mode.
pub fn r1_with_gradient<T: Float>(d: &ParamSet<T>, real: &Tensor<T>) -> (T, BTreeMap<String, Tensor<T>>) {
    let critic = |g: &mut Graph<T>, input: Var| {
        let b = d.bind(g, false);
        discriminator_graph(g, &b, input)
    };
    let v = input_gradients(real, critic);
    let n = T::from_usize(real.shape()[0]).unwrap();
    let penalty = v.data().iter().map(|&x| x * x).sum::<T>() / n;
    let vmax = v.data().iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let mut grads = BTreeMap::new();
    if vmax == T::zero() {
        return (penalty, grads);
    }
    let eps = T::lit(1e-3) / vmax;
    let param_grads = |sign: T| {
        let shifted = real.zip_map(&v, |x, dv| x + sign * eps * dv);
        let mut g = Graph::new();
        let b = d.bind(&mut g, true);
        let input = g.constant(shifted);
        let logits = discriminator_graph(&mut g, &b, input);
        let total = g.sum(logits);
        let mut gr = g.backward(total);
        b.iter().filter_map(|(k, &var)| gr.take(var).map(|t| (k.clone(), t))).collect::<BTreeMap<_, _>>()
    };
    let plus = param_grads(T::one());
    let minus = param_grads(-T::one());
    let scale = T::lit(2.0) / (n * T::lit(2.0) * eps);
    for (k, p) in plus {
        if let Some(m) = minus.get(&k) {
            grads.insert(k, p.zip_map(m, |a, b| (a - b) * scale));
        }
    }
    (penalty, grads)
}

/// Weight initialization for SMN training.
pub enum InitWeights<'a> {
    Fresh(ModelConfig),
    From(&'a AutoencoderParams),
}

fn collect_grads(g: &mut crate::autograd::Grads<f32>, bound: &Bound) -> BTreeMap<String, Tensor<f32>> {
    bound.iter().filter_map(|(k, &v)| g.take(v).map(|t| (k.clone(), t))).collect()
}

fn check_finite(report: &LossReport, step: usize, prefix: &str) -> Result<()> {
    match report.non_finite_component() {
        Some(c) => Err(Error::NonFiniteLoss { component: format!("{prefix}{c}"), step }),
        None => Ok(()),
    }
}

struct Loop {
    ae: AutoencoderParams,
    disc: DiscriminatorParams,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    cfg: TrainConfig,
}

impl Loop {
    fn new(ae: AutoencoderParams, cfg: &TrainConfig) -> Self {
        let disc = DiscriminatorParams::init(&ae.config, cfg.seed.wrapping_add(1));
        Self {
            ae,
            disc,
            opt_g: Adam::new(cfg.learning_rate),
            opt_d: Adam::new(cfg.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg: cfg.clone(),
        }
    }

    /// Linear decay from the base rate at step 0 towards zero at the last step,
    /// for both players.
    fn anneal(&mut self, step: usize) {
        let lr = self.cfg.learning_rate * (1.0 - step as f64 / self.cfg.steps as f64);
        self.opt_g.lr = lr;
        self.opt_d.lr = lr;
    }

    fn sample(&mut self, batch: &TrainingBatch, with_targets: bool) -> Result<StepSample<f32>> {
        batch.validate()?;
        if batch.len() != self.cfg.batch_size {
            return Err(Error::InvalidArgument(format!("expected batch of {}, got {}", self.cfg.batch_size, batch.len())));
        }
        let n = self.ae.config.image_size;
        let xs: Vec<&ImageTensor> = batch.x.iter().collect();
        let x = stack_images(&xs, n, n)?;
        let mut targets = Vec::new();
        if with_targets {
            for roi in RoiId::ALL {
                let ys: Vec<&ImageTensor> = batch.y[&roi].iter().collect();
                targets.push((roi, stack_images(&ys, n, n)?));
            }
        }
        Ok(StepSample::new(x, targets, self.ae.config.patch_size(), &mut self.rng))
    }

    /// Discriminator update; returns (d_loss, r1 penalty if applied).
    fn update_discriminator(
        &mut self,
        step: usize,
        sample: &StepSample<f32>,
        reals: &[Tensor<f32>],
        fakes: &[(Tensor<f32>, usize)],
        styles: &[Tensor<f32>],
    ) -> Result<(f64, Option<f64>)> {
        let mut g = Graph::new();
        let b = self.disc.params.bind(&mut g, true);
        let loss = discriminator_objective(&mut g, &b, sample, reals, fakes, styles);
        let d_loss = f64::from(g.value(loss).item());
        if !d_loss.is_finite() {
            return Err(Error::NonFiniteLoss { component: "d_loss".into(), step });
        }
        let mut grads = g.backward(loss);
        let mut grads = collect_grads(&mut grads, &b);
        drop(g);
        let mut r1 = None;
        if self.cfg.r1_gamma > 0.0 && step.is_multiple_of(self.cfg.r1_interval) {
            let real_refs: Vec<&Tensor<f32>> = reals.iter().collect();
            let real = concat_rows(&real_refs);
            let (penalty, r1_grads) = r1_with_gradient(&self.disc.params, &real);
            let weight = (self.cfg.r1_gamma / 2.0 * self.cfg.r1_interval as f64) as f32;
            for (k, rg) in r1_grads {
                if let Some(gk) = grads.get_mut(&k) {
                    gk.add_assign(&rg.map(|v| v * weight));
                }
            }
            r1 = Some(f64::from(penalty));
        }
        self.opt_d.step(&mut self.disc.params, &grads);
        Ok((d_loss, r1))
    }
}

fn concat_rows(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(&shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

fn next_batch(data: &mut impl Iterator<Item = TrainingBatch>, step: usize) -> Result<TrainingBatch> {
    data.next().ok_or_else(|| Error::InvalidArgument(format!("training data exhausted at step {step}")))
}

pub fn train_smn(data: impl IntoIterator<Item = TrainingBatch>, cfg: &TrainConfig, init: InitWeights<'_>) -> Result<TrainOutcome> {
    train_smn_observed(data, cfg, init, |_| {})
}

/// [`train_smn`] with a callback invoked after every step.
pub fn train_smn_observed(
    data: impl IntoIterator<Item = TrainingBatch>,
    cfg: &TrainConfig,
    init: InitWeights<'_>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.phase != Phase::Smn {
        return Err(Error::InvalidArgument("train_smn needs phase = smn".into()));
    }
    let ae = match init {
        InitWeights::Fresh(config) => {
            config.validate()?;
            AutoencoderParams::init(&config, cfg.seed)
        }
        InitWeights::From(p) => {
            p.config.validate()?;
            p.clone()
        }
    };
    let mut lp = Loop::new(ae, cfg);
    let mut data = data.into_iter();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = next_batch(&mut data, step)?;
        let sample = lp.sample(&batch, false)?;
        let mut g = Graph::new();
        let ae_b = lp.ae.params.bind(&mut g, true);
        let d_b = lp.disc.params.bind(&mut g, false);
        let fwd = smn_objective(&mut g, &ae_b, &d_b, &sample);
        let report = fwd.terms.report(&g);
        check_finite(&report, step, "")?;
        let mut grads = g.backward(fwd.terms.total);
        let grads = collect_grads(&mut grads, &ae_b);
        lp.anneal(step);
        lp.opt_g.step(&mut lp.ae.params, &grads);
        let recon = g.value(fwd.recon).clone();
        let hybrid = g.value(fwd.hybrid).clone();
        drop(g);
        let x = sample.x.clone();
        let (d_loss, r1) =
            lp.update_discriminator(step, &sample, std::slice::from_ref(&x), &[(recon, 0), (hybrid, 0)], std::slice::from_ref(&x))?;
        let entry = StepLog { step, phase: Phase::Smn, losses: StepLosses::Smn(report), d_loss, r1 };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { autoencoder: lp.ae, discriminator: lp.disc, log })
}

pub fn train_smpn(
    data: impl IntoIterator<Item = TrainingBatch>,
    cfg: &TrainConfig,
    init: Option<&AutoencoderParams>,
) -> Result<TrainOutcome> {
    train_smpn_observed(data, cfg, init, |_| {})
}

/// [`train_smpn`] with a callback invoked after every step.
pub fn train_smpn_observed(
    data: impl IntoIterator<Item = TrainingBatch>,
    cfg: &TrainConfig,
    init: Option<&AutoencoderParams>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let init = init.ok_or(Error::MissingInit)?;
    cfg.validate()?;
    if cfg.phase != Phase::Smpn {
        return Err(Error::InvalidArgument("train_smpn needs phase = smpn".into()));
    }
    init.config.validate()?;
    let scheme = init.config.slice_scheme.clone();
    let mut lp = Loop::new(init.clone(), cfg);
    let mut data = data.into_iter();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = next_batch(&mut data, step)?;
        let sample = lp.sample(&batch, true)?;
        let mut g = Graph::new();
        let ae_b = lp.ae.params.bind(&mut g, true);
        let d_b = lp.disc.params.bind(&mut g, false);
        let fwd = smpn_objective(&mut g, &ae_b, &d_b, &scheme, &sample);
        let mut per_roi = BTreeMap::new();
        for (roi, terms) in &fwd.per_roi {
            let r = terms.report(&g);
            check_finite(&r, step, &format!("{roi}."))?;
            per_roi.insert(*roi, r);
        }
        let report = crate::losses::overall_smpn_loss(&per_roi)?;
        if !report.l_overall.is_finite() {
            return Err(Error::NonFiniteLoss { component: "l_overall".into(), step });
        }
        let mut grads = g.backward(fwd.overall);
        let grads = collect_grads(&mut grads, &ae_b);
        lp.anneal(step);
        lp.opt_g.step(&mut lp.ae.params, &grads);
        let mut fakes = Vec::new();
        for (i, (&p, &h)) in fwd.preds.iter().zip(&fwd.hybrids).enumerate() {
            fakes.push((g.value(p).clone(), i));
            fakes.push((g.value(h).clone(), i));
        }
        drop(g);
        let targets: Vec<Tensor<f32>> = sample.targets.iter().map(|(_, t)| t.clone()).collect();
        let (d_loss, r1) = lp.update_discriminator(step, &sample, &targets, &fakes, &targets)?;
        let entry = StepLog { step, phase: Phase::Smpn, losses: StepLosses::Smpn(report), d_loss, r1 };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { autoencoder: lp.ae, discriminator: lp.disc, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batches, synthesize_records, SynthConfig};

    fn tiny_config() -> ModelConfig {
        ModelConfig::new(32, 8)
    }

    fn stream(n: usize, batch: usize) -> crate::data::BatchStream {
        make_batches(synthesize_records(&SynthConfig::new(n, 32, 7)).unwrap(), batch, 3).unwrap()
    }

    fn cfg(phase: Phase, steps: usize) -> TrainConfig {
        TrainConfig { batch_size: 2, ..TrainConfig::new(phase, steps) }
    }

    #[test]
    fn zero_steps_is_a_no_op() {
        let init = AutoencoderParams::init(&tiny_config(), 11);
        let out = train_smn(stream(4, 2), &cfg(Phase::Smn, 0), InitWeights::From(&init)).unwrap();
        assert_eq!(out.autoencoder, init);
        assert!(out.log.is_empty());
        let out = train_smpn(stream(4, 2), &cfg(Phase::Smpn, 0), Some(&init)).unwrap();
        assert_eq!(out.autoencoder, init);
    }

    #[test]
    fn vanishing_learning_rate_leaves_params_unchanged() {
        let init = AutoencoderParams::init(&tiny_config(), 12);
        let c = TrainConfig { learning_rate: 1e-30, ..cfg(Phase::Smn, 10) };
        let out = train_smn(stream(6, 2), &c, InitWeights::From(&init)).unwrap();
        for ((_, a), (_, b)) in out.autoencoder.params.iter().zip(init.params.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
        }
        assert_eq!(out.log.len(), 10);
        assert!(out.log.iter().all(|l| matches!(&l.losses, StepLosses::Smn(r) if r.is_consistent())));
    }

    #[test]
    fn smpn_refuses_fresh_initialization() {
        assert!(matches!(train_smpn(stream(4, 2), &cfg(Phase::Smpn, 1), None), Err(Error::MissingInit)));
        let init = AutoencoderParams::init(&tiny_config(), 1);
        assert!(train_smpn(stream(4, 2), &cfg(Phase::Smn, 1), Some(&init)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || train_smn(stream(6, 2), &cfg(Phase::Smn, 3), InitWeights::Fresh(tiny_config())).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.autoencoder, b.autoencoder);
        assert_eq!(a.discriminator, b.discriminator);
        assert_eq!(a.log, b.log);
        assert!(a.log[0].r1.is_some());
    }

    #[test]
    fn smpn_step_log_is_consistent_and_serializes() {
        let init = AutoencoderParams::init(&tiny_config(), 2);
        let out = train_smpn(stream(4, 2), &cfg(Phase::Smpn, 2), Some(&init)).unwrap();
        for entry in &out.log {
            let StepLosses::Smpn(o) = &entry.losses else { panic!("smpn log entry expected") };
            assert!(o.is_consistent());
            let line = serde_json::to_string(entry).unwrap();
            assert!(line.contains("\"l_overall\"") && line.contains("\"per_roi\"") && line.contains("\"step\""));
            let back: StepLog = serde_json::from_str(&line).unwrap();
            assert_eq!(&back, entry);
        }
    }

    #[test]
    fn smpn_region_decodes_share_one_decoder() {
        let init = AutoencoderParams::<f32>::init(&tiny_config(), 3);
        let disc = DiscriminatorParams::<f32>::init(&tiny_config(), 4);
        let batch = stream(4, 2).next().unwrap();
        let xs: Vec<&ImageTensor> = batch.x.iter().collect();
        let x = stack_images(&xs, 32, 32).unwrap();
        let targets = RoiId::ALL
            .iter()
            .map(|r| {
                let ys: Vec<&ImageTensor> = batch.y[r].iter().collect();
                (*r, stack_images(&ys, 32, 32).unwrap())
            })
            .collect();
        let sample = StepSample::new(x, targets, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let ae_b = init.params.bind(&mut g, true);
        let d_b = disc.params.bind(&mut g, false);
        let marker = g.constant(Tensor::scalar(0.0));
        let fwd = smpn_objective(&mut g, &ae_b, &d_b, &init.config.slice_scheme, &sample);
        assert_eq!(fwd.decoder_bindings.len(), 5);
        assert!(fwd.decoder_bindings.iter().all(|b| b == &fwd.decoder_bindings[0]));
        // Every bound decoder handle predates the objective: no parameter copies were made.
        assert!(fwd.decoder_bindings[0].values().all(|v| *v < marker));
        assert!(!fwd.decoder_bindings[0].is_empty());
        let rep: Vec<f64> = fwd.per_roi.iter().map(|(_, t)| t.report(&g).l_total).collect();
        let overall = f64::from(g.value(fwd.overall).item());
        let want: f64 = rep.iter().map(|v| 0.2 * v).sum();
        assert!((overall - want).abs() <= 1e-5 * want.abs());
    }

    #[test]
    fn r1_parameter_gradient_matches_finite_differences() {
        let small = ModelConfig { base_channels: 2, ..ModelConfig::new(16, 2) };
        let d = DiscriminatorParams::<f64>::init(&small, 9);
        let real =
            Tensor::<f64>::new(&[2, 16, 16, 3], crate::latent::seeded_normals(10, 2 * 16 * 16 * 3).iter().map(|v| v * 0.5).collect());
        let (_, grads) = r1_with_gradient(&d.params, &real);
        let penalty = |p: &ParamSet<f64>| r1_with_gradient(p, &real).0;
        let h = 1e-5;
        for name in ["disc.out.w", "disc.0.w", "disc.2.b"] {
            let n = d.params.get(name).unwrap().len();
            for i in (0..n).step_by((n / 5).max(1)) {
                let mut plus = d.params.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += h;
                let mut minus = d.params.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= h;
                let fd = (penalty(&plus) - penalty(&minus)) / (2.0 * h);
                let an = grads[name].data()[i];
                assert!((fd - an).abs() <= 1e-4 * (1.0 + fd.abs()), "{name}[{i}]: fd {fd} analytic {an}");
            }
        }
    }
}

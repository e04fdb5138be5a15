//! The composite autoencoder objective, its per-region average, the logistic
//! GAN losses and the R1 gradient penalty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::latent::RoiId;
use crate::networks::{discriminator_graph, stack_images, DiscriminatorParams};
use crate::tensor::{Float, Tensor};

pub const REC_WEIGHT: f64 = 1.0;
pub const GAN_REC_WEIGHT: f64 = 0.5;
pub const GAN_SWAP_WEIGHT: f64 = 0.5;
pub const COOCCUR_WEIGHT: f64 = 0.5;
/// Weight of each region's composite loss in the overall objective.
pub const ROI_WEIGHT: f64 = 0.2;

/// Components of the composite loss for one prediction/target pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_gan_rec: f64,
    pub l_gan_swap: f64,
    pub l_cooccur: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn from_components(l_rec: f64, l_gan_rec: f64, l_gan_swap: f64, l_cooccur: f64) -> Self {
        let l_total = REC_WEIGHT * l_rec + GAN_REC_WEIGHT * l_gan_rec + GAN_SWAP_WEIGHT * l_gan_swap + COOCCUR_WEIGHT * l_cooccur;
        Self { l_rec, l_gan_rec, l_gan_swap, l_cooccur, l_total }
    }

    /// Whether `l_total` equals the weighted component sum to 1e-9 relative.
    pub fn is_consistent(&self) -> bool {
        let want = Self::from_components(self.l_rec, self.l_gan_rec, self.l_gan_swap, self.l_cooccur).l_total;
        (self.l_total - want).abs() <= 1e-9 * want.abs().max(1e-300)
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("l_rec", self.l_rec),
            ("l_gan_rec", self.l_gan_rec),
            ("l_gan_swap", self.l_gan_swap),
            ("l_cooccur", self.l_cooccur),
            ("l_total", self.l_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Per-region composite losses and their 0.2-weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallLossReport {
    pub per_roi: BTreeMap<RoiId, LossReport>,
    pub l_overall: f64,
}

impl OverallLossReport {
    pub fn is_consistent(&self) -> bool {
        let want: f64 = self.per_roi.values().map(|r| ROI_WEIGHT * r.l_total).sum();
        self.per_roi.len() == RoiId::ALL.len() && (self.l_overall - want).abs() <= 1e-9 * want.abs().max(1e-300)
    }
}

/// Mean absolute pixel difference.
pub fn reconstruction_loss(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    pred.mean_abs_diff(target)
}

/// Non-saturating generator loss `softplus(-logit)`.
pub fn generator_gan_loss(logit_on_fake: f64) -> f64 {
    softplus(-logit_on_fake)
}

/// Logistic discriminator loss `softplus(-real) + softplus(fake)`.
pub fn discriminator_gan_loss(logit_real: f64, logit_fake: f64) -> f64 {
    softplus(-logit_real) + softplus(logit_fake)
}

pub fn composite_loss(
    pred: &ImageTensor,
    target: &ImageTensor,
    gan_logit_rec: f64,
    gan_logit_swap: f64,
    cooccur_logit: f64,
) -> Result<LossReport> {
    for (name, v) in [("gan_logit_rec", gan_logit_rec), ("gan_logit_swap", gan_logit_swap), ("cooccur_logit", cooccur_logit)] {
        if v.is_nan() {
            return Err(Error::InvalidArgument(format!("{name} is NaN")));
        }
    }
    Ok(LossReport::from_components(
        reconstruction_loss(pred, target)?,
        generator_gan_loss(gan_logit_rec),
        generator_gan_loss(gan_logit_swap),
        generator_gan_loss(cooccur_logit),
    ))
}

pub fn overall_smpn_loss(reports: &BTreeMap<RoiId, LossReport>) -> Result<OverallLossReport> {
    if reports.len() != RoiId::ALL.len() || RoiId::ALL.iter().any(|r| !reports.contains_key(r)) {
        let got: Vec<_> = reports.keys().map(|r| r.name()).collect();
        return Err(Error::InvalidArgument(format!("expected one report per ROI, got {got:?}")));
    }
    let l_overall = reports.values().map(|r| ROI_WEIGHT * r.l_total).sum();
    Ok(OverallLossReport { per_roi: reports.clone(), l_overall })
}

/// Graph handles for the four composite-loss components and their total.
#[derive(Debug, Clone, Copy)]
pub struct CompositeVars {
    pub rec: Var,
    pub gan_rec: Var,
    pub gan_swap: Var,
    pub cooccur: Var,
    pub total: Var,
}

impl CompositeVars {
    pub fn report<T: Float>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossReport::from_components(v(self.rec), v(self.gan_rec), v(self.gan_swap), v(self.cooccur))
    }
}

pub fn rec_loss_graph<T: Float>(g: &mut Graph<T>, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let a = g.abs(d);
    g.mean(a)
}

/// Batch mean of `softplus(-logit)`.
pub fn generator_gan_graph<T: Float>(g: &mut Graph<T>, logits: Var) -> Var {
    let neg = g.scale(logits, -T::one());
    let sp = g.softplus(neg);
    g.mean(sp)
}

/// Batch mean of `softplus(-real)` plus batch mean of `softplus(fake)`.
pub fn discriminator_gan_graph<T: Float>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let neg = g.scale(real, -T::one());
    let a = g.softplus(neg);
    let a = g.mean(a);
    let b = g.softplus(fake);
    let b = g.mean(b);
    g.add(a, b)
}

/// Weighted sum of the four component losses.
pub fn composite_graph<T: Float>(g: &mut Graph<T>, rec: Var, gan_rec: Var, gan_swap: Var, cooccur: Var) -> CompositeVars {
    let r = g.scale(rec, T::lit(REC_WEIGHT));
    let a = g.scale(gan_rec, T::lit(GAN_REC_WEIGHT));
    let b = g.scale(gan_swap, T::lit(GAN_SWAP_WEIGHT));
    let c = g.scale(cooccur, T::lit(COOCCUR_WEIGHT));
    let s = g.add(r, a);
    let s = g.add(s, b);
    let total = g.add(s, c);
    CompositeVars { rec, gan_rec, gan_swap, cooccur, total }
}

/// `Σ_roi 0.2 · total_roi`.
pub fn overall_graph<T: Float>(g: &mut Graph<T>, totals: &[Var]) -> Var {
    let mut acc = g.scale(totals[0], T::lit(ROI_WEIGHT));
    for &t in &totals[1..] {
        let w = g.scale(t, T::lit(ROI_WEIGHT));
        acc = g.add(acc, w);
    }
    acc
}

/// Per-sample input gradients of a critic on an NHWC batch.
///
/// `critic` maps an input handle to per-sample logits `(N, 1)`.
pub fn input_gradients<T: Float>(real: &Tensor<T>, critic: impl Fn(&mut Graph<T>, Var) -> Var) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.param(real.clone());
    let logits = critic(&mut g, x);
    let total = g.sum(logits);
    let mut grads = g.backward(total);
    grads.take(x).unwrap_or_else(|| Tensor::zeros(real.shape()))
}

/// Mean over the batch of the squared input-gradient norm of `critic`.
pub fn r1_penalty_with<T: Float>(real: &Tensor<T>, critic: impl Fn(&mut Graph<T>, Var) -> Var) -> T {
    let n = real.shape()[0];
    let grad = input_gradients(real, critic);
    let sq: T = grad.data().iter().map(|&v| v * v).sum();
    sq / T::from_usize(n).unwrap()
}

/// R1 penalty of the image discriminator on a batch of real images.
pub fn r1_penalty(d: &DiscriminatorParams, real_batch: &[ImageTensor]) -> Result<f64> {
    if real_batch.is_empty() {
        return Err(Error::InvalidArgument("R1 penalty needs a nonempty batch".into()));
    }
    let n = d.config.image_size;
    let refs: Vec<&ImageTensor> = real_batch.iter().collect();
    let x = stack_images(&refs, n, n)?.cast::<f64>();
    let params = d.params.cast::<f64>();
    let penalty = r1_penalty_with(&x, |g, input| {
        let b = params.bind(g, false);
        discriminator_graph(g, &b, input)
    });
    Ok(penalty)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn reconstruction_loss_cases() {
        let a = ImageTensor::new(2, 2, vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.25, 0.75, -0.9, 0.2, 0.4, -0.1]).unwrap();
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        let shifted = ImageTensor::new(2, 2, a.data().iter().map(|v| v + 0.5).collect()).unwrap();
        // Clamping at +1 caps the offset for the 0.75 pixel.
        let expected: f64 = a.data().iter().map(|&v| f64::from((v + 0.5).min(1.0) - v)).sum::<f64>() / 12.0;
        assert!(close(reconstruction_loss(&shifted, &a).unwrap(), expected, 1e-7));
        let low = ImageTensor::filled(4, 4, -0.25);
        let high = ImageTensor::filled(4, 4, 0.25);
        assert!(close(reconstruction_loss(&high, &low).unwrap(), 0.5, 1e-7));
        assert!(reconstruction_loss(&low, &ImageTensor::filled(2, 4, 0.0)).is_err());
    }

    #[test]
    fn reconstruction_loss_matches_elementwise_oracle() {
        let a: Vec<f32> = crate::latent::seeded_normals(1, 5 * 7 * 3).iter().map(|v| (v * 0.4) as f32).collect();
        let b: Vec<f32> = crate::latent::seeded_normals(2, 5 * 7 * 3).iter().map(|v| (v * 0.4) as f32).collect();
        let pa = ImageTensor::new(5, 7, a).unwrap();
        let pb = ImageTensor::new(5, 7, b).unwrap();
        let mut oracle = 0.0;
        for (x, y) in pa.data().iter().zip(pb.data()) {
            oracle += (f64::from(*x) - f64::from(*y)).abs();
        }
        oracle /= 105.0;
        assert!(close(reconstruction_loss(&pa, &pb).unwrap(), oracle, 1e-12));
    }

    #[test]
    fn gan_loss_values() {
        assert!(close(generator_gan_loss(0.0), std::f64::consts::LN_2, 1e-12));
        assert!(close(generator_gan_loss(-2.0), (1.0 + 2f64.exp()).ln(), 1e-12));
        assert!(close(generator_gan_loss(-2.0), 2.1269, 1e-4));
        assert!(generator_gan_loss(1e6) < 1e-12);
        assert!(generator_gan_loss(3.0) < generator_gan_loss(2.0));
        assert!(close(discriminator_gan_loss(0.0, 0.0), 2.0 * std::f64::consts::LN_2, 1e-12));
        assert!(close(discriminator_gan_loss(1.0, -1.0), 2.0 * (1.0 + (-1f64).exp()).ln(), 1e-12));
        assert!(close(discriminator_gan_loss(1.0, -1.0), 0.6265, 1e-4));
        assert_eq!(discriminator_gan_loss(f64::INFINITY, f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn composite_coefficients() {
        let r = LossReport::from_components(1.0, 1.0, 1.0, 1.0);
        assert_eq!(r.l_total, 2.5);
        assert!(r.is_consistent());
        assert_eq!(LossReport::from_components(0.3, 0.0, 0.0, 0.0).l_total, 0.3);
        let img = ImageTensor::filled(2, 2, 0.1);
        let r = composite_loss(&img, &img, f64::INFINITY, f64::INFINITY, f64::INFINITY).unwrap();
        assert_eq!(r.l_total, 0.0);
        let tampered = LossReport { l_total: r.l_total + 1e-3, ..LossReport::from_components(0.2, 0.1, 0.1, 0.1) };
        assert!(!tampered.is_consistent());
    }

    #[test]
    fn overall_weights() {
        let ones: BTreeMap<_, _> = RoiId::ALL.iter().map(|&r| (r, LossReport::from_components(1.0, 0.0, 0.0, 0.0))).collect();
        assert!(close(overall_smpn_loss(&ones).unwrap().l_overall, 1.0, 1e-12));
        let ramp: BTreeMap<_, _> =
            RoiId::ALL.iter().map(|&r| (r, LossReport::from_components(f64::from(r.ordinal()), 0.0, 0.0, 0.0))).collect();
        let o = overall_smpn_loss(&ramp).unwrap();
        assert!(close(o.l_overall, 3.0, 1e-12));
        assert!(o.is_consistent());
        let zeros: BTreeMap<_, _> = RoiId::ALL.iter().map(|&r| (r, LossReport::from_components(0.0, 0.0, 0.0, 0.0))).collect();
        assert_eq!(overall_smpn_loss(&zeros).unwrap().l_overall, 0.0);
        let mut four = ones.clone();
        four.remove(&RoiId::Eyes);
        assert!(overall_smpn_loss(&four).is_err());
    }

    #[test]
    fn graph_composite_matches_scalar_report() {
        let mut g = Graph::<f64>::new();
        let vals = [0.31, 0.7, 1.2, 0.05];
        let v: Vec<Var> = vals.iter().map(|&x| g.param(Tensor::scalar(x))).collect();
        let c = composite_graph(&mut g, v[0], v[1], v[2], v[3]);
        let rep = c.report(&g);
        assert!(close(g.value(c.total).item(), rep.l_total, 1e-15));
        assert!(rep.is_consistent());
        let grads = g.backward(c.total);
        let got: Vec<f64> = v.iter().map(|&x| grads.get(x).unwrap().item()).collect();
        assert_eq!(got, vec![1.0, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn r1_closed_forms() {
        let x = Tensor::<f64>::new(&[2, 2, 2, 3], crate::latent::seeded_normals(3, 24));
        let constant = r1_penalty_with(&x, |g, input| {
            let zero = g.scale(input, 0.0);
            let s = g.reshape(zero, &[2, 12]);
            let w = g.constant(Tensor::zeros(&[12, 1]));
            let b = g.constant(Tensor::scalar(0.7).reshape(&[1]));
            g.linear(s, w, b)
        });
        assert_eq!(constant, 0.0);
        let weights = crate::latent::seeded_normals(4, 12);
        let norm_sq: f64 = weights.iter().map(|w| w * w).sum();
        let linear = r1_penalty_with(&x, |g, input| {
            let s = g.reshape(input, &[2, 12]);
            let w = g.constant(Tensor::new(&[12, 1], weights.clone()));
            let b = g.constant(Tensor::zeros(&[1]));
            g.linear(s, w, b)
        });
        assert!(close(linear, norm_sq, 1e-12));
    }

    #[test]
    fn r1_matches_central_differences_on_a_tiny_net() {
        use crate::networks::{DiscriminatorParams, ModelConfig};
        let cfg = ModelConfig { base_channels: 2, ..ModelConfig::new(16, 2) };
        let d = DiscriminatorParams::<f64>::init(&cfg, 5);
        let x = Tensor::<f64>::new(&[2, 16, 16, 3], crate::latent::seeded_normals(6, 2 * 16 * 16 * 3).iter().map(|v| v * 0.5).collect());
        let critic = |g: &mut Graph<f64>, input: Var| {
            let b = d.params.bind(g, false);
            discriminator_graph(g, &b, input)
        };
        let analytic = r1_penalty_with(&x, critic);
        let eval = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let input = g.constant(t.clone());
            let out = critic(&mut g, input);
            g.value(out).sum()
        };
        let h = 1e-5;
        let mut fd_sq = 0.0;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let gi = (eval(&plus) - eval(&minus)) / (2.0 * h);
            fd_sq += gi * gi;
        }
        let fd = fd_sq / 2.0;
        assert!((analytic - fd).abs() / fd < 1e-3, "analytic {analytic} fd {fd}");
    }
}

//! Mask quality, edit locality and latency measurements.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::latent::{EditConfig, RoiId, SliceScheme};
use crate::networks::{AutoencoderParams, ModelConfig};
use crate::pipeline::{blur_image, blur_plane, edit, predict_roi_mask, EditResult, RoiMask};

/// Intersection over union; 1.0 when both masks are empty.
pub fn iou(pred: &RoiMask, gt: &RoiMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(gt.dims(), pred.dims()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn max_deviation(x: &ImageTensor, result: &EditResult, include: impl Fn(usize) -> bool) -> f64 {
    let base = blur_image(x);
    base.data()
        .chunks_exact(3)
        .zip(result.edited.data().chunks_exact(3))
        .enumerate()
        .filter(|(i, _)| include(*i))
        .flat_map(|(_, (b, e))| (0..3).map(move |c| (f64::from(e[c]) - f64::from(b[c])).abs()))
        .fold(0.0, f64::max)
}

/// Largest `|x̂ − blur(x)|` over pixels whose whole 3×3 neighbourhood has
/// zero matte, i.e. where the final blur cannot see the edit.
pub fn locality_leakage(x: &ImageTensor, result: &EditResult) -> f64 {
    let reach = blur_plane(&result.matte);
    max_deviation(x, result, |i| reach.data[i] == 0.0)
}

/// Largest `|x̂ − blur(x)|` over every pixel with zero matte. The final blur
/// spreads the edit one pixel past the matte, so this is generally nonzero.
pub fn leakage_outside_matte(x: &ImageTensor, result: &EditResult) -> f64 {
    max_deviation(x, result, |i| result.matte.data[i] == 0.0)
}

/// Multiply-accumulate count of one encoder pass.
pub fn encoder_macs(cfg: &ModelConfig) -> u64 {
    let b = cfg.base_channels as u64;
    let mut side = cfg.image_size as u64;
    let mut cin = 3;
    let mut macs = 0;
    for c in [b, 2 * b, 4 * b, 4 * b] {
        side = side.div_ceil(2);
        macs += side * side * 9 * cin * c;
        cin = c;
    }
    macs + side * side * cin * cfg.structure_channels as u64 + cin * cfg.texture_dim as u64
}

/// Multiply-accumulate count of one decoder pass.
pub fn decoder_macs(cfg: &ModelConfig) -> u64 {
    let b = cfg.base_channels as u64;
    let t = cfg.texture_dim as u64;
    let mut side = cfg.latent_size() as u64;
    let mut cin = cfg.structure_channels as u64;
    let mut macs = 0;
    for (i, c) in [4 * b, 4 * b, 2 * b, b].into_iter().enumerate() {
        if i > 0 {
            side *= 2;
            macs += (cfg.stage_convs as u64 - 1) * (side * side * 9 * c * c + 2 * t * c);
        }
        macs += side * side * 9 * cin * c + 2 * t * c;
        cin = c;
    }
    side *= 2;
    macs + side * side * 9 * cin * 3
}

/// Floating-point operations of one edit (two encodes and two decodes).
pub fn edit_flops(cfg: &ModelConfig) -> u64 {
    2 * 2 * (encoder_macs(cfg) + decoder_macs(cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub median_latency_s: f64,
    pub edits_per_second: f64,
    pub decoder_calls_per_edit: usize,
}

/// Times `n_trials` edits after one untimed warm-up edit.
pub fn benchmark_edit(smn: &AutoencoderParams, smpn: &AutoencoderParams, images: &[ImageTensor], n_trials: usize) -> Result<Benchmark> {
    benchmark_with(smn, smpn, images, n_trials, |i| EditConfig::new(RoiId::ALL[i % RoiId::ALL.len()], 1.0, i as u64))
}

/// [`benchmark_edit`] with the edit config of trial `i` given by `cfg_for(i)`.
pub fn benchmark_with(
    smn: &AutoencoderParams,
    smpn: &AutoencoderParams,
    images: &[ImageTensor],
    n_trials: usize,
    cfg_for: impl Fn(usize) -> Result<EditConfig>,
) -> Result<Benchmark> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one trial".into()));
    }
    if images.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let scheme = &smpn.config.slice_scheme;
    edit(smn, smpn, &images[0], &cfg_for(0)?, scheme)?;
    let mut times = Vec::with_capacity(n_trials);
    let mut decoder_calls = 0;
    for i in 0..n_trials {
        let cfg = cfg_for(i)?;
        let start = Instant::now();
        let r = edit(smn, smpn, &images[i % images.len()], &cfg, scheme)?;
        times.push(start.elapsed().as_secs_f64());
        decoder_calls = decoder_calls.max(r.passes.decodes);
    }
    times.sort_by(f64::total_cmp);
    let median = if n_trials % 2 == 1 { times[n_trials / 2] } else { (times[n_trials / 2 - 1] + times[n_trials / 2]) / 2.0 };
    Ok(Benchmark { median_latency_s: median, edits_per_second: 1.0 / median, decoder_calls_per_edit: decoder_calls })
}

/// Something that predicts a region mask for an image.
pub trait MaskPredictor {
    fn predict(&self, x: &ImageTensor, roi: RoiId) -> Result<RoiMask>;
}

/// Masks from masked-slice decoding with a fine-tuned model.
pub struct SlicePredictor<'a> {
    pub model: &'a AutoencoderParams,
    pub scheme: &'a SliceScheme,
}

impl MaskPredictor for SlicePredictor<'_> {
    fn predict(&self, x: &ImageTensor, roi: RoiId) -> Result<RoiMask> {
        predict_roi_mask(self.model, x, roi, self.scheme)
    }
}

/// A distance between two images, such as a learned perceptual metric.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

/// Per-region mean IoU against ground-truth label maps, and their mean.
pub fn mask_iou(predictor: &dyn MaskPredictor, records: &[DatasetRecord]) -> Result<(BTreeMap<RoiId, f64>, f64)> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut per_roi = BTreeMap::new();
    for roi in RoiId::ALL {
        let mut total = 0.0;
        for rec in records {
            let (h, w) = rec.image.dims();
            let gt = RoiMask::new(h, w, rec.labels.region(roi))?;
            total += iou(&predictor.predict(&rec.image, roi)?, &gt)?;
        }
        per_roi.insert(roi, total / records.len() as f64);
    }
    let mean = per_roi.values().sum::<f64>() / per_roi.len() as f64;
    Ok((per_roi, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub locality_edits: usize,
    pub benchmark_trials: usize,
    pub mu: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { locality_edits: 20, benchmark_trials: 5, mu: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub per_roi_iou: BTreeMap<RoiId, f64>,
    pub mean_iou: f64,
    pub max_leakage: f64,
    /// Same measurement over every zero-matte pixel; informational.
    pub max_leakage_outside_matte: f64,
    pub edits_per_second: f64,
    pub median_latency_s: f64,
    pub decoder_calls_per_edit: usize,
    pub flops_per_edit: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub perceptual: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn is_consistent(&self) -> bool {
        let mean = self.per_roi_iou.values().sum::<f64>() / self.per_roi_iou.len() as f64;
        (self.mean_iou - mean).abs() <= 1e-12 && self.per_roi_iou.values().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Mask IoU over `records`, locality over `opts.locality_edits` edits cycling
/// through records and regions, and edit latency. Each perceptual metric is
/// averaged over the locality edits as `distance(x, x̂)`.
pub fn evaluate(
    smn: &AutoencoderParams,
    smpn: &AutoencoderParams,
    records: &[DatasetRecord],
    opts: &EvalOptions,
    metrics: &[&dyn PerceptualMetric],
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let scheme = &smpn.config.slice_scheme;
    let (per_roi_iou, mean_iou) = mask_iou(&SlicePredictor { model: smpn, scheme }, records)?;
    let mut max_leakage: f64 = 0.0;
    let mut outside: f64 = 0.0;
    let mut decoder_calls = 0;
    let mut perceptual: BTreeMap<String, f64> = metrics.iter().map(|m| (m.name().to_string(), 0.0)).collect();
    for i in 0..opts.locality_edits {
        let x = &records[i % records.len()].image;
        let cfg = EditConfig::new(RoiId::ALL[i % RoiId::ALL.len()], opts.mu, opts.seed.wrapping_add(i as u64))?;
        let r = edit(smn, smpn, x, &cfg, scheme)?;
        max_leakage = max_leakage.max(locality_leakage(x, &r));
        outside = outside.max(leakage_outside_matte(x, &r));
        decoder_calls = decoder_calls.max(r.passes.decodes);
        for m in metrics {
            *perceptual.get_mut(m.name()).expect("inserted above") += m.distance(x, &r.edited)? / opts.locality_edits as f64;
        }
    }
    let images: Vec<ImageTensor> = records.iter().take(4).map(|r| r.image.clone()).collect();
    let bench = benchmark_edit(smn, smpn, &images, opts.benchmark_trials.max(1))?;
    Ok(EvalReport {
        records: records.len(),
        per_roi_iou,
        mean_iou,
        max_leakage,
        max_leakage_outside_matte: outside,
        edits_per_second: bench.edits_per_second,
        median_latency_s: bench.median_latency_s,
        decoder_calls_per_edit: decoder_calls.max(bench.decoder_calls_per_edit),
        flops_per_edit: edit_flops(&smn.config),
        perceptual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_records, SynthConfig};
    use crate::pipeline::alpha_matting;

    fn half(h: usize, w: usize, left: bool) -> RoiMask {
        RoiMask::new(h, w, (0..h * w).map(|i| if left { i % w < w / 2 } else { true }).collect()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let full = RoiMask::filled(4, 4, true);
        assert_eq!(iou(&full, &full).unwrap(), 1.0);
        let empty = RoiMask::filled(4, 4, false);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        let a = RoiMask::new(2, 2, vec![true, false, false, false]).unwrap();
        let b = RoiMask::new(2, 2, vec![false, true, false, false]).unwrap();
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(iou(&half(4, 4, true), &half(4, 4, false)).unwrap(), 0.5);
        assert_eq!(iou(&half(4, 4, false), &half(4, 4, true)).unwrap(), 0.5);
        assert!(iou(&a, &full).is_err());
    }

    fn result(x: &ImageTensor, y: &ImageTensor, m: RoiMask) -> EditResult {
        let (edited, matte) = alpha_matting(x, &m, y).unwrap();
        EditResult { edited, mask: m, global_styled: y.clone(), matte, passes: Default::default() }
    }

    #[test]
    fn leakage_examples() {
        let x = ImageTensor::new(8, 8, (0..192).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect()).unwrap();
        let y = ImageTensor::filled(8, 8, 1.0);
        let mut m = vec![false; 64];
        m[2 * 8 + 2] = true;
        m[2 * 8 + 3] = true;
        let r = result(&x, &y, RoiMask::new(8, 8, m.clone()).unwrap());
        assert!(locality_leakage(&x, &r) <= 1e-6);
        assert!(leakage_outside_matte(&x, &r) > 1e-3);

        let same = result(&x, &x, RoiMask::filled(8, 8, false));
        assert_eq!(locality_leakage(&x, &same), 0.0);

        // Negative control: matte forced to all ones.
        let mut bad = result(&x, &y, RoiMask::new(8, 8, m).unwrap());
        let (edited, _) = alpha_matting(&x, &RoiMask::filled(8, 8, true), &y).unwrap();
        bad.edited = edited;
        assert!(locality_leakage(&x, &bad) > 0.1);
    }

    struct Oracle<'a>(&'a [DatasetRecord]);

    impl MaskPredictor for Oracle<'_> {
        fn predict(&self, x: &ImageTensor, roi: RoiId) -> Result<RoiMask> {
            let rec = self.0.iter().find(|r| &r.image == x).expect("known image");
            let (h, w) = x.dims();
            RoiMask::new(h, w, rec.labels.region(roi))
        }
    }

    #[test]
    fn perfect_predictor_scores_one_and_empty_set_errors() {
        let recs = synthesize_records(&SynthConfig::new(1, 32, 3)).unwrap();
        let (per, mean) = mask_iou(&Oracle(&recs), &recs).unwrap();
        assert_eq!(mean, 1.0);
        assert!(per.values().all(|&v| v == 1.0));
        let err = mask_iou(&Oracle(&recs), &[]).unwrap_err();
        assert_eq!(err.to_string(), "empty evaluation set");
    }

    #[test]
    fn flops_grow_with_resolution() {
        for h in [32, 64, 128] {
            let small = ModelConfig::new(h, 16);
            let big = ModelConfig::new(2 * h, 16);
            assert!(edit_flops(&big) >= 2 * edit_flops(&small));
        }
    }

    #[test]
    fn evaluate_reports_consistently() {
        let cfg = ModelConfig::new(32, 8);
        let smn = AutoencoderParams::init(&cfg, 1);
        let smpn = AutoencoderParams::init(&cfg, 2);
        let recs = synthesize_records(&SynthConfig::new(3, 32, 4)).unwrap();
        let opts = EvalOptions { locality_edits: 5, benchmark_trials: 2, ..Default::default() };
        let report = evaluate(&smn, &smpn, &recs, &opts, &[]).unwrap();
        assert!(report.is_consistent());
        assert!(report.max_leakage <= 1e-6);
        assert_eq!(report.decoder_calls_per_edit, 2);
        assert!(matches!(evaluate(&smn, &smpn, &[], &opts, &[]), Err(Error::EmptyEvaluation)));
    }
}

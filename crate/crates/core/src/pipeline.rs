//! Inference: ROI mask prediction, global style perturbation, matting and
//! the three editing operations built from them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{encode_png, mask_to_gray, ImageTensor, Plane};
use crate::latent::{
    add_structure_noise, add_texture_noise, apply_slice_mask, make_slice_mask, EditConfig, RoiId, SliceScheme, StructureTensor,
    TextureVector,
};
use crate::networks::{self, AutoencoderParams};

/// Centered, unit-sum 3×3 Gaussian with unit variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel3 {
    pub weights: [[f64; 3]; 3],
}

pub fn gaussian_kernel() -> GaussianKernel3 {
    let mut weights = [[0.0; 3]; 3];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 1.0, j as f64 - 1.0);
            *w = (-(di * di + dj * dj) / 2.0).exp();
            total += *w;
        }
    }
    for w in weights.iter_mut().flatten() {
        *w /= total;
    }
    GaussianKernel3 { weights }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Blurs an interleaved `(H, W, C)` buffer channel by channel.
fn blur_interleaved(data: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = gaussian_kernel().weights;
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for (ki, krow) in k.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - 1, h);
                for (kj, &kw) in krow.iter().enumerate() {
                    let sx = reflect(x as isize + kj as isize - 1, w);
                    let src = (sy * w + sx) * c;
                    let dst = (y * w + x) * c;
                    for ch in 0..c {
                        out[dst + ch] += kw * data[src + ch];
                    }
                }
            }
        }
    }
    out
}

pub fn blur_plane(p: &Plane) -> Plane {
    let data: Vec<f64> = p.data.iter().map(|&v| f64::from(v)).collect();
    let out = blur_interleaved(&data, p.h, p.w, 1);
    Plane { h: p.h, w: p.w, data: out.into_iter().map(|v| v as f32).collect() }
}

pub fn blur_image(img: &ImageTensor) -> ImageTensor {
    let (h, w) = img.dims();
    let data: Vec<f64> = img.data().iter().map(|&v| f64::from(v)).collect();
    let out = blur_interleaved(&data, h, w, 3);
    ImageTensor::new(h, w, out.into_iter().map(|v| v as f32).collect()).expect("blur preserves shape and finiteness")
}

/// Binary per-pixel mask of one region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl RoiMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape((h, w), data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: bool) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    /// 8-bit grayscale PNG with 255 inside the mask and 0 outside.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        encode_png(&image::DynamicImage::ImageLuma8(mask_to_gray(&self.data, self.h, self.w)))
    }

    pub fn to_plane(&self) -> Plane {
        Plane { h: self.h, w: self.w, data: self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect() }
    }
}

/// Encoder and decoder invocations performed by one operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Passes {
    pub encodes: usize,
    pub decodes: usize,
}

impl Passes {
    fn encode(&mut self, p: &AutoencoderParams, x: &ImageTensor) -> Result<(StructureTensor, TextureVector)> {
        self.encodes += 1;
        networks::encode(p, x)
    }

    fn decode(&mut self, p: &AutoencoderParams, s: &StructureTensor, t: &TextureVector) -> Result<ImageTensor> {
        self.decodes += 1;
        networks::decode(p, s, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub edited: ImageTensor,
    pub mask: RoiMask,
    pub global_styled: ImageTensor,
    pub matte: Plane,
    pub passes: Passes,
}

/// Returns `(x̂, α)` with `α = blur(m)` and `x̂ = blur((1 − α)·x + α·y)`.
pub fn alpha_matting(x: &ImageTensor, m: &RoiMask, y: &ImageTensor) -> Result<(ImageTensor, Plane)> {
    if x.dims() != y.dims() {
        return Err(Error::shape(x.dims(), y.dims()));
    }
    if x.dims() != m.dims() {
        return Err(Error::shape(x.dims(), m.dims()));
    }
    let alpha = blur_plane(&m.to_plane());
    let mixed: Vec<f32> = x
        .data()
        .chunks_exact(3)
        .zip(y.data().chunks_exact(3))
        .zip(&alpha.data)
        .flat_map(|((xp, yp), &a)| {
            let a = f64::from(a);
            (0..3).map(move |c| ((1.0 - a) * f64::from(xp[c]) + a * f64::from(yp[c])) as f32)
        })
        .collect();
    let (h, w) = x.dims();
    let composite = ImageTensor::new(h, w, mixed)?;
    Ok((blur_image(&composite), alpha))
}

/// Thresholds a region decode: a pixel is in the region when its channel mean is positive.
pub fn mask_from_decoded(decoded: &ImageTensor) -> RoiMask {
    let (h, w) = decoded.dims();
    let data = decoded.data().chunks_exact(3).map(|p| (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2])) / 3.0 > 0.0).collect();
    RoiMask { h, w, data }
}

fn check_input(p: &AutoencoderParams, x: &ImageTensor) -> Result<()> {
    let n = p.config.image_size;
    if x.dims() != (n, n) {
        return Err(Error::shape((n, n), x.dims()));
    }
    Ok(())
}

fn predict_counted(passes: &mut Passes, smpn: &AutoencoderParams, x: &ImageTensor, roi: RoiId, scheme: &SliceScheme) -> Result<RoiMask> {
    check_input(smpn, x)?;
    let slice = make_slice_mask(scheme, roi)?;
    let (s, t) = passes.encode(smpn, x)?;
    let decoded = passes.decode(smpn, &apply_slice_mask(&s, &slice), &t)?;
    Ok(mask_from_decoded(&decoded))
}

pub fn predict_roi_mask(smpn: &AutoencoderParams, x: &ImageTensor, roi: RoiId, scheme: &SliceScheme) -> Result<RoiMask> {
    predict_counted(&mut Passes::default(), smpn, x, roi, scheme)
}

/// Perturbs the global style of `x` with seeded texture noise and blends the
/// result back inside the predicted region only.
pub fn edit(
    smn: &AutoencoderParams,
    smpn: &AutoencoderParams,
    x: &ImageTensor,
    cfg: &EditConfig,
    scheme: &SliceScheme,
) -> Result<EditResult> {
    check_input(smn, x)?;
    let mut passes = Passes::default();
    let (s, t) = passes.encode(smn, x)?;
    let noisy = add_texture_noise(&t, cfg.mu_style_noise, cfg.seed)?;
    let global_styled = passes.decode(smn, &s, &noisy)?;
    let mask = predict_counted(&mut passes, smpn, x, cfg.roi, scheme)?;
    let (edited, matte) = alpha_matting(x, &mask, &global_styled)?;
    Ok(EditResult { edited, mask, global_styled, matte, passes })
}

/// Transfers the texture of `x_style` onto the region `roi` of `x_structure`.
pub fn style_swap(
    smn: &AutoencoderParams,
    smpn: &AutoencoderParams,
    x_structure: &ImageTensor,
    x_style: &ImageTensor,
    roi: RoiId,
    scheme: &SliceScheme,
) -> Result<EditResult> {
    check_input(smn, x_structure)?;
    check_input(smn, x_style)?;
    let mut passes = Passes::default();
    let (s, _) = passes.encode(smn, x_structure)?;
    let (_, t) = passes.encode(smn, x_style)?;
    let global_styled = passes.decode(smn, &s, &t)?;
    let mask = predict_counted(&mut passes, smpn, x_structure, roi, scheme)?;
    let (edited, matte) = alpha_matting(x_structure, &mask, &global_styled)?;
    Ok(EditResult { edited, mask, global_styled, matte, passes })
}

/// Adds seeded noise to the structure channels owned by `roi` and decodes
/// the full structure tensor.
pub fn structure_edit(
    smpn: &AutoencoderParams,
    x: &ImageTensor,
    roi: RoiId,
    mu: f64,
    seed: u64,
    scheme: &SliceScheme,
) -> Result<ImageTensor> {
    check_input(smpn, x)?;
    let slice = make_slice_mask(scheme, roi)?;
    let (s, t) = networks::encode(smpn, x)?;
    let noisy = add_structure_noise(&s, &slice, mu, seed)?;
    networks::decode(smpn, &noisy, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_blur(data: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = gaussian_kernel().weights;
        let idx = |i: isize, n: usize| -> usize {
            let n = n as isize;
            (if i < 0 {
                -i
            } else if i >= n {
                2 * n - 2 - i
            } else {
                i
            }) as usize
        };
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let sy = idx(y as isize + dy, h);
                        let sx = idx(x as isize + dx, w);
                        acc += k[(dy + 1) as usize][(dx + 1) as usize] * data[sy * w + sx];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    #[test]
    fn kernel_values_and_symmetry() {
        let k = gaussian_kernel().weights;
        let center = 1.0 / (1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp());
        assert!((k[1][1] - center).abs() < 1e-12);
        assert!((k[1][1] - 0.2042).abs() < 1e-4);
        assert!((k[0][0] - 0.0751).abs() < 1e-4);
        assert!((k.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(k[i][j], k[j][i]);
                assert_eq!(k[i][j], k[2 - i][j]);
            }
        }
    }

    #[test]
    fn blur_examples() {
        let c = Plane::new(4, 5, vec![0.3; 20]).unwrap();
        assert!(blur_plane(&c).data.iter().all(|v| (v - 0.3).abs() < 1e-6));

        let mut imp = vec![0.0; 25];
        imp[12] = 1.0;
        let out = blur_plane(&Plane::new(5, 5, imp).unwrap());
        let k = gaussian_kernel().weights;
        for dy in 0..3 {
            for dx in 0..3 {
                assert!((f64::from(out.get(1 + dy, 1 + dx)) - k[dy][dx]).abs() < 1e-7);
            }
        }
        assert_eq!(out.get(0, 0), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = blur_plane(&Plane::new(5, 5, data.iter().map(|&v| v as f32).collect()).unwrap());
        let want = brute_blur(&data.iter().map(|&v| f64::from(v as f32)).collect::<Vec<_>>(), 5, 5);
        for (g, w) in got.data.iter().zip(want) {
            assert!((f64::from(*g) - w).abs() < 1e-6);
        }
        assert_eq!(blur_plane(&Plane::new(1, 1, vec![0.7]).unwrap()).data, vec![0.7]);
    }

    #[test]
    fn matting_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = ImageTensor::new(6, 6, (0..108).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = ImageTensor::new(6, 6, (0..108).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (full, a) = alpha_matting(&x, &RoiMask::filled(6, 6, true), &y).unwrap();
        assert!(a.data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(full.mean_abs_diff(&blur_image(&y)).unwrap() < 1e-6);
        let (empty, a) = alpha_matting(&x, &RoiMask::filled(6, 6, false), &y).unwrap();
        assert!(a.data.iter().all(|&v| v == 0.0));
        assert_eq!(empty, blur_image(&x));

        let zeros = ImageTensor::filled(7, 7, 0.0);
        let ones = ImageTensor::filled(7, 7, 1.0);
        let mut m = vec![false; 49];
        m[3 * 7 + 3] = true;
        let (out, _) = alpha_matting(&zeros, &RoiMask::new(7, 7, m).unwrap(), &ones).unwrap();
        let sq: f64 = gaussian_kernel().weights.iter().flatten().map(|v| v * v).sum();
        assert!((sq - 0.1256).abs() < 1e-4);
        assert!((f64::from(out.pixel(3, 3)[0]) - sq).abs() < 1e-6);

        assert!(alpha_matting(&zeros, &RoiMask::filled(6, 6, true), &ones).is_err());
    }

    #[test]
    fn threshold_contract() {
        assert_eq!(mask_from_decoded(&ImageTensor::filled(3, 3, 0.5)).count(), 9);
        assert_eq!(mask_from_decoded(&ImageTensor::filled(3, 3, -0.5)).count(), 0);
        let px = ImageTensor::new(1, 1, vec![0.6, -0.1, -0.2]).unwrap();
        assert!(mask_from_decoded(&px).get(0, 0));
    }

    fn models() -> (AutoencoderParams, AutoencoderParams, ImageTensor) {
        let cfg = ModelConfig::new(32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ImageTensor::new(32, 32, (0..32 * 32 * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (AutoencoderParams::init(&cfg, 1), AutoencoderParams::init(&cfg, 2), x)
    }

    #[test]
    fn edit_uses_two_forward_passes_and_is_deterministic() {
        let (smn, smpn, x) = models();
        let scheme = SliceScheme::default();
        let cfg = EditConfig::new(RoiId::Hair, 0.5, 3).unwrap();
        let a = edit(&smn, &smpn, &x, &cfg, &scheme).unwrap();
        assert_eq!(a.passes, Passes { encodes: 2, decodes: 2 });
        assert_eq!(a, edit(&smn, &smpn, &x, &cfg, &scheme).unwrap());
        assert!(a.matte.data.iter().all(|v| (0.0..=1.0).contains(v)));

        let zero = edit(&smn, &smpn, &x, &EditConfig::new(RoiId::Hair, 0.0, 3).unwrap(), &scheme).unwrap();
        let (s, t) = networks::encode(&smn, &x).unwrap();
        assert_eq!(zero.global_styled, networks::decode(&smn, &s, &t).unwrap());

        let wrong = ImageTensor::filled(16, 16, 0.0);
        assert!(edit(&smn, &smpn, &wrong, &cfg, &scheme).is_err());
    }

    #[test]
    fn swap_and_structure_edit() {
        let (smn, smpn, x) = models();
        let scheme = SliceScheme::default();
        let r = style_swap(&smn, &smpn, &x, &x, RoiId::Skin, &scheme).unwrap();
        assert_eq!(r.passes.decodes, 2);
        let (s, t) = networks::encode(&smn, &x).unwrap();
        assert_eq!(r.global_styled, networks::decode(&smn, &s, &t).unwrap());

        let plain = structure_edit(&smpn, &x, RoiId::Eyes, 0.0, 1, &scheme).unwrap();
        let (s, t) = networks::encode(&smpn, &x).unwrap();
        assert_eq!(plain, networks::decode(&smpn, &s, &t).unwrap());
        let a = structure_edit(&smpn, &x, RoiId::Eyes, 2.0, 1, &scheme).unwrap();
        assert_eq!(a, structure_edit(&smpn, &x, RoiId::Eyes, 2.0, 1, &scheme).unwrap());
        assert_ne!(a, plain);
        assert!(structure_edit(&smpn, &x, RoiId::Eyes, -1.0, 1, &scheme).is_err());

        let partial = SliceScheme::from_pairs([(RoiId::Hair, vec![0])]);
        assert!(predict_roi_mask(&smpn, &x, RoiId::Nose, &partial).is_err());
    }
}

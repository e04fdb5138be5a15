//! Latent data model: the spatial structure tensor, the global texture vector,
//! the five semantic regions, and the channel-slicing algebra that binds
//! structure channels to regions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of channels in the structure tensor.
pub const STRUCTURE_CHANNELS: usize = 8;
/// Length of the texture vector.
pub const TEXTURE_DIM: usize = 2048;

/// A semantic region of interest.
///
/// The ordinal (1..=5) doubles as the label code in dataset masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiId {
    Hair,
    Skin,
    Nose,
    Eyes,
    LipsMouth,
}

impl RoiId {
    pub const ALL: [RoiId; 5] = [RoiId::Hair, RoiId::Skin, RoiId::Nose, RoiId::Eyes, RoiId::LipsMouth];

    pub fn ordinal(self) -> u8 {
        match self {
            RoiId::Hair => 1,
            RoiId::Skin => 2,
            RoiId::Nose => 3,
            RoiId::Eyes => 4,
            RoiId::LipsMouth => 5,
        }
    }

    pub fn from_ordinal(i: u8) -> Option<RoiId> {
        RoiId::ALL.get(usize::from(i).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RoiId::Hair => "hair",
            RoiId::Skin => "skin",
            RoiId::Nose => "nose",
            RoiId::Eyes => "eyes",
            RoiId::LipsMouth => "lips_mouth",
        }
    }
}

impl fmt::Display for RoiId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoiId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoiId::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown roi {s:?}; expected one of hair, skin, nose, eyes, lips_mouth")))
    }
}

/// Spatial structure latent, channel-last `(h, w, 8)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureTensor {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl StructureTensor {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w * STRUCTURE_CHANNELS {
            return Err(Error::shape((h, w, STRUCTURE_CHANNELS), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("structure tensor has non-finite entries".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w * STRUCTURE_CHANNELS] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, STRUCTURE_CHANNELS)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * STRUCTURE_CHANNELS + c]
    }
}

/// Global texture (style) latent of length 2048.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureVector {
    data: Vec<f32>,
}

impl TextureVector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != TEXTURE_DIM {
            return Err(Error::shape(TEXTURE_DIM, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("texture vector has non-finite entries".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// First violated invariant of a [`SliceScheme`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemeViolation {
    #[error("missing ROI {0}")]
    MissingRoi(RoiId),
    #[error("empty channel set for {0}")]
    Empty(RoiId),
    #[error("channel {channel} of {roi} is outside 0..8")]
    OutOfRange { roi: RoiId, channel: usize },
    #[error("overlap on channel {channel} between {first} and {second}")]
    Overlap { channel: usize, first: RoiId, second: RoiId },
}

/// Assignment of structure channels to regions.
///
/// Serializes as a JSON object mapping region name to a sorted channel array.
/// A deserialized scheme is not guaranteed valid; call [`SliceScheme::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SliceScheme {
    assignment: BTreeMap<RoiId, BTreeSet<usize>>,
}

impl Default for SliceScheme {
    /// hair {0,1}, skin {2,3}, nose {4}, eyes {5}, lips_mouth {6,7}.
    fn default() -> Self {
        Self::from_pairs([
            (RoiId::Hair, vec![0, 1]),
            (RoiId::Skin, vec![2, 3]),
            (RoiId::Nose, vec![4]),
            (RoiId::Eyes, vec![5]),
            (RoiId::LipsMouth, vec![6, 7]),
        ])
    }
}

impl SliceScheme {
    /// Builds a scheme without validating it.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (RoiId, Vec<usize>)>) -> Self {
        Self { assignment: pairs.into_iter().map(|(r, c)| (r, c.into_iter().collect())).collect() }
    }

    pub fn channels(&self, roi: RoiId) -> Option<&BTreeSet<usize>> {
        self.assignment.get(&roi)
    }

    pub fn assignment(&self) -> &BTreeMap<RoiId, BTreeSet<usize>> {
        &self.assignment
    }

    pub fn validate(&self) -> std::result::Result<(), SchemeViolation> {
        validate_scheme(self)
    }
}

/// Reports the first violated scheme invariant, checking regions in ordinal order.
pub fn validate_scheme(scheme: &SliceScheme) -> std::result::Result<(), SchemeViolation> {
    let mut owner: [Option<RoiId>; STRUCTURE_CHANNELS] = [None; STRUCTURE_CHANNELS];
    for roi in RoiId::ALL {
        let channels = scheme.assignment.get(&roi).ok_or(SchemeViolation::MissingRoi(roi))?;
        if channels.is_empty() {
            return Err(SchemeViolation::Empty(roi));
        }
        for &channel in channels {
            if channel >= STRUCTURE_CHANNELS {
                return Err(SchemeViolation::OutOfRange { roi, channel });
            }
            if let Some(first) = owner[channel] {
                return Err(SchemeViolation::Overlap { channel, first, second: roi });
            }
            owner[channel] = Some(roi);
        }
    }
    Ok(())
}

/// Per-channel keep flags for one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceMask {
    pub keep: [bool; STRUCTURE_CHANNELS],
}

impl SliceMask {
    pub fn all() -> Self {
        Self { keep: [true; STRUCTURE_CHANNELS] }
    }

    pub fn none() -> Self {
        Self { keep: [false; STRUCTURE_CHANNELS] }
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Keep flags as 0/1 weights.
    pub fn weights(&self) -> [f32; STRUCTURE_CHANNELS] {
        self.keep.map(|k| if k { 1.0 } else { 0.0 })
    }
}

pub fn make_slice_mask(scheme: &SliceScheme, roi: RoiId) -> Result<SliceMask> {
    let channels = scheme.channels(roi).ok_or_else(|| Error::InvalidArgument(format!("roi {roi} is not assigned in the slice scheme")))?;
    let mut mask = SliceMask::none();
    for &c in channels.iter().filter(|&&c| c < STRUCTURE_CHANNELS) {
        mask.keep[c] = true;
    }
    Ok(mask)
}

/// Zeroes every structure channel the mask does not keep.
pub fn apply_slice_mask(s: &StructureTensor, mask: &SliceMask) -> StructureTensor {
    let data = s.data.chunks(STRUCTURE_CHANNELS).flat_map(|px| px.iter().zip(mask.keep).map(|(&v, k)| if k { v } else { 0.0 })).collect();
    StructureTensor { h: s.h, w: s.w, data }
}

/// `n` i.i.d. standard normal draws from a generator seeded with `seed`.
pub fn seeded_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `t + mu·g` with `g ~ N(0, I)` drawn from a generator seeded by `seed`.
pub fn add_texture_noise(t: &TextureVector, mu: f64, seed: u64) -> Result<TextureVector> {
    check_noise_scale(mu)?;
    if mu == 0.0 {
        return Ok(t.clone());
    }
    let noise = seeded_normals(seed, t.data.len());
    let data = t.data.iter().zip(noise).map(|(&v, g)| (f64::from(v) + mu * g) as f32).collect();
    Ok(TextureVector { data })
}

/// Adds `mu`-scaled seeded noise to the channels the mask keeps; other channels are untouched.
pub fn add_structure_noise(s: &StructureTensor, mask: &SliceMask, mu: f64, seed: u64) -> Result<StructureTensor> {
    check_noise_scale(mu)?;
    let noise = structure_noise(s.h, s.w, mask, mu, seed);
    let data = s.data.iter().zip(noise).map(|(&v, n)| (f64::from(v) + n) as f32).collect();
    Ok(StructureTensor { h: s.h, w: s.w, data })
}

/// The noise tensor [`add_structure_noise`] adds; exactly zero outside the kept channels.
pub fn structure_noise(h: usize, w: usize, mask: &SliceMask, mu: f64, seed: u64) -> Vec<f64> {
    let g = seeded_normals(seed, h * w * STRUCTURE_CHANNELS);
    g.chunks(STRUCTURE_CHANNELS).flat_map(|px| px.iter().zip(mask.keep).map(move |(&v, k)| if k { mu * v } else { 0.0 })).collect()
}

fn check_noise_scale(mu: f64) -> Result<()> {
    if !mu.is_finite() {
        return Err(Error::InvalidArgument(format!("noise scale must be finite, got {mu}")));
    }
    if mu < 0.0 {
        return Err(Error::InvalidArgument(format!("noise scale must be nonnegative, got {mu}")));
    }
    Ok(())
}

/// Parameters of one region-selective style edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub roi: RoiId,
    pub mu_style_noise: f64,
    pub seed: u64,
}

impl EditConfig {
    pub fn new(roi: RoiId, mu_style_noise: f64, seed: u64) -> Result<Self> {
        check_noise_scale(mu_style_noise)?;
        Ok(Self { roi, mu_style_noise, seed })
    }
}

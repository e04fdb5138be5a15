//! Dataset layout, region-separated targets and the procedural face generator.
//!
//! On-disk layout:
//!
//! ```text
//! root/manifest.json
//! root/images/<id>.png   RGB, 8 bit
//! root/masks/<id>.png    single channel, label codes 0..=5
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Normalization};
use crate::latent::RoiId;
use crate::training::TrainingBatch;

/// Label code of pixels outside every region.
pub const BACKGROUND: u8 = 0;
/// Pixel value of region-separated targets outside their region.
pub const TARGET_BACKGROUND: f32 = -1.0;

/// Per-pixel label codes: 0 background, otherwise a [`RoiId`] ordinal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape((h, w), data.len()));
        }
        if let Some(&code) = data.iter().find(|&&c| c > 5) {
            return Err(Error::InvalidArgument(format!("unknown label {code}")));
        }
        Ok(Self { h, w, data })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Binary mask of one region.
    pub fn region(&self, roi: RoiId) -> Vec<bool> {
        self.data.iter().map(|&c| c == roi.ordinal()).collect()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(self.w as u32, self.h as u32, self.data.clone()).expect("sized from dims")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub image: ImageTensor,
    pub labels: LabelMap,
}

/// Region-separated targets: the image inside each region, -1 elsewhere.
pub fn roi_separate(rec: &DatasetRecord) -> BTreeMap<RoiId, ImageTensor> {
    let (h, w) = rec.image.dims();
    RoiId::ALL
        .into_iter()
        .map(|roi| {
            let mut data = vec![TARGET_BACKGROUND; h * w * 3];
            for (p, &code) in rec.labels.data.iter().enumerate() {
                if code == roi.ordinal() {
                    data[p * 3..p * 3 + 3].copy_from_slice(&rec.image.data()[p * 3..p * 3 + 3]);
                }
            }
            (roi, ImageTensor::new(h, w, data).expect("same dims as source"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    pub image_size: usize,
    pub labels: BTreeMap<u8, String>,
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthConfig>,
    /// Source label code to stored label code, applied when masks are read.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub label_remap: BTreeMap<u8, u8>,
}

pub fn label_table() -> BTreeMap<u8, String> {
    std::iter::once((BACKGROUND, "background".to_string())).chain(RoiId::ALL.iter().map(|r| (r.ordinal(), r.name().to_string()))).collect()
}

/// Streaming reader over a dataset directory, in lexicographic id order.
pub struct DatasetReader {
    root: PathBuf,
    ids: std::vec::IntoIter<String>,
    norm: Normalization,
    remap: BTreeMap<u8, u8>,
}

impl Iterator for DatasetReader {
    type Item = Result<DatasetRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = self.ids.next()?;
        Some(read_record(&self.root, &id, &self.norm, &self.remap))
    }
}

/// Opens a dataset. A root without an `images/` directory yields nothing.
pub fn load_dataset(root: &Path) -> Result<DatasetReader> {
    let manifest_path = root.join("manifest.json");
    let (norm, remap) = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        (m.normalization, m.label_remap)
    } else {
        (Normalization::default(), BTreeMap::new())
    };
    let images = root.join("images");
    let mut ids = Vec::new();
    if images.is_dir() {
        for entry in fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
            let path = entry.map_err(|e| Error::io(&images, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
    }
    ids.sort();
    Ok(DatasetReader { root: root.to_path_buf(), ids: ids.into_iter(), norm, remap })
}

/// Reads a whole dataset, failing on the first bad record.
pub fn load_all(root: &Path) -> Result<Vec<DatasetRecord>> {
    load_dataset(root)?.collect()
}

fn read_record(root: &Path, id: &str, norm: &Normalization, remap: &BTreeMap<u8, u8>) -> Result<DatasetRecord> {
    let image_path = root.join("images").join(format!("{id}.png"));
    let mask_path = root.join("masks").join(format!("{id}.png"));
    if !mask_path.exists() {
        return Err(Error::MissingMask(id.to_string()));
    }
    let image = ImageTensor::read_png(&image_path, norm)?;
    let mask = image::open(&mask_path).map_err(|source| Error::Image { path: mask_path.clone(), source })?.to_luma8();
    let (mw, mh) = mask.dimensions();
    if (mh as usize, mw as usize) != image.dims() {
        return Err(Error::InvalidArgument(format!("{id}: image is {}x{} but mask is {}x{}", image.height(), image.width(), mh, mw)));
    }
    let mut codes = mask.into_raw();
    if !remap.is_empty() {
        for c in codes.iter_mut() {
            *c = remap.get(c).copied().unwrap_or(BACKGROUND);
        }
    }
    if let Some(&code) = codes.iter().find(|&&c| c > 5) {
        return Err(Error::UnknownLabel { id: id.to_string(), code });
    }
    let labels = LabelMap { h: mh as usize, w: mw as usize, data: codes };
    Ok(DatasetRecord { id: id.to_string(), image, labels })
}

/// Procedural face dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Lowest 8-bit channel value of any region color. Values above 127
    /// keep every region pixel positive after normalization.
    pub region_brightness_floor: u8,
}

impl SynthConfig {
    pub fn new(count: usize, image_size: usize, seed: u64) -> Self {
        Self { count, image_size, seed, region_brightness_floor: 140 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("synthetic count must be at least 1".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::InvalidArgument(format!("image_size must be a multiple of 16, got {}", self.image_size)));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Isosceles triangle with its apex above the base.
struct Triangle {
    cx: f64,
    top: f64,
    bottom: f64,
    half_width: f64,
}

impl Triangle {
    fn contains(&self, x: f64, y: f64) -> bool {
        if y < self.top || y > self.bottom {
            return false;
        }
        let t = (y - self.top) / (self.bottom - self.top);
        (x - self.cx).abs() <= t * self.half_width
    }
}

/// Renders one procedural face into an RGB image and its label map.
fn render_face(n: usize, floor: u8, rng: &mut ChaCha8Rng) -> (RgbImage, GrayImage) {
    let f = n as f64 / 64.0;
    let mut jitter = |lo: f64, hi: f64| rng.random_range(lo..hi) * f;
    let cx = n as f64 / 2.0 + jitter(-3.0, 3.0);
    let cy = n as f64 * 0.56 + jitter(-3.0, 3.0);
    let skin = Ellipse { cx, cy, rx: jitter(15.0, 18.0), ry: jitter(19.0, 22.0) };
    let hair = Ellipse { cx, cy: cy - 3.0 * f, rx: skin.rx + jitter(4.0, 6.0), ry: skin.ry + jitter(4.0, 6.0) };
    let hair_line = cy - skin.ry * 0.25;
    let eye_dx = jitter(6.5, 7.5);
    let eye_y = cy - jitter(4.5, 5.5);
    let (eye_rx, eye_ry) = (jitter(3.5, 4.5), jitter(2.5, 3.2));
    let eyes =
        [Ellipse { cx: cx - eye_dx, cy: eye_y, rx: eye_rx, ry: eye_ry }, Ellipse { cx: cx + eye_dx, cy: eye_y, rx: eye_rx, ry: eye_ry }];
    let nose = Triangle { cx, top: cy - 3.5 * f, bottom: cy + jitter(4.0, 5.0), half_width: jitter(3.0, 4.0) };
    let mouth = Ellipse { cx, cy: cy + jitter(9.5, 11.0), rx: jitter(6.0, 8.0), ry: jitter(2.4, 3.2) };

    let mut color = |lo: u8, hi: u8| -> [u8; 3] { [0; 3].map(|_| rng.random_range(lo..=hi)) };
    let background = color(10, 80);
    let region_colors: Vec<[u8; 3]> = RoiId::ALL.iter().map(|_| color(floor, 250)).collect();

    let mut img = RgbImage::new(n as u32, n as u32);
    let mut labels = GrayImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut code = BACKGROUND;
            if hair.contains(px, py) && py < hair_line {
                code = RoiId::Hair.ordinal();
            }
            if skin.contains(px, py) {
                code = RoiId::Skin.ordinal();
            }
            if nose.contains(px, py) {
                code = RoiId::Nose.ordinal();
            }
            if eyes.iter().any(|e| e.contains(px, py)) {
                code = RoiId::Eyes.ordinal();
            }
            if mouth.contains(px, py) {
                code = RoiId::LipsMouth.ordinal();
            }
            let rgb = if code == BACKGROUND { background } else { region_colors[usize::from(code) - 1] };
            img.put_pixel(x as u32, y as u32, image::Rgb(rgb));
            labels.put_pixel(x as u32, y as u32, image::Luma([code]));
        }
    }
    (img, labels)
}

pub fn synthetic_id(i: usize) -> String {
    format!("face_{i:05}")
}

/// Writes a procedural face dataset under `root` and returns its manifest.
pub fn generate_synthetic(cfg: &SynthConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in 0..cfg.count {
        let (img, labels) = render_face(cfg.image_size, cfg.region_brightness_floor, &mut rng);
        let id = synthetic_id(i);
        let ip = images.join(format!("{id}.png"));
        img.save(&ip).map_err(|source| Error::Image { path: ip, source })?;
        let mp = masks.join(format!("{id}.png"));
        labels.save(&mp).map_err(|source| Error::Image { path: mp, source })?;
    }
    let manifest = DatasetManifest {
        count: cfg.count,
        image_size: cfg.image_size,
        labels: label_table(),
        normalization: Normalization::default(),
        synthetic: Some(cfg.clone()),
        label_remap: BTreeMap::new(),
    };
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Renders procedural faces in memory, without touching the filesystem.
pub fn synthesize_records(cfg: &SynthConfig) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    let norm = Normalization::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count)
        .map(|i| {
            let (img, labels) = render_face(cfg.image_size, cfg.region_brightness_floor, &mut rng);
            let n = cfg.image_size;
            DatasetRecord {
                id: synthetic_id(i),
                image: ImageTensor::from_rgb8(&img, &norm),
                labels: LabelMap { h: n, w: n, data: labels.into_raw() },
            }
        })
        .collect())
}

/// Endless stream of training batches: each epoch is a seeded shuffle of the
/// records cut into full batches, with the trailing partial batch dropped.
pub struct BatchStream {
    records: Arc<Vec<DatasetRecord>>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    /// Batches per epoch.
    pub fn epoch_len(&self) -> usize {
        self.records.len() / self.batch_size
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.records.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }
}

impl Iterator for BatchStream {
    type Item = TrainingBatch;

    fn next(&mut self) -> Option<TrainingBatch> {
        if self.epoch_len() == 0 {
            return None;
        }
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let picked = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        let mut batch = TrainingBatch::default();
        for &i in picked {
            let rec = &self.records[i];
            batch.x.push(rec.image.clone());
            for (roi, y) in roi_separate(rec) {
                batch.y.entry(roi).or_default().push(y);
            }
        }
        Some(batch)
    }
}

pub fn make_batches(records: Vec<DatasetRecord>, batch_size: usize, seed: u64) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut stream = BatchStream { records: Arc::new(records), batch_size, seed, epoch: 0, order: Vec::new(), cursor: 0 };
    stream.reshuffle();
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(h: usize, w: usize, labels: Vec<u8>) -> DatasetRecord {
        let data = (0..h * w * 3).map(|i| (i as f32 / (h * w * 3) as f32) * 1.6 - 0.8).collect();
        DatasetRecord { id: "r".into(), image: ImageTensor::new(h, w, data).unwrap(), labels: LabelMap::new(h, w, labels).unwrap() }
    }

    #[test]
    fn separation_of_uniform_label_maps() {
        let bg = roi_separate(&record(3, 3, vec![0; 9]));
        assert_eq!(bg.len(), 5);
        assert!(bg.values().all(|y| y.data().iter().all(|&v| v == -1.0)));
        let rec = record(3, 3, vec![RoiId::Skin.ordinal(); 9]);
        let skin = roi_separate(&rec);
        for (roi, y) in &skin {
            if *roi == RoiId::Skin {
                assert_eq!(y, &rec.image);
            } else {
                assert!(y.data().iter().all(|&v| v == -1.0));
            }
        }
    }

    #[test]
    fn separation_partitions_foreground_and_stitches_back() {
        let labels: Vec<u8> = (0..30).map(|i| (i * 7 % 6) as u8).collect();
        let rec = record(5, 6, labels.clone());
        let ys = roi_separate(&rec);
        for (p, &code) in labels.iter().enumerate() {
            let owners: Vec<RoiId> = ys.iter().filter(|(_, y)| y.data()[p * 3..p * 3 + 3] != [-1.0; 3]).map(|(r, _)| *r).collect();
            if code == BACKGROUND {
                assert!(owners.is_empty());
            } else {
                assert_eq!(owners, vec![RoiId::from_ordinal(code).unwrap()]);
                let y = &ys[&owners[0]];
                assert_eq!(&y.data()[p * 3..p * 3 + 3], &rec.image.data()[p * 3..p * 3 + 3]);
            }
        }
    }

    #[test]
    fn synthetic_faces_are_well_formed() {
        let recs = synthesize_records(&SynthConfig::new(12, 64, 3)).unwrap();
        let norm = Normalization::default();
        for rec in &recs {
            for code in 0..=5u8 {
                assert!(rec.labels.data.contains(&code), "{} lacks code {code}", rec.id);
            }
            for (p, &code) in rec.labels.data.iter().enumerate() {
                if code != BACKGROUND {
                    let px = &rec.image.data()[p * 3..p * 3 + 3];
                    assert!(px.iter().sum::<f32>() / 3.0 > 0.0);
                    assert!(px.iter().all(|&v| v > norm.to_model(127)));
                }
            }
        }
        assert_ne!(recs[0].image, recs[1].image);
    }

    #[test]
    fn batches_per_epoch_and_order() {
        let recs = synthesize_records(&SynthConfig::new(10, 16, 1)).unwrap();
        let stream = make_batches(recs.clone(), 4, 9).unwrap();
        assert_eq!(stream.epoch_len(), 2);
        let a: Vec<TrainingBatch> = make_batches(recs.clone(), 4, 9).unwrap().take(5).collect();
        let b: Vec<TrainingBatch> = make_batches(recs.clone(), 4, 9).unwrap().take(5).collect();
        assert_eq!(a, b);
        for batch in &a {
            batch.validate().unwrap();
            assert_eq!(batch.x.len(), 4);
        }
        let first_epoch: Vec<&ImageTensor> = a[..2].iter().flat_map(|b| b.x.iter()).collect();
        for (i, x) in first_epoch.iter().enumerate() {
            for y in &first_epoch[i + 1..] {
                assert_ne!(x, y, "an epoch must not repeat a record");
            }
        }
        let c: Vec<TrainingBatch> = make_batches(recs, 4, 10).unwrap().take(2).collect();
        assert_ne!(a[..2], c[..]);
        assert!(make_batches(Vec::new(), 0, 1).is_err());
    }
}

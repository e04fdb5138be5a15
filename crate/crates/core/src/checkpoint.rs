//! On-disk checkpoints: `manifest.json` plus one raw little-endian `f32`
//! file per tensor under `tensors/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{AutoencoderParams, DiscriminatorParams, ModelConfig, ParamSet};
use crate::tensor::Tensor;
use crate::training::Phase;

pub const MANIFEST_VERSION: u32 = 1;

const AE_PREFIX: &str = "ae.";
const DISC_PREFIX: &str = "d.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub phase: Phase,
    pub step: usize,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    /// The tensor list is filled in by [`save_checkpoint`].
    pub fn new(model: ModelConfig, phase: Phase, step: usize) -> Self {
        Self { version: MANIFEST_VERSION, phase, step, model, tensors: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub autoencoder: AutoencoderParams,
    pub discriminator: DiscriminatorParams,
    pub manifest: Manifest,
}

fn tensor_path(root: &Path, name: &str) -> std::path::PathBuf {
    root.join("tensors").join(format!("{name}.f32"))
}

pub fn save_checkpoint(root: &Path, ae: &AutoencoderParams, disc: &DiscriminatorParams, manifest: &Manifest) -> Result<Manifest> {
    manifest.model.slice_scheme.validate()?;
    if ae.config != manifest.model || disc.config != manifest.model {
        return Err(Error::InvalidArgument("parameter config differs from manifest model config".into()));
    }
    let dir = root.join("tensors");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = manifest.clone();
    out.version = MANIFEST_VERSION;
    out.tensors.clear();
    for (prefix, set) in [(AE_PREFIX, &ae.params), (DISC_PREFIX, &disc.params)] {
        for (name, t) in set.iter() {
            let name = format!("{prefix}{name}");
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = tensor_path(root, &name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            out.tensors.push(TensorEntry { name, shape: t.shape().to_vec(), dtype: "f32".into() });
        }
    }
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&out)?).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

fn read_set(root: &Path, manifest: &Manifest, prefix: &str, template: &ParamSet<f32>) -> Result<ParamSet<f32>> {
    let mut out = template.clone();
    for (name, want) in template.iter() {
        let full = format!("{prefix}{name}");
        let entry = manifest.tensors.iter().find(|e| e.name == full).ok_or_else(|| Error::MissingTensor(full.clone()))?;
        if entry.dtype != "f32" {
            return Err(Error::InvalidArgument(format!("tensor {full} has dtype {}, expected f32", entry.dtype)));
        }
        if entry.shape != want.shape() {
            return Err(Error::Shape { expected: format!("{full} {:?}", want.shape()), got: format!("{:?}", entry.shape) });
        }
        let path = tensor_path(root, &full);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingTensor(full)),
            Err(e) => return Err(Error::io(&path, e)),
        };
        if bytes.len() != want.len() * 4 {
            return Err(Error::Shape { expected: format!("{full}: {} bytes", want.len() * 4), got: format!("{} bytes", bytes.len()) });
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        *out.get_mut(name).expect("template tensor") = Tensor::new(want.shape(), data);
    }
    Ok(out)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_slice(&text)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != MANIFEST_VERSION {
        return Err(Error::ManifestVersion(version));
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    manifest.model.slice_scheme.validate()?;
    Ok(manifest)
}

pub fn load_checkpoint(root: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(root)?;
    let ae_template = AutoencoderParams::<f32>::init(&manifest.model, 0);
    let disc_template = DiscriminatorParams::<f32>::init(&manifest.model, 0);
    let ae = read_set(root, &manifest, AE_PREFIX, &ae_template.params)?;
    let disc = read_set(root, &manifest, DISC_PREFIX, &disc_template.params)?;
    Ok(Checkpoint {
        autoencoder: AutoencoderParams { config: manifest.model.clone(), params: ae },
        discriminator: DiscriminatorParams { config: manifest.model.clone(), params: disc },
        manifest,
    })
}

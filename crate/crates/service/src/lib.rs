//! Shared model loading and the HTTP API behind the `semedit` binary.

pub mod api;

use std::path::{Path, PathBuf};

use semedit::checkpoint::{load_checkpoint, Manifest};
use semedit::networks::AutoencoderParams;

/// Environment variable naming the default model directory.
pub const CHECKPOINT_ENV: &str = "SEMEDIT_CHECKPOINT";

/// The two fine-tuned autoencoders an edit needs, loaded once and shared
/// read-only between requests.
#[derive(Debug, Clone)]
pub struct Models {
    pub smn: AutoencoderParams,
    pub smpn: AutoencoderParams,
    pub smn_manifest: Option<Manifest>,
    pub smpn_manifest: Option<Manifest>,
}

impl Models {
    pub fn new(smn: AutoencoderParams, smpn: AutoencoderParams) -> semedit::Result<Self> {
        if smn.config.image_size != smpn.config.image_size {
            return Err(semedit::Error::InvalidArgument(format!(
                "SMN works at {}px but SMPN at {}px",
                smn.config.image_size, smpn.config.image_size
            )));
        }
        Ok(Self { smn, smpn, smn_manifest: None, smpn_manifest: None })
    }

    /// Loads `<root>/smn` and `<root>/smpn`.
    pub fn load(root: &Path) -> semedit::Result<Self> {
        let (smn_dir, smpn_dir) = model_dirs(root);
        Self::load_pair(&smn_dir, &smpn_dir)
    }

    pub fn load_pair(smn_dir: &Path, smpn_dir: &Path) -> semedit::Result<Self> {
        let smn = load_checkpoint(smn_dir)?;
        let smpn = load_checkpoint(smpn_dir)?;
        let mut models = Self::new(smn.autoencoder, smpn.autoencoder)?;
        models.smn_manifest = Some(smn.manifest);
        models.smpn_manifest = Some(smpn.manifest);
        Ok(models)
    }

    pub fn image_size(&self) -> usize {
        self.smn.config.image_size
    }
}

/// Checkpoint directories of the two phases under a model directory.
pub fn model_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("smn"), root.join("smpn"))
}

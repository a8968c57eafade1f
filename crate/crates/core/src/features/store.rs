//! On-disk feature store.
//!
//! ```text
//! <dir>/manifest.json         provenance and content hashes
//! <dir>/visual.f32            N x d, little-endian f32, row-major
//! <dir>/text.f32              C x d, little-endian f32, row-major
//! <dir>/sample_ids.json       N dataset indices, row order of visual.f32
//! <dir>/projection.bin        fitted PCA map
//! <dir>/text_projection.bin   fixed text map
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::extract::{encode_class_prompts, extract_visual_features, FeatureExtractionConfig, TextFeatureSet, VisualFeatureSet};
use super::projection::{text_projection, Projection};
use super::provider::{FeatureProvider, ProviderKind, LATENT_DOWNSAMPLE};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::models::sha256_hex;
use crate::rng::{derive_seed, stream};

pub const STORE_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub format: u32,
    pub provider: ProviderKind,
    pub provider_id: String,
    pub dataset: String,
    pub config: FeatureExtractionConfig,
    pub config_hash: String,
    pub feature_dim: usize,
    pub timestep: usize,
    pub layer_ids: Vec<String>,
    pub num_samples: usize,
    pub class_names: Vec<String>,
    /// Image side fed to the encoder; sources are not resized.
    pub source_resolution: [usize; 2],
    pub latent_resolution: [usize; 2],
    pub schedule_hash: String,
    pub projection_hash: String,
    pub text_projection_hash: String,
    pub data_hash: String,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub manifest: StoreManifest,
    pub visual: VisualFeatureSet,
    pub text: TextFeatureSet,
    pub projection: Projection,
    pub text_projection: Projection,
}

/// Anchors broadcast to one client: its visual rows plus every text row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientAnchors {
    pub visual: VisualFeatureSet,
    pub text: TextFeatureSet,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f32_from_bytes(bytes: &[u8], expected: usize, what: &str) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::Format(format!(
            "{what} holds {} bytes, expected {} ({expected} values)",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

fn data_hash(visual: &VisualFeatureSet, text: &TextFeatureSet) -> String {
    let mut bytes = f32_bytes(&visual.features);
    bytes.extend(f32_bytes(&text.class_features));
    bytes.extend(serde_json::to_vec(&visual.sample_ids).expect("ids serialize"));
    bytes.extend(serde_json::to_vec(&text.class_names).expect("names serialize"));
    sha256_hex(&bytes)
}

/// Runs extraction over `sample_ids` of `dataset` and assembles a store.
pub fn build_store(
    dataset: &Dataset,
    sample_ids: &[usize],
    cfg: &FeatureExtractionConfig,
    provider: &dyn FeatureProvider,
    projection: Option<&Projection>,
) -> Result<FeatureStore> {
    let (visual, projection) = extract_visual_features(dataset, sample_ids, cfg, provider, projection, true)?;
    let tp = text_projection(provider.text_dim(), cfg.feature_dim, derive_seed(cfg.seed, &[stream::TEXT_PROJ]))?;
    let text = encode_class_prompts(&dataset.class_names, cfg, provider, &tp)?;
    let manifest = StoreManifest {
        format: STORE_FORMAT,
        provider: provider.kind(),
        provider_id: provider.id(),
        dataset: dataset.kind.to_string(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        feature_dim: cfg.feature_dim,
        timestep: cfg.timestep,
        layer_ids: cfg.resolved_layers(provider)?,
        num_samples: visual.len(),
        class_names: text.class_names.clone(),
        source_resolution: [dataset.height, dataset.width],
        latent_resolution: [dataset.height / LATENT_DOWNSAMPLE, dataset.width / LATENT_DOWNSAMPLE],
        schedule_hash: provider.noise_schedule().hash(),
        projection_hash: projection.hash(),
        text_projection_hash: tp.hash(),
        data_hash: data_hash(&visual, &text),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let store = FeatureStore {
        manifest,
        visual,
        text,
        projection,
        text_projection: tp,
    };
    store.check()?;
    Ok(store)
}

impl FeatureStore {
    pub fn dim(&self) -> usize {
        self.visual.dim
    }

    /// Structural and hash consistency between manifest and payload.
    pub fn check(&self) -> Result<()> {
        let m = &self.manifest;
        if self.visual.dim != self.text.dim || self.visual.dim != m.feature_dim {
            return Err(Error::Integrity(format!(
                "dimension mismatch: visual {}, text {}, manifest {}",
                self.visual.dim, self.text.dim, m.feature_dim
            )));
        }
        if m.num_samples != self.visual.len() || m.class_names != self.text.class_names {
            return Err(Error::Integrity("manifest sample or class list differs from payload".into()));
        }
        if m.config_hash != m.config.hash() {
            return Err(Error::Integrity("manifest config hash does not match its config".into()));
        }
        if m.projection_hash != self.projection.hash() || m.text_projection_hash != self.text_projection.hash() {
            return Err(Error::Integrity("projection hash mismatch".into()));
        }
        if m.data_hash != data_hash(&self.visual, &self.text) {
            return Err(Error::Integrity("feature data hash mismatch".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.visual.len());
        if let Some(dup) = self.visual.sample_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Integrity(format!("sample id {dup} appears more than once")));
        }
        if self.visual.features.iter().chain(&self.text.class_features).any(|v| !v.is_finite()) {
            return Err(Error::Integrity("store contains non-finite values".into()));
        }
        Ok(())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_store(store: &FeatureStore, dir: &Path) -> Result<()> {
    store.check()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("visual.f32"), &f32_bytes(&store.visual.features))?;
    write(&dir.join("text.f32"), &f32_bytes(&store.text.class_features))?;
    write(&dir.join("sample_ids.json"), &serde_json::to_vec(&store.visual.sample_ids)?)?;
    write(&dir.join("projection.bin"), &store.projection.to_bytes())?;
    write(&dir.join("text_projection.bin"), &store.text_projection.to_bytes())?;
    // Manifest last so a partially written store never looks complete.
    write(&dir.join("manifest.json"), serde_json::to_string_pretty(&store.manifest)?.as_bytes())
}

pub fn load_store(dir: &Path) -> Result<FeatureStore> {
    let manifest_path = dir.join("manifest.json");
    let manifest: StoreManifest = serde_json::from_slice(&read(&manifest_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != STORE_FORMAT {
        return Err(Error::Format(format!("unsupported store format {}", manifest.format)));
    }
    let d = manifest.feature_dim;
    let sample_ids: Vec<usize> = serde_json::from_slice(&read(&dir.join("sample_ids.json"))?)
        .map_err(|e| Error::Format(format!("sample_ids.json: {e}")))?;
    if sample_ids.len() != manifest.num_samples {
        return Err(Error::Format(format!(
            "sample_ids.json lists {} ids, manifest says {}",
            sample_ids.len(),
            manifest.num_samples
        )));
    }
    let visual = VisualFeatureSet {
        dim: d,
        features: f32_from_bytes(&read(&dir.join("visual.f32"))?, sample_ids.len() * d, "visual.f32")?,
        sample_ids,
    };
    let text = TextFeatureSet {
        dim: d,
        class_features: f32_from_bytes(&read(&dir.join("text.f32"))?, manifest.class_names.len() * d, "text.f32")?,
        class_names: manifest.class_names.clone(),
    };
    let store = FeatureStore {
        projection: Projection::from_bytes(&read(&dir.join("projection.bin"))?)?,
        text_projection: Projection::from_bytes(&read(&dir.join("text_projection.bin"))?)?,
        manifest,
        visual,
        text,
    };
    store.check()?;
    Ok(store)
}

/// Loads a store and requires it to have been built with `cfg`.
pub fn load_store_for(dir: &Path, cfg: &FeatureExtractionConfig) -> Result<FeatureStore> {
    let store = load_store(dir)?;
    if store.manifest.config_hash != cfg.hash() {
        return Err(Error::Integrity(format!(
            "store at {} was built with a different extraction config",
            dir.display()
        )));
    }
    Ok(store)
}

/// Visual rows for `indices` (in that order) plus the full text set.
pub fn slice_store(store: &FeatureStore, indices: &[usize]) -> Result<ClientAnchors> {
    let row_of: HashMap<usize, usize> = store
        .visual
        .sample_ids
        .iter()
        .enumerate()
        .map(|(row, &id)| (id, row))
        .collect();
    let d = store.visual.dim;
    let mut features = Vec::with_capacity(indices.len() * d);
    for id in indices {
        let row = match row_of.get(id) {
            Some(&r) => r,
            None => return invalid(format!("sample id {id} is not in the feature store")),
        };
        features.extend_from_slice(store.visual.row(row));
    }
    Ok(ClientAnchors {
        visual: VisualFeatureSet {
            dim: d,
            features,
            sample_ids: indices.to_vec(),
        },
        text: store.text.clone(),
    })
}

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::projection::{fit_projection, Projection};
use super::provider::{FeatureProvider, SampleContext};
use super::schedule::add_noise;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::models::sha256_hex;
use crate::nn::Tensor;
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureExtractionConfig {
    pub timestep: usize,
    pub feature_dim: usize,
    /// Hooked layers; empty selects every layer the provider exposes.
    pub layer_ids: Vec<String>,
    pub gamma: f64,
    pub prompt_template: String,
    pub seed: u64,
}

impl Default for FeatureExtractionConfig {
    fn default() -> Self {
        Self {
            timestep: 150,
            feature_dim: 512,
            layer_ids: Vec::new(),
            gamma: 0.18215,
            prompt_template: "a photo of a {name}".to_string(),
            seed: 0,
        }
    }
}

impl FeatureExtractionConfig {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn resolved_layers(&self, provider: &dyn FeatureProvider) -> Result<Vec<String>> {
        if self.layer_ids.is_empty() {
            return Ok(provider.layers().into_iter().map(|(id, _)| id).collect());
        }
        for id in &self.layer_ids {
            provider.layer_width(id)?;
        }
        Ok(self.layer_ids.clone())
    }

    pub fn validate(&self, provider: &dyn FeatureProvider) -> Result<()> {
        let t_max = provider.noise_schedule().num_timesteps();
        if self.timestep < 1 || self.timestep >= t_max {
            return Err(Error::Config(format!("timestep {} outside [1, {t_max})", self.timestep)));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !self.prompt_template.contains("{name}") {
            return Err(Error::Config("prompt_template must contain `{name}`".into()));
        }
        let width: usize = self
            .resolved_layers(provider)?
            .iter()
            .map(|id| provider.layer_width(id))
            .sum::<Result<usize>>()?;
        if self.feature_dim == 0 || self.feature_dim > width {
            return Err(Error::Config(format!(
                "feature_dim {} must be in 1..={width} (sum of hooked layer widths)",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

/// Per-sample visual anchors, `n x d`, stored at the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureSet {
    pub dim: usize,
    pub features: Vec<f32>,
    pub sample_ids: Vec<usize>,
}

impl VisualFeatureSet {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows in `ids` order as a `[n, d]` tensor.
    pub fn rows_tensor(&self, rows: &[usize]) -> Tensor {
        Tensor {
            shape: [rows.len(), self.dim, 1, 1],
            data: rows.iter().flat_map(|&r| self.row(r).iter().map(|&v| v as f64)).collect(),
        }
    }
}

/// One anchor per class, `C x d`, unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureSet {
    pub dim: usize,
    pub class_features: Vec<f32>,
    pub class_names: Vec<String>,
}

impl TextFeatureSet {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn row(&self, c: usize) -> &[f32] {
        &self.class_features[c * self.dim..(c + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: [self.num_classes(), self.dim, 1, 1],
            data: self.class_features.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Encoder output times `gamma` for a `[1, 3, H, W]` image in [0, 1].
pub fn encode_latent(image: &Tensor, cfg: &FeatureExtractionConfig, provider: &dyn FeatureProvider) -> Result<Tensor> {
    if !image.is_finite() {
        return invalid("image contains non-finite pixels");
    }
    let mut latent = provider.encode(image)?;
    latent.data.iter_mut().for_each(|v| *v *= cfg.gamma);
    Ok(latent)
}

/// Spatial mean of each channel of a `[1, C, H, W]` map.
pub fn global_average_pool(map: &Tensor) -> Vec<f64> {
    let [_, c, h, w] = map.shape;
    let area = (h * w) as f64;
    (0..c)
        .map(|ch| map.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / area)
        .collect()
}

/// Pooled, concatenated hook activations for one sample (before projection).
pub fn raw_visual_feature(
    image: &Tensor,
    ctx: SampleContext,
    layers: &[String],
    cfg: &FeatureExtractionConfig,
    provider: &dyn FeatureProvider,
) -> Result<Vec<f64>> {
    let latent = encode_latent(image, cfg, provider)?;
    let schedule = provider.noise_schedule();
    let noise_seed = derive_seed(cfg.seed, &[stream::NOISE, ctx.sample_id as u64]);
    let noisy = add_noise(&latent, cfg.timestep, &schedule, None, noise_seed)?;
    let maps = provider.unet_features(&noisy, cfg.timestep, layers, ctx)?;
    Ok(maps.iter().flat_map(global_average_pool).collect())
}

/// Raw features for the given dataset samples, `n x D` row-major.
pub fn raw_visual_features(
    dataset: &Dataset,
    sample_ids: &[usize],
    cfg: &FeatureExtractionConfig,
    provider: &dyn FeatureProvider,
) -> Result<(Vec<f64>, usize)> {
    cfg.validate(provider)?;
    let layers = cfg.resolved_layers(provider)?;
    if let Some(&bad) = sample_ids.iter().find(|&&i| i >= dataset.len()) {
        return invalid(format!("sample id {bad} outside dataset of {}", dataset.len()));
    }
    let rows: Vec<Vec<f64>> = sample_ids
        .par_iter()
        .map(|&i| {
            let ctx = SampleContext {
                sample_id: i,
                label: Some(dataset.labels[i]),
            };
            raw_visual_feature(&dataset.image_unit(i), ctx, &layers, cfg, provider)
        })
        .collect::<Result<_>>()?;
    let width = rows.first().map_or(0, Vec::len);
    Ok((rows.concat(), width))
}

/// Visual anchors for `sample_ids`. With `projection = None` a PCA map is fit
/// on this corpus when `fit` is set; otherwise it is a state error.
pub fn extract_visual_features(
    dataset: &Dataset,
    sample_ids: &[usize],
    cfg: &FeatureExtractionConfig,
    provider: &dyn FeatureProvider,
    projection: Option<&Projection>,
    fit: bool,
) -> Result<(VisualFeatureSet, Projection)> {
    if projection.is_none() && !fit {
        return Err(Error::State("visual projection has not been fitted".into()));
    }
    let (raw, width) = raw_visual_features(dataset, sample_ids, cfg, provider)?;
    let n = sample_ids.len();
    let proj = match projection {
        Some(p) => {
            if p.in_dim != width || p.out_dim != cfg.feature_dim {
                return invalid(format!(
                    "projection maps {} -> {}, extraction needs {width} -> {}",
                    p.in_dim, p.out_dim, cfg.feature_dim
                ));
            }
            p.clone()
        }
        None => fit_projection(&raw, n, width, cfg.feature_dim)?,
    };
    let projected = if n == 0 { Vec::new() } else { proj.apply_rows(&raw, n) };
    Ok((
        VisualFeatureSet {
            dim: cfg.feature_dim,
            features: projected.iter().map(|&v| v as f32).collect(),
            sample_ids: sample_ids.to_vec(),
        },
        proj,
    ))
}

/// Embeds `template(name)` for every class and maps it to `d` unit vectors.
pub fn encode_class_prompts(
    class_names: &[String],
    cfg: &FeatureExtractionConfig,
    provider: &dyn FeatureProvider,
    text_projection: &Projection,
) -> Result<TextFeatureSet> {
    if class_names.is_empty() {
        return invalid("no class names given");
    }
    for (i, a) in class_names.iter().enumerate() {
        if class_names[..i].contains(a) {
            return invalid(format!("duplicate class name `{a}`"));
        }
    }
    if text_projection.in_dim != provider.text_dim() || text_projection.out_dim != cfg.feature_dim {
        return invalid("text projection does not match provider width and feature_dim");
    }
    let mut class_features = Vec::with_capacity(class_names.len() * cfg.feature_dim);
    for name in class_names {
        let emb = provider.text_embed(&cfg.prompt_template.replace("{name}", name))?;
        let mut v = text_projection.apply(&emb);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Provider(format!("prompt for `{name}` projects to zero")));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        class_features.extend(v.iter().map(|&x| x as f32));
    }
    Ok(TextFeatureSet {
        dim: cfg.feature_dim,
        class_features,
        class_names: class_names.to_vec(),
    })
}

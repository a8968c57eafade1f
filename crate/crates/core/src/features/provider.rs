//! Sources of latent encodings, U-Net activations, and prompt embeddings.
//!
//! [`SyntheticProvider`] is a deterministic stand-in for a latent-diffusion
//! model. It plays the role of a frozen teacher that "knows" each sample's
//! class, so distillation and contrastive terms carry real signal at test
//! scale. [`DiffusionProvider`] describes a Stable Diffusion v1.5 checkout on
//! disk.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{invalid, Error, Result};
use crate::nn::Tensor;
use crate::rng::{derive_seed, rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Diffusion,
    Synthetic,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(Self::Diffusion),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown provider `{other}`"))),
        }
    }
}

/// Identity of the sample being encoded. Real diffusion models ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleContext {
    pub sample_id: usize,
    pub label: Option<usize>,
}

pub trait FeatureProvider: Send + Sync {
    fn kind(&self) -> ProviderKind;

    /// Stable identifier recorded in store manifests.
    fn id(&self) -> String;

    fn noise_schedule(&self) -> NoiseSchedule;

    /// Hookable layers and their channel widths.
    fn layers(&self) -> Vec<(String, usize)>;

    fn text_dim(&self) -> usize;

    /// Raw encoder output (before the latent scale factor) for a `[1, 3, h, w]` image.
    fn encode(&self, image: &Tensor) -> Result<Tensor>;

    /// Activations of the requested layers for one noisy latent.
    fn unet_features(&self, noisy: &Tensor, t: usize, layers: &[String], ctx: SampleContext) -> Result<Vec<Tensor>>;

    /// Pooled prompt embedding.
    fn text_embed(&self, prompt: &str) -> Result<Vec<f64>>;

    fn layer_width(&self, id: &str) -> Result<usize> {
        self.layers()
            .into_iter()
            .find(|(name, _)| name == id)
            .map(|(_, w)| w)
            .ok_or_else(|| Error::Config(format!("layer `{id}` is not exposed by provider {}", self.id())))
    }
}

fn gaussian_vec(seed: u64, streams: &[u64], n: usize) -> Vec<f64> {
    let mut rng = rng_from(seed, streams);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Gram-Schmidt on rows; returns `None` if a row collapses.
pub fn orthonormalize_rows(rows: &mut [Vec<f64>]) -> Option<()> {
    for i in 0..rows.len() {
        let (done, rest) = rows.split_at_mut(i);
        let row = &mut rest[0];
        for _ in 0..2 {
            for prev in done.iter() {
                let dot: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
                row.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-10 {
            return None;
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Some(())
}

fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProviderConfig {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub prompt_template: String,
    pub seed: u64,
    /// `(id, width)` of the emulated hook points.
    pub layers: Vec<(String, usize)>,
    /// Scale of the per-sample perturbation around the class direction.
    pub sample_spread: f64,
    /// Scale of the per-class perturbation of text embeddings.
    pub text_spread: f64,
    /// Scale of the image-dependent term added to every activation.
    pub image_coupling: f64,
}

impl SyntheticProviderConfig {
    pub fn new(class_names: Vec<String>, prompt_template: impl Into<String>, seed: u64) -> Self {
        Self {
            num_classes: class_names.len(),
            class_names,
            prompt_template: prompt_template.into(),
            seed,
            layers: default_synthetic_layers(),
            sample_spread: 0.3,
            text_spread: 0.1,
            image_coupling: 0.05,
        }
    }
}

/// Encoder, bottleneck, and decoder hook points of the synthetic model.
pub fn default_synthetic_layers() -> Vec<(String, usize)> {
    vec![
        ("down.1".to_string(), 256),
        ("mid".to_string(), 512),
        ("up.1".to_string(), 256),
    ]
}

/// Deterministic provider whose activations encode `normalize(mu_y + s * g_i)`.
///
/// `mu_y` are orthonormal class directions in `D = sum(widths)` dimensions and
/// `g_i` is a unit direction seeded by the sample id. Text embeddings are
/// `normalize(mu_y + s_t * g_y)` for prompts built from a known class name.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    cfg: SyntheticProviderConfig,
    class_dirs: Vec<Vec<f64>>,
    /// Latent channel mixing, `4 x 3`.
    latent_mix: Vec<f64>,
    /// Per-layer, per-channel gain on the image-dependent term.
    coupling: Vec<Vec<f64>>,
}

pub const LATENT_CHANNELS: usize = 4;
pub const LATENT_DOWNSAMPLE: usize = 8;

impl SyntheticProvider {
    pub fn new(cfg: SyntheticProviderConfig) -> Result<Self> {
        let dim: usize = cfg.layers.iter().map(|(_, w)| w).sum();
        if cfg.num_classes == 0 || cfg.num_classes > dim {
            return invalid(format!("synthetic provider needs 1..={dim} classes, got {}", cfg.num_classes));
        }
        if cfg.class_names.len() != cfg.num_classes {
            return invalid("class_names length differs from num_classes");
        }
        let mut class_dirs: Vec<Vec<f64>> = (0..cfg.num_classes)
            .map(|c| gaussian_vec(cfg.seed, &[stream::SYNTH, 1, c as u64], dim))
            .collect();
        orthonormalize_rows(&mut class_dirs).ok_or_else(|| Error::Provider("degenerate class directions".into()))?;
        let latent_mix = gaussian_vec(cfg.seed, &[stream::SYNTH, 2], LATENT_CHANNELS * 3)
            .into_iter()
            .map(|v| v * 0.5)
            .collect();
        let coupling = cfg
            .layers
            .iter()
            .enumerate()
            .map(|(j, (_, w))| gaussian_vec(cfg.seed, &[stream::SYNTH, 3, j as u64], *w))
            .collect();
        Ok(Self {
            cfg,
            class_dirs,
            latent_mix,
            coupling,
        })
    }

    pub fn semantic_dim(&self) -> usize {
        self.class_dirs[0].len()
    }

    /// `normalize(mu_y + spread * g_i)`, the provider's notion of sample `i`.
    pub fn sample_vector(&self, sample_id: usize, label: usize) -> Vec<f64> {
        let mut g = gaussian_vec(self.cfg.seed, &[stream::SYNTH, 4, sample_id as u64], self.semantic_dim());
        normalize(&mut g);
        let mut v: Vec<f64> = self.class_dirs[label]
            .iter()
            .zip(&g)
            .map(|(m, g)| m + self.cfg.sample_spread * g)
            .collect();
        normalize(&mut v);
        v
    }

    pub fn class_text_vector(&self, label: usize) -> Vec<f64> {
        let mut g = gaussian_vec(self.cfg.seed, &[stream::SYNTH, 5, label as u64], self.semantic_dim());
        normalize(&mut g);
        let mut v: Vec<f64> = self.class_dirs[label]
            .iter()
            .zip(&g)
            .map(|(m, g)| m + self.cfg.text_spread * g)
            .collect();
        normalize(&mut v);
        v
    }
}

fn spatial_size(layer: &str, latent: usize) -> usize {
    if layer.starts_with("mid") {
        (latent / 4).max(1)
    } else {
        (latent / 2).max(1)
    }
}

impl FeatureProvider for SyntheticProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Synthetic
    }

    fn id(&self) -> String {
        format!("synthetic-v1:seed={}:classes={}", self.cfg.seed, self.cfg.num_classes)
    }

    fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule::stable_diffusion()
    }

    fn layers(&self) -> Vec<(String, usize)> {
        self.cfg.layers.clone()
    }

    fn text_dim(&self) -> usize {
        self.semantic_dim()
    }

    /// Average-pools 8x8 patches and mixes RGB into four latent channels.
    fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = image.shape;
        if n != 1 || c != 3 {
            return invalid(format!("expected a single RGB image, got shape {:?}", image.shape));
        }
        if h % LATENT_DOWNSAMPLE != 0 || w % LATENT_DOWNSAMPLE != 0 {
            return invalid(format!("image side must be a multiple of {LATENT_DOWNSAMPLE}, got {h}x{w}"));
        }
        let (lh, lw) = (h / LATENT_DOWNSAMPLE, w / LATENT_DOWNSAMPLE);
        let mut pooled = vec![0.0; 3 * lh * lw];
        let area = (LATENT_DOWNSAMPLE * LATENT_DOWNSAMPLE) as f64;
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    pooled[(ch * lh + y / LATENT_DOWNSAMPLE) * lw + x / LATENT_DOWNSAMPLE] +=
                        (image.data[(ch * h + y) * w + x] * 2.0 - 1.0) / area;
                }
            }
        }
        let mut out = Tensor::zeros([1, LATENT_CHANNELS, lh, lw]);
        for o in 0..LATENT_CHANNELS {
            for p in 0..lh * lw {
                out.data[o * lh * lw + p] = (0..3).map(|ch| self.latent_mix[o * 3 + ch] * pooled[ch * lh * lw + p]).sum::<f64>() * 5.0;
            }
        }
        Ok(out)
    }

    fn unet_features(&self, noisy: &Tensor, _t: usize, layers: &[String], ctx: SampleContext) -> Result<Vec<Tensor>> {
        let label = ctx
            .label
            .ok_or_else(|| Error::Provider("synthetic provider needs the sample label".into()))?;
        if label >= self.cfg.num_classes {
            return invalid(format!("label {label} outside the provider's {} classes", self.cfg.num_classes));
        }
        let semantic = self.sample_vector(ctx.sample_id, label);
        let [_, lc, lh, lw] = noisy.shape;
        let mut offsets = Vec::with_capacity(self.cfg.layers.len());
        let mut at = 0;
        for (_, w) in &self.cfg.layers {
            offsets.push(at);
            at += w;
        }
        layers
            .iter()
            .map(|id| {
                let j = self
                    .cfg
                    .layers
                    .iter()
                    .position(|(name, _)| name == id)
                    .ok_or_else(|| Error::Config(format!("layer `{id}` is not exposed by provider {}", self.id())))?;
                let width = self.cfg.layers[j].1;
                let side = spatial_size(id, lh.min(lw));
                let mut map = Tensor::zeros([1, width, side, side]);
                for y in 0..side {
                    for x in 0..side {
                        // Mean over the latent cell that this location covers.
                        let (y0, y1) = (y * lh / side, ((y + 1) * lh / side).max(y * lh / side + 1));
                        let (x0, x1) = (x * lw / side, ((x + 1) * lw / side).max(x * lw / side + 1));
                        let mut cell = 0.0;
                        let mut count = 0.0;
                        for ch in 0..lc {
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    cell += noisy.data[(ch * lh + yy) * lw + xx];
                                    count += 1.0;
                                }
                            }
                        }
                        cell /= count;
                        for ch in 0..width {
                            map.data[(ch * side + y) * side + x] = semantic[offsets[j] + ch]
                                + self.cfg.image_coupling * (self.coupling[j][ch] * cell).tanh();
                        }
                    }
                }
                Ok(map)
            })
            .collect()
    }

    fn text_embed(&self, prompt: &str) -> Result<Vec<f64>> {
        let matched = self
            .cfg
            .class_names
            .iter()
            .position(|name| self.cfg.prompt_template.replace("{name}", name) == prompt);
        Ok(match matched {
            Some(y) => self.class_text_vector(y),
            None => {
                let mut v = gaussian_vec(self.cfg.seed, &[stream::SYNTH, 6, hash_str(prompt)], self.semantic_dim());
                normalize(&mut v);
                v
            }
        })
    }
}

/// A Stable Diffusion v1.5 checkout in diffusers layout.
///
/// Opening reads the scheduler configuration and checks that the VAE, U-Net,
/// and text-encoder weights are present. This build carries no tensor runtime
/// for those weights, so the compute methods report the provider as unavailable.
#[derive(Debug, Clone)]
pub struct DiffusionProvider {
    root: PathBuf,
    schedule: NoiseSchedule,
}

const DIFFUSION_WEIGHTS: [&str; 3] = ["vae", "unet", "text_encoder"];

/// Hook points of the SD v1.5 U-Net used for visual features.
pub fn diffusion_layers() -> Vec<(String, usize)> {
    vec![
        ("down_blocks.1".to_string(), 640),
        ("mid_block".to_string(), 1280),
        ("up_blocks.1".to_string(), 1280),
    ]
}

impl DiffusionProvider {
    pub fn open(root: &Path) -> Result<Self> {
        let sched_path = root.join("scheduler").join("scheduler_config.json");
        let text = std::fs::read_to_string(&sched_path)
            .map_err(|e| Error::Provider(format!("cannot read {}: {e}", sched_path.display())))?;
        let schedule = NoiseSchedule::from_scheduler_config(&text)?;
        for part in DIFFUSION_WEIGHTS {
            let dir = root.join(part);
            let has_weights = std::fs::read_dir(&dir)
                .map(|entries| {
                    entries.flatten().any(|e| {
                        let name = e.file_name().to_string_lossy().to_string();
                        name.ends_with(".safetensors") || name.ends_with(".bin")
                    })
                })
                .unwrap_or(false);
            if !has_weights {
                return Err(Error::Provider(format!("no weights found under {}", dir.display())));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            schedule,
        })
    }

    fn unavailable<T>(&self) -> Result<T> {
        Err(Error::Provider(format!(
            "diffusion inference for {} is not available in this build; precompute a feature store with an external runtime or use the synthetic provider",
            self.root.display()
        )))
    }
}

impl FeatureProvider for DiffusionProvider {
    fn kind(&self) -> ProviderKind {
        ProviderKind::Diffusion
    }

    fn id(&self) -> String {
        format!("diffusion:{}", self.root.display())
    }

    fn noise_schedule(&self) -> NoiseSchedule {
        self.schedule.clone()
    }

    fn layers(&self) -> Vec<(String, usize)> {
        diffusion_layers()
    }

    fn text_dim(&self) -> usize {
        768
    }

    fn encode(&self, _image: &Tensor) -> Result<Tensor> {
        self.unavailable()
    }

    fn unet_features(&self, _noisy: &Tensor, _t: usize, _layers: &[String], _ctx: SampleContext) -> Result<Vec<Tensor>> {
        self.unavailable()
    }

    fn text_embed(&self, _prompt: &str) -> Result<Vec<f64>> {
        self.unavailable()
    }
}

/// Draws `n` uniform numbers in [0, 1) from a seeded stream; handy for tests and
/// the synthetic data generator.
pub fn uniform_stream(seed: u64, tag: u64, n: usize) -> Vec<f64> {
    let mut rng = rng_from(derive_seed(seed, &[tag]), &[]);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("class{i}")).collect()
    }

    fn provider() -> SyntheticProvider {
        SyntheticProvider::new(SyntheticProviderConfig::new(names(5), "a photo of a {name}", 3)).unwrap()
    }

    #[test]
    fn synthetic_text_is_deterministic_and_distinct() {
        let p = provider();
        let a = p.text_embed("a photo of a class1").unwrap();
        assert_eq!(a, p.text_embed("a photo of a class1").unwrap());
        let b = p.text_embed("a photo of a class2").unwrap();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos < 0.99);
        assert_eq!(p.text_embed("").unwrap().len(), p.text_dim());
    }

    #[test]
    fn synthetic_encode_downsamples_by_eight() {
        let p = provider();
        let img = Tensor::from_vec([1, 3, 32, 32], vec![0.5; 3 * 32 * 32]).unwrap();
        assert_eq!(p.encode(&img).unwrap().shape, [1, 4, 4, 4]);
        assert!(p.encode(&Tensor::zeros([1, 3, 30, 30])).is_err());
    }

    #[test]
    fn synthetic_unet_requires_label_and_known_layers() {
        let p = provider();
        let noisy = Tensor::zeros([1, 4, 4, 4]);
        let ctx = SampleContext { sample_id: 3, label: None };
        assert!(matches!(p.unet_features(&noisy, 150, &["mid".into()], ctx), Err(Error::Provider(_))));
        let ctx = SampleContext { sample_id: 3, label: Some(1) };
        assert!(matches!(p.unet_features(&noisy, 150, &["nope".into()], ctx), Err(Error::Config(_))));
        let maps = p.unet_features(&noisy, 150, &["down.1".into(), "mid".into()], ctx).unwrap();
        assert_eq!(maps[0].shape, [1, 256, 2, 2]);
        assert_eq!(maps[1].shape, [1, 512, 1, 1]);
    }

    #[test]
    fn diffusion_provider_reports_missing_checkout() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(DiffusionProvider::open(dir.path()), Err(Error::Provider(_))));
        std::fs::create_dir_all(dir.path().join("scheduler")).unwrap();
        std::fs::write(
            dir.path().join("scheduler/scheduler_config.json"),
            r#"{"beta_start":0.00085,"beta_end":0.012,"beta_schedule":"scaled_linear","num_train_timesteps":1000}"#,
        )
        .unwrap();
        for part in DIFFUSION_WEIGHTS {
            std::fs::create_dir_all(dir.path().join(part)).unwrap();
            std::fs::write(dir.path().join(part).join("diffusion_pytorch_model.safetensors"), b"").unwrap();
        }
        let p = DiffusionProvider::open(dir.path()).unwrap();
        assert_eq!(p.noise_schedule(), NoiseSchedule::stable_diffusion());
        assert!(matches!(p.text_embed("a photo of a dog"), Err(Error::Provider(_))));
    }
}

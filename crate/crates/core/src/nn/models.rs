//! Client backbones emitting `(logits, unit-norm feature)` pairs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::*;
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Resnet10,
    Mobilenetv2,
    Tinycnn,
    Linear,
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet10" => Ok(Self::Resnet10),
            "mobilenetv2" => Ok(Self::Mobilenetv2),
            "tinycnn" => Ok(Self::Tinycnn),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

fn default_channels() -> usize {
    3
}
fn default_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub input_channels: usize,
    /// Square input side length.
    #[serde(default = "default_size")]
    pub input_size: usize,
}

impl BackboneSpec {
    pub fn new(architecture: Architecture, num_classes: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            architecture,
            num_classes,
            feature_dim,
            seed,
            input_channels: default_channels(),
            input_size: default_size(),
        }
    }

    pub fn with_input(mut self, channels: usize, size: usize) -> Self {
        self.input_channels = channels;
        self.input_size = size;
        self
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_size, self.input_size]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::Config("num_classes and feature_dim must be positive".into()));
        }
        if self.input_channels == 0 || self.input_size == 0 {
            return Err(Error::Config("input shape must be positive".into()));
        }
        if self.architecture == Architecture::Tinycnn && self.input_size % 8 != 0 {
            return Err(Error::Config(format!(
                "tinycnn needs an input size divisible by 8, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Logits `B x C` and L2-normalized features `B x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub features: Tensor,
}

/// Intermediate state kept by [`ClientModel::forward_train`].
#[derive(Debug)]
pub struct ForwardCache {
    backbone: Cache,
    projection: Cache,
    normalize: Cache,
    classifier: Cache,
}

fn conv_bn(name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Sequential {
    Sequential::new()
        .push(Conv2d::new(format!("{name}.conv"), cin, cout, k, stride, k / 2).grouped(groups))
        .push(BatchNorm2d::new(format!("{name}.bn"), cout))
}

fn basic_block(name: &str, cin: usize, cout: usize, stride: usize) -> Residual {
    let main = Sequential::new()
        .push(Conv2d::new(format!("{name}.conv1"), cin, cout, 3, stride, 1))
        .push(BatchNorm2d::new(format!("{name}.bn1"), cout))
        .push(Relu::plain())
        .push(Conv2d::new(format!("{name}.conv2"), cout, cout, 3, 1, 1))
        .push(BatchNorm2d::new(format!("{name}.bn2"), cout));
    let shortcut = (stride != 1 || cin != cout).then(|| {
        Sequential::new()
            .push(Conv2d::new(format!("{name}.down.conv"), cin, cout, 1, stride, 0))
            .push(BatchNorm2d::new(format!("{name}.down.bn"), cout))
    });
    Residual {
        main,
        shortcut,
        relu_after: true,
    }
}

fn resnet10(channels: usize) -> (Sequential, usize) {
    let widths = [64, 128, 256, 512];
    let mut net = Sequential::new()
        .push(Conv2d::new("stem.conv", channels, widths[0], 3, 1, 1))
        .push(BatchNorm2d::new("stem.bn", widths[0]))
        .push(Relu::plain());
    let mut cin = widths[0];
    for (i, &w) in widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        net = net.push(basic_block(&format!("layer{}", i + 1), cin, w, stride));
        cin = w;
    }
    (net.push(GlobalAvgPool), cin)
}

fn inverted_residual(name: &str, cin: usize, cout: usize, stride: usize, expand: usize) -> Box<dyn Layer> {
    let hidden = cin * expand;
    let mut main = Sequential::new();
    if expand != 1 {
        main = main.push(conv_bn(&format!("{name}.expand"), cin, hidden, 1, 1, 1)).push(Relu::six());
    }
    main = main
        .push(conv_bn(&format!("{name}.dw"), hidden, hidden, 3, stride, hidden))
        .push(Relu::six())
        .push(conv_bn(&format!("{name}.project"), hidden, cout, 1, 1, 1));
    if stride == 1 && cin == cout {
        Box::new(Residual {
            main,
            shortcut: None,
            relu_after: false,
        })
    } else {
        Box::new(main)
    }
}

fn mobilenetv2(channels: usize, input_size: usize) -> (Sequential, usize) {
    // (expansion, out channels, repeats, first stride)
    let settings = [
        (1, 16, 1, 1),
        (6, 24, 2, 1),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];
    let stem_stride = if input_size >= 64 { 2 } else { 1 };
    let mut net = Sequential::new()
        .push(conv_bn("stem", channels, 32, 3, stem_stride, 1))
        .push(Relu::six());
    let mut cin = 32;
    for (si, &(t, c, n, s)) in settings.iter().enumerate() {
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            net.layers.push(inverted_residual(&format!("stage{si}.{i}"), cin, c, stride, t));
            cin = c;
        }
    }
    let last = 1280;
    net = net
        .push(conv_bn("head", cin, last, 1, 1, 1))
        .push(Relu::six())
        .push(GlobalAvgPool);
    (net, last)
}

fn tinycnn(channels: usize, input_size: usize) -> (Sequential, usize) {
    let (c1, c2) = (8, 16);
    let net = Sequential::new()
        .push(Conv2d::new("conv1", channels, c1, 3, 1, 1).with_bias())
        .push(Relu::plain())
        .push(AvgPool2d { size: 2 })
        .push(Conv2d::new("conv2", c1, c2, 3, 1, 1).with_bias())
        .push(Relu::plain())
        .push(AvgPool2d { size: 4 })
        .push(Flatten);
    let side = input_size / 8;
    (net, c2 * side * side)
}

/// Backbone, affine projection head with L2 normalization, and affine classifier.
///
/// The parameter vector is laid out as `[backbone | projection | classifier]`.
#[derive(Debug)]
pub struct ClientModel {
    pub spec: BackboneSpec,
    backbone: Sequential,
    projection: Linear,
    normalize: L2Normalize,
    classifier: Linear,
    params: Vec<f64>,
}

pub fn build_model(spec: &BackboneSpec) -> Result<ClientModel> {
    spec.validate()?;
    let [c, h, _] = spec.input_shape();
    let (backbone, width) = match spec.architecture {
        Architecture::Resnet10 => resnet10(c),
        Architecture::Mobilenetv2 => mobilenetv2(c, h),
        Architecture::Tinycnn => tinycnn(c, h),
        Architecture::Linear => (Sequential::new().push(Flatten), c * h * h),
    };
    let projection = Linear::new("projection", width, spec.feature_dim);
    let classifier = Linear::new("classifier", width, spec.num_classes);
    let total = backbone.param_len() + projection.param_len() + classifier.param_len();
    let mut model = ClientModel {
        spec: spec.clone(),
        backbone,
        projection,
        normalize: L2Normalize::default(),
        classifier,
        params: vec![0.0; total],
    };
    let mut rng = rng_from(spec.seed, &[stream::INIT]);
    let (b, p, c) = model.split_ranges();
    model.backbone.init(&mut model.params[b], &mut rng);
    model.projection.init(&mut model.params[p], &mut rng);
    model.classifier.init(&mut model.params[c], &mut rng);
    Ok(model)
}

type Ranges = (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>);

impl ClientModel {
    fn split_ranges(&self) -> Ranges {
        let b = self.backbone.param_len();
        let p = b + self.projection.param_len();
        (0..b, b..p, p..self.params.len())
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    /// The flattened parameter vector.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return invalid(format!(
                "parameter vector has {} entries, model expects {}",
                params.len(),
                self.params.len()
            ));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut b = self.backbone.blocks();
        b.extend(self.projection.blocks());
        b.extend(self.classifier.blocks());
        b
    }

    /// One flag per parameter entry: true when the entry is trained by gradient descent.
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.blocks()
            .iter()
            .flat_map(|b| std::iter::repeat(b.kind != BlockKind::Buffer).take(b.len()))
            .collect()
    }

    /// Splits the flat vector into named, shaped blocks.
    pub fn unflatten(&self) -> Vec<(ParamBlock, Vec<f64>)> {
        let mut at = 0;
        self.blocks()
            .into_iter()
            .map(|b| {
                let v = self.params[at..at + b.len()].to_vec();
                at += b.len();
                (b, v)
            })
            .collect()
    }

    /// Inverse of [`unflatten`](Self::unflatten).
    pub fn flatten(&mut self, blocks: &[(ParamBlock, Vec<f64>)]) -> Result<()> {
        let expected = self.blocks();
        if blocks.len() != expected.len() {
            return invalid("block count mismatch");
        }
        let mut flat = Vec::with_capacity(self.params.len());
        for ((b, v), e) in blocks.iter().zip(&expected) {
            if b.name != e.name || b.shape != e.shape || v.len() != e.len() {
                return invalid(format!("block `{}` does not match `{}`", b.name, e.name));
            }
            flat.extend_from_slice(v);
        }
        self.params = flat;
        Ok(())
    }

    /// Projection-head weight and bias, for tests that install a known head.
    pub fn projection_slice_mut(&mut self) -> &mut [f64] {
        let (_, p, _) = self.split_ranges();
        &mut self.params[p]
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.batch() == 0 {
            return invalid("empty batch");
        }
        if x.chw() != self.spec.input_shape() {
            return invalid(format!(
                "input shape {:?} does not match model input {:?}",
                x.chw(),
                self.spec.input_shape()
            ));
        }
        Ok(())
    }

    fn run(&self, params: &[f64], x: &Tensor, train: bool) -> (ModelOutput, ForwardCache) {
        let (rb, rp, rc) = self.split_ranges();
        let (h, backbone) = self.backbone.forward(&params[rb], x, train);
        let (z, projection) = self.projection.forward(&params[rp], &h, train);
        let (features, normalize) = self.normalize.forward(&[], &z, train);
        let (logits, classifier) = self.classifier.forward(&params[rc], &h, train);
        (
            ModelOutput { logits, features },
            ForwardCache {
                backbone,
                projection,
                normalize,
                classifier,
            },
        )
    }

    /// Evaluation-mode forward pass; deterministic.
    pub fn forward(&self, x: &Tensor) -> Result<ModelOutput> {
        self.check_input(x)?;
        Ok(self.run(&self.params, x, false).0)
    }

    /// Training-mode forward pass using batch statistics for normalization layers.
    pub fn forward_train(&self, x: &Tensor) -> Result<(ModelOutput, ForwardCache)> {
        self.check_input(x)?;
        Ok(self.run(&self.params, x, true))
    }

    /// Forward with an explicit parameter vector, used by finite-difference checks.
    pub fn forward_with(&self, params: &[f64], x: &Tensor, train: bool) -> Result<ModelOutput> {
        self.check_input(x)?;
        if params.len() != self.params.len() {
            return invalid("parameter length mismatch");
        }
        Ok(self.run(params, x, train).0)
    }

    /// Gradient of a scalar loss w.r.t. every parameter, given the loss gradients
    /// w.r.t. logits and normalized features.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor, grad_features: &Tensor) -> Vec<f64> {
        let (rb, rp, rc) = self.split_ranges();
        let mut grad = vec![0.0; self.params.len()];
        let mut dh = self.classifier.backward(&self.params[rc.clone()], &cache.classifier, grad_logits, &mut grad[rc]);
        let dz = self.normalize.backward(&[], &cache.normalize, grad_features, &mut []);
        dh.add_assign(&self.projection.backward(&self.params[rp.clone()], &cache.projection, &dz, &mut grad[rp]));
        self.backbone.backward(&self.params[rb.clone()], &cache.backbone, &dh, &mut grad[rb]);
        grad
    }

    /// Folds the batch statistics of a training forward pass into the running buffers.
    pub fn update_buffers(&mut self, cache: &ForwardCache) {
        let (rb, _, _) = self.split_ranges();
        self.backbone.update_buffers(&mut self.params[rb], &cache.backbone);
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.spec, &self.params)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    spec: BackboneSpec,
    param_len: usize,
    params_sha256: String,
}

pub const MODEL_JSON: &str = "model.json";
pub const PARAMS_BIN: &str = "params.bin";

pub fn params_to_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("parameter file length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `model.json` (spec + hash) and `params.bin` (little-endian f64) into `dir`.
pub fn save_checkpoint(dir: &Path, spec: &BackboneSpec, params: &[f64]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = params_to_bytes(params);
    let header = CheckpointHeader {
        spec: spec.clone(),
        param_len: params.len(),
        params_sha256: sha256_hex(&bytes),
    };
    let bin = dir.join(PARAMS_BIN);
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(MODEL_JSON);
    fs::write(&json, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(BackboneSpec, Vec<f64>)> {
    let json = dir.join(MODEL_JSON);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    let bin = dir.join(PARAMS_BIN);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if sha256_hex(&bytes) != header.params_sha256 {
        return Err(Error::Integrity(format!("{} does not match its recorded hash", bin.display())));
    }
    let params = params_from_bytes(&bytes)?;
    if params.len() != header.param_len {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, header says {}",
            params.len(),
            header.param_len
        )));
    }
    Ok((header.spec, params))
}

/// Rebuilds a model from a checkpoint directory.
pub fn load_model(dir: &Path) -> Result<ClientModel> {
    let (spec, params) = load_checkpoint(dir)?;
    let mut model = build_model(&spec)?;
    model.set_params(&params)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(spec: &BackboneSpec, batch: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed, &[]);
        let [c, h, w] = spec.input_shape();
        let data = (0..batch * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec([batch, c, h, w], data).unwrap()
    }

    #[test]
    fn same_seed_same_parameters() {
        for arch in [Architecture::Tinycnn, Architecture::Linear, Architecture::Resnet10] {
            let spec = BackboneSpec::new(arch, 10, 16, 7);
            assert_eq!(build_model(&spec).unwrap().params(), build_model(&spec).unwrap().params());
        }
    }

    #[test]
    fn linear_identity_head_normalizes_input() {
        let spec = BackboneSpec::new(Architecture::Linear, 3, 4, 0).with_input(4, 1);
        let mut model = build_model(&spec).unwrap();
        let head = model.projection_slice_mut();
        head.fill(0.0);
        for i in 0..4 {
            head[i * 4 + i] = 1.0;
        }
        let x = Tensor::from_vec([2, 4, 1, 1], vec![3.0, 0.0, 4.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let out = model.forward(&x).unwrap();
        let expect = [0.6, 0.0, 0.8, 0.0, 0.5, 0.5, 0.5, 0.5];
        for (a, b) in out.features.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shapes_and_unit_features() {
        let spec = BackboneSpec::new(Architecture::Tinycnn, 10, 32, 1);
        let model = build_model(&spec).unwrap();
        let out = model.forward(&random_input(&spec, 64, 2)).unwrap();
        assert_eq!(out.logits.shape, [64, 10, 1, 1]);
        assert_eq!(out.features.shape, [64, 32, 1, 1]);
        for i in 0..64 {
            let n: f64 = out.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn duplicated_and_permuted_rows_map_through() {
        let spec = BackboneSpec::new(Architecture::Resnet10, 5, 8, 3).with_input(3, 8);
        let model = build_model(&spec).unwrap();
        let x = random_input(&spec, 3, 4);
        let out = model.forward(&x).unwrap();
        let perm = model.forward(&x.gather(&[2, 0, 0])).unwrap();
        for (dst, src) in [(0usize, 2usize), (1, 0), (2, 0)] {
            for (a, b) in perm.logits.row(dst).iter().zip(out.logits.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in perm.features.row(dst).iter().zip(out.features.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mobilenet_builds_and_runs() {
        let spec = BackboneSpec::new(Architecture::Mobilenetv2, 4, 8, 0).with_input(3, 8);
        let model = build_model(&spec).unwrap();
        let out = model.forward(&random_input(&spec, 2, 0)).unwrap();
        assert_eq!(out.logits.shape, [2, 4, 1, 1]);
        assert!(out.features.is_finite());
    }

    #[test]
    fn unflatten_flatten_round_trip_is_bit_exact() {
        for arch in [Architecture::Tinycnn, Architecture::Linear, Architecture::Resnet10, Architecture::Mobilenetv2] {
            let spec = BackboneSpec::new(arch, 3, 4, 9).with_input(3, 8);
            let mut model = build_model(&spec).unwrap();
            let before = model.params().to_vec();
            let blocks = model.unflatten();
            model.flatten(&blocks).unwrap();
            assert_eq!(
                before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                model.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let spec = BackboneSpec::new(Architecture::Tinycnn, 10, 8, 0);
        let model = build_model(&spec).unwrap();
        let x = Tensor::zeros([1, 3, 16, 16]);
        assert!(matches!(model.forward(&x), Err(Error::InvalidInput(_))));
        assert!(matches!(model.forward(&Tensor::zeros([0, 3, 32, 32])), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn unknown_architecture_is_config_error() {
        assert!(matches!("vgg".parse::<Architecture>(), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BackboneSpec::new(Architecture::Tinycnn, 10, 8, 5);
        let model = build_model(&spec).unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.spec, spec);
        assert_eq!(back.params(), model.params());
        std::fs::write(dir.path().join(PARAMS_BIN), [0u8; 16]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Integrity(_))));
    }
}

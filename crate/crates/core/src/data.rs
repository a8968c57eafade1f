//! Labeled image datasets: CIFAR-10/100 and TinyImageNet loaders plus a
//! seeded synthetic generator that needs no download.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::Command;

use md5::{Digest, Md5};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::Tensor;
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Tinyimagenet,
    Synthetic,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
            Self::Tinyimagenet => "tinyimagenet",
            Self::Synthetic => "synthetic",
        })
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            "tinyimagenet" => Ok(Self::Tinyimagenet),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images stored as `u8` CHW planes, one after another.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub class_names: Vec<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

/// Per-channel affine normalization applied when batches are built.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Sample `i` as a `[1, C, H, W]` tensor with values in [0, 1].
    pub fn image_unit(&self, i: usize) -> Tensor {
        Tensor {
            shape: [1, self.channels, self.height, self.width],
            data: self.image(i).iter().map(|&p| p as f64 / 255.0).collect(),
        }
    }

    /// Normalized network input for the given samples.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| (p as f64 / 255.0 - INPUT_MEAN) / INPUT_STD));
        }
        Tensor {
            shape: [indices.len(), self.channels, self.height, self.width],
            data,
        }
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            kind: self.kind,
            class_names: self.class_names.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: self.labels_of(indices),
        }
    }

    /// Up to `n` indices with class proportions preserved (largest remainder),
    /// sorted ascending.
    pub fn stratified_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        if n >= self.len() {
            return (0..self.len()).collect();
        }
        let counts = self.class_counts();
        let shares: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let quota = crate::partition::largest_remainder(n, &shares);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut rng = rng_from(seed, &[stream::DATA, 1]);
        let mut out = Vec::with_capacity(n);
        for (members, q) in by_class.iter_mut().zip(quota) {
            members.shuffle(&mut rng);
            out.extend_from_slice(&members[..q.min(members.len())]);
        }
        out.sort_unstable();
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.len() * self.image_len() {
            return Err(Error::Format(format!(
                "dataset holds {} pixel bytes for {} images of {} bytes",
                self.pixels.len(),
                self.len(),
                self.image_len()
            )));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes()) {
            return Err(Error::Format(format!("label {y} outside {} classes", self.num_classes())));
        }
        Ok(())
    }
}

/// Parameters of the generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDataSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of per-pixel noise, in [0, 1] pixel units.
    pub noise: f64,
    /// Maximum weight of a random other-class prototype blended into a sample.
    pub confusion: f64,
    pub seed: u64,
}

impl Default for SyntheticDataSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            image_size: 32,
            noise: 0.25,
            confusion: 0.6,
            seed: 0,
        }
    }
}

pub fn synthetic_class_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("pattern{i}")).collect()
}

/// Class prototypes are sums of random low-frequency gratings per channel.
/// Each sample is a randomly shifted prototype, blended with another class's
/// prototype and corrupted by Gaussian pixel noise.
pub fn synthetic_dataset(spec: &SyntheticDataSpec, split: Split) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return invalid("synthetic dataset needs at least two classes");
    }
    if spec.image_size < 8 {
        return invalid("synthetic images must be at least 8 pixels wide");
    }
    let s = spec.image_size;
    let mut proto_rng = rng_from(spec.seed, &[stream::DATA, 2]);
    let prototypes: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let waves: Vec<[f64; 5]> = (0..9)
                .map(|_| {
                    [
                        proto_rng.gen_range(0..3) as f64,
                        proto_rng.gen_range(-3.0f64..3.0).round(),
                        proto_rng.gen_range(-3.0f64..3.0).round(),
                        proto_rng.gen_range(0.0..std::f64::consts::TAU),
                        proto_rng.gen_range(0.1..0.3),
                    ]
                })
                .collect();
            let mut img = vec![0.5; 3 * s * s];
            for [ch, fx, fy, phase, amp] in waves {
                for y in 0..s {
                    for x in 0..s {
                        let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / s as f64 + phase;
                        img[(ch as usize * s + y) * s + x] += amp * arg.sin();
                    }
                }
            }
            img
        })
        .collect();
    let (per_class, tag) = match split {
        Split::Train => (spec.train_per_class, 3),
        Split::Test => (spec.test_per_class, 4),
    };
    let mut rng = rng_from(spec.seed, &[stream::DATA, tag]);
    let n = per_class * spec.num_classes;
    let mut pixels = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % spec.num_classes;
        let other = (y + rng.gen_range(1..spec.num_classes)) % spec.num_classes;
        let w = rng.gen_range(0.0..spec.confusion);
        let (dx, dy) = (rng.gen_range(0..s), rng.gen_range(0..s));
        for ch in 0..3 {
            for yy in 0..s {
                for xx in 0..s {
                    let src = (ch * s + (yy + dy) % s) * s + (xx + dx) % s;
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let v = (1.0 - w) * prototypes[y][src] + w * prototypes[other][src] + spec.noise * eps;
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(y);
    }
    Ok(Dataset {
        kind: DatasetKind::Synthetic,
        class_names: synthetic_class_names(spec.num_classes),
        channels: 3,
        height: s,
        width: s,
        pixels,
        labels,
    })
}

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

struct Archive {
    url: &'static str,
    file: &'static str,
    md5: &'static str,
    dir: &'static str,
}

fn archive(kind: DatasetKind) -> Option<Archive> {
    match kind {
        DatasetKind::Cifar10 => Some(Archive {
            url: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
            file: "cifar-10-binary.tar.gz",
            md5: "c32a1d4ab5d03f1284b67883e8d87530",
            dir: "cifar-10-batches-bin",
        }),
        DatasetKind::Cifar100 => Some(Archive {
            url: "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
            file: "cifar-100-binary.tar.gz",
            md5: "03b5dce01913d631647c71ecec9e9cb8",
            dir: "cifar-100-binary",
        }),
        DatasetKind::Tinyimagenet => Some(Archive {
            url: "http://cs231n.stanford.edu/tiny-imagenet-200.zip",
            file: "tiny-imagenet-200.zip",
            md5: "90528d7ca1a48142e341f4ef8d21d0de",
            dir: "tiny-imagenet-200",
        }),
        DatasetKind::Synthetic => None,
    }
}

pub fn md5_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Md5::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn run(cmd: &mut Command) -> Result<()> {
    let status = cmd
        .status()
        .map_err(|e| Error::Provider(format!("cannot run {:?}: {e}", cmd.get_program())))?;
    if !status.success() {
        return Err(Error::Provider(format!("{:?} exited with {status}", cmd.get_program())));
    }
    Ok(())
}

/// Fetches and unpacks the archive for `kind` into `cache`, verifying its MD5.
/// Returns the extracted directory. Existing extractions are reused.
pub fn ensure_downloaded(kind: DatasetKind, cache: &Path) -> Result<PathBuf> {
    let arc = archive(kind).ok_or_else(|| Error::Config(format!("{kind} needs no download")))?;
    let dir = cache.join(arc.dir);
    if dir.is_dir() {
        return Ok(dir);
    }
    fs::create_dir_all(cache).map_err(|e| Error::io(cache, e))?;
    let file = cache.join(arc.file);
    if !file.is_file() {
        log::info!("downloading {} to {}", arc.url, file.display());
        run(Command::new("curl").args(["-fL", "--retry", "3", "-o"]).arg(&file).arg(arc.url))?;
    }
    let digest = md5_file(&file)?;
    if digest != arc.md5 {
        return Err(Error::Integrity(format!(
            "{} has md5 {digest}, expected {}",
            file.display(),
            arc.md5
        )));
    }
    if arc.file.ends_with(".zip") {
        run(Command::new("unzip").arg("-q").arg(&file).arg("-d").arg(cache))?;
    } else {
        run(Command::new("tar").arg("-xzf").arg(&file).arg("-C").arg(cache))?;
    }
    Ok(dir)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_cifar_records(bytes: &[u8], label_bytes: usize, label_at: usize, out_pixels: &mut Vec<u8>, out_labels: &mut Vec<usize>) -> Result<()> {
    let rec = label_bytes + 3072;
    if bytes.len() % rec != 0 {
        return Err(Error::Format(format!("CIFAR batch of {} bytes is not a multiple of {rec}", bytes.len())));
    }
    for r in bytes.chunks_exact(rec) {
        out_labels.push(r[label_at] as usize);
        out_pixels.extend_from_slice(&r[label_bytes..]);
    }
    Ok(())
}

/// Loads a dataset split from `root`, downloading into `root` when allowed.
pub fn load_dataset(kind: DatasetKind, root: &Path, split: Split, download: bool, synthetic: &SyntheticDataSpec) -> Result<Dataset> {
    if kind == DatasetKind::Synthetic {
        return synthetic_dataset(synthetic, split);
    }
    let arc = archive(kind).expect("non-synthetic datasets have archives");
    let dir = root.join(arc.dir);
    let dir = if dir.is_dir() {
        dir
    } else if download {
        ensure_downloaded(kind, root)?
    } else {
        return Err(Error::MissingInputs(vec![dir.display().to_string()]));
    };
    let ds = match kind {
        DatasetKind::Cifar10 => {
            let files: Vec<String> = match split {
                Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                Split::Test => vec!["test_batch.bin".into()],
            };
            let (mut pixels, mut labels) = (Vec::new(), Vec::new());
            for f in files {
                parse_cifar_records(&read_file(&dir.join(f))?, 1, 0, &mut pixels, &mut labels)?;
            }
            Dataset {
                kind,
                class_names: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
                channels: 3,
                height: 32,
                width: 32,
                pixels,
                labels,
            }
        }
        DatasetKind::Cifar100 => {
            let f = match split {
                Split::Train => "train.bin",
                Split::Test => "test.bin",
            };
            let (mut pixels, mut labels) = (Vec::new(), Vec::new());
            parse_cifar_records(&read_file(&dir.join(f))?, 2, 1, &mut pixels, &mut labels)?;
            let names_path = dir.join("fine_label_names.txt");
            let names = fs::read_to_string(&names_path).map_err(|e| Error::io(&names_path, e))?;
            Dataset {
                kind,
                class_names: names.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| l.replace('_', " ")).collect(),
                channels: 3,
                height: 32,
                width: 32,
                pixels,
                labels,
            }
        }
        DatasetKind::Tinyimagenet => load_tinyimagenet(&dir, split)?,
        DatasetKind::Synthetic => unreachable!(),
    };
    ds.validate()?;
    Ok(ds)
}

fn decode_rgb(path: &Path, out: &mut Vec<u8>) -> Result<()> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    if img.dimensions() != (64, 64) {
        return Err(Error::Format(format!("{} is not 64x64", path.display())));
    }
    for ch in 0..3 {
        out.extend(img.pixels().map(|p| p.0[ch]));
    }
    Ok(())
}

fn load_tinyimagenet(dir: &Path, split: Split) -> Result<Dataset> {
    let wnids_path = dir.join("wnids.txt");
    let wnids: Vec<String> = fs::read_to_string(&wnids_path)
        .map_err(|e| Error::io(&wnids_path, e))?
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let words_path = dir.join("words.txt");
    let words = fs::read_to_string(&words_path).unwrap_or_default();
    let class_names = wnids
        .iter()
        .map(|w| {
            words
                .lines()
                .find_map(|l| l.strip_prefix(&format!("{w}\t")))
                .and_then(|names| names.split(',').next())
                .map(|n| n.trim().to_string())
                .unwrap_or_else(|| w.clone())
        })
        .collect();
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    match split {
        Split::Train => {
            for (y, w) in wnids.iter().enumerate() {
                let img_dir = dir.join("train").join(w).join("images");
                let mut files: Vec<PathBuf> = fs::read_dir(&img_dir)
                    .map_err(|e| Error::io(&img_dir, e))?
                    .flatten()
                    .map(|e| e.path())
                    .collect();
                files.sort();
                for f in files {
                    decode_rgb(&f, &mut pixels)?;
                    labels.push(y);
                }
            }
        }
        Split::Test => {
            let ann_path = dir.join("val").join("val_annotations.txt");
            let ann = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
            for line in ann.lines() {
                let mut cols = line.split('\t');
                let (Some(file), Some(w)) = (cols.next(), cols.next()) else { continue };
                let y = wnids
                    .iter()
                    .position(|x| x == w)
                    .ok_or_else(|| Error::Format(format!("unknown wnid {w} in {}", ann_path.display())))?;
                decode_rgb(&dir.join("val").join("images").join(file), &mut pixels)?;
                labels.push(y);
            }
        }
    }
    Ok(Dataset {
        kind: DatasetKind::Tinyimagenet,
        class_names,
        channels: 3,
        height: 64,
        width: 64,
        pixels,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticDataSpec {
            train_per_class: 20,
            test_per_class: 5,
            ..Default::default()
        };
        let a = synthetic_dataset(&spec, Split::Train).unwrap();
        assert_eq!(a, synthetic_dataset(&spec, Split::Train).unwrap());
        assert_eq!(a.class_counts(), vec![20; 10]);
        assert_eq!(a.len(), 200);
        a.validate().unwrap();
        let t = synthetic_dataset(&spec, Split::Test).unwrap();
        assert_ne!(t.image(0), a.image(0));
    }

    #[test]
    fn stratified_subset_keeps_proportions() {
        let spec = SyntheticDataSpec {
            train_per_class: 30,
            ..Default::default()
        };
        let ds = synthetic_dataset(&spec, Split::Train).unwrap();
        let idx = ds.stratified_indices(100, 1);
        assert_eq!(idx.len(), 100);
        assert_eq!(ds.subset(&idx).class_counts(), vec![10; 10]);
    }

    #[test]
    fn cifar_records_parse() {
        let mut bytes = vec![3u8];
        bytes.extend(vec![7u8; 3072]);
        let (mut p, mut l) = (Vec::new(), Vec::new());
        parse_cifar_records(&bytes, 1, 0, &mut p, &mut l).unwrap();
        assert_eq!(l, vec![3]);
        assert_eq!(p.len(), 3072);
        assert!(parse_cifar_records(&bytes[..100], 1, 0, &mut p, &mut l).is_err());
    }

    #[test]
    fn missing_archive_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(DatasetKind::Cifar10, dir.path(), Split::Train, false, &SyntheticDataSpec::default()).unwrap_err();
        assert!(matches!(err, Error::MissingInputs(_)));
    }
}

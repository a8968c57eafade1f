//! Experiment configuration, the run/sweep/ablation harness, and metrics files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, Dataset, DatasetKind, Split, SyntheticDataSpec};
use crate::error::{Error, Result};
use crate::features::{
    build_store, load_store_for, save_store, FeatureExtractionConfig, FeatureProvider, FeatureStore, ProviderKind,
    SyntheticProvider, SyntheticProviderConfig,
};
use crate::fl::{initial_state, run_rounds, Algorithm, Federation, GlobalState, MetricsRecord, RoundConfig, RunOptions};
use crate::nn::models::sha256_hex;
use crate::nn::{save_checkpoint, Architecture, BackboneSpec};
use crate::partition::{partition, PartitionMap, PartitionSpec};
use crate::rng::derive_seed;

fn d_name() -> String {
    "run".into()
}
fn d_rounds() -> usize {
    100
}
fn d_output() -> PathBuf {
    PathBuf::from("runs")
}
fn d_root() -> PathBuf {
    PathBuf::from("data")
}
fn d_tsne_samples() -> usize {
    500
}
fn d_perplexity() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_root")]
    pub root: PathBuf,
    #[serde(default)]
    pub download: bool,
    /// Stratified training subset size; all samples when absent.
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub synthetic: SyntheticDataSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: d_root(),
            download: false,
            train_subset: None,
            test_subset: None,
            synthetic: SyntheticDataSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    #[serde(default = "d_tsne_samples")]
    pub tsne_samples: usize,
    #[serde(default = "d_perplexity")]
    pub perplexity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            tsne_samples: d_tsne_samples(),
            perplexity: d_perplexity(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_name")]
    pub name: String,
    pub dataset: DatasetKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    pub provider: ProviderKind,
    /// Feature store location; defaults to `<output_dir>/features`.
    #[serde(default)]
    pub store_dir: Option<PathBuf>,
    /// Write measured round times into the metrics file. Off by default so
    /// reruns produce identical files; timings always go to `timing.json`.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub data: DataConfig,
    pub partition: PartitionSpec,
    #[serde(default)]
    pub round: RoundConfig,
    #[serde(default)]
    pub extraction: FeatureExtractionConfig,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub plot: PlotConfig,
}

pub const PRESETS: [&str; 3] = ["smoke", "desk", "desk-synthetic"];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Shipped configurations: `smoke` (synthetic data, K=2, R=2), `desk`
    /// (5,000-sample CIFAR-10 subset, K=5, alpha=0.1, R=20), and
    /// `desk-synthetic` (the desk setup on generated data).
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = match name {
            "smoke" => Self {
                name: "smoke".into(),
                dataset: DatasetKind::Synthetic,
                seed: 0,
                rounds: 2,
                output_dir: PathBuf::from("runs/smoke"),
                provider: ProviderKind::Synthetic,
                store_dir: None,
                record_wall_time: false,
                data: DataConfig {
                    synthetic: SyntheticDataSpec {
                        num_classes: 4,
                        train_per_class: 24,
                        test_per_class: 8,
                        image_size: 16,
                        ..SyntheticDataSpec::default()
                    },
                    ..DataConfig::default()
                },
                partition: PartitionSpec::dirichlet(2, 0.5, 0),
                round: RoundConfig {
                    clients_per_round: 2,
                    local_epochs: 1,
                    batch_size: 16,
                    ..RoundConfig::default()
                },
                extraction: FeatureExtractionConfig {
                    feature_dim: 32,
                    ..FeatureExtractionConfig::default()
                },
                backbone: BackboneSpec::new(Architecture::Tinycnn, 4, 32, 0).with_input(3, 16),
                plot: PlotConfig {
                    tsne_samples: 32,
                    perplexity: 5.0,
                    seed: 0,
                },
            },
            "desk" | "desk-synthetic" => {
                let synthetic = name == "desk-synthetic";
                Self {
                    name: name.into(),
                    dataset: if synthetic { DatasetKind::Synthetic } else { DatasetKind::Cifar10 },
                    seed: 0,
                    rounds: 20,
                    output_dir: PathBuf::from(format!("runs/{name}")),
                    provider: ProviderKind::Synthetic,
                    store_dir: None,
                    record_wall_time: false,
                    data: DataConfig {
                        train_subset: Some(5000),
                        test_subset: Some(2000),
                        synthetic: SyntheticDataSpec {
                            train_per_class: 500,
                            test_per_class: 200,
                            ..SyntheticDataSpec::default()
                        },
                        ..DataConfig::default()
                    },
                    partition: PartitionSpec::dirichlet(5, 0.1, 0),
                    round: RoundConfig {
                        clients_per_round: 5,
                        local_epochs: 2,
                        ..RoundConfig::default()
                    },
                    extraction: FeatureExtractionConfig::default(),
                    backbone: BackboneSpec::new(Architecture::Tinycnn, 10, 512, 0),
                    plot: PlotConfig::default(),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}`; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        cfg.apply_seed(0);
        Ok(cfg)
    }

    /// Sets the run seed and derives every component seed from it.
    pub fn apply_seed(&mut self, seed: u64) {
        // TOML integers are signed 64-bit.
        let sub = |tag: u64| derive_seed(seed, &[tag]) >> 1;
        self.seed = seed;
        self.partition.seed = sub(1);
        self.round.seed = sub(2);
        self.backbone.seed = sub(3);
        self.extraction.seed = sub(4);
        self.data.synthetic.seed = sub(5);
        self.plot.seed = sub(6);
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.apply_seed(seed);
        self
    }

    /// Identity of everything that affects results (the output location does not).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.store_dir = None;
        c.record_wall_time = false;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
            DatasetKind::Tinyimagenet => 200,
            DatasetKind::Synthetic => self.data.synthetic.num_classes,
        }
    }

    pub fn image_size(&self) -> usize {
        match self.dataset {
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => 32,
            DatasetKind::Tinyimagenet => 64,
            DatasetKind::Synthetic => self.data.synthetic.image_size,
        }
    }

    pub fn store_path(&self) -> PathBuf {
        self.store_dir.clone().unwrap_or_else(|| self.output_dir.join("features"))
    }

    /// Every problem found, reported together before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let c = self.num_classes();
        if self.backbone.num_classes != c {
            problems.push(format!("backbone.num_classes is {} but {} has {c} classes", self.backbone.num_classes, self.dataset));
        }
        if self.backbone.feature_dim != self.extraction.feature_dim {
            problems.push(format!(
                "backbone.feature_dim {} differs from extraction.feature_dim {}",
                self.backbone.feature_dim, self.extraction.feature_dim
            ));
        }
        if self.backbone.input_size != self.image_size() {
            problems.push(format!(
                "backbone.input_size {} differs from the {}-pixel images of {}",
                self.backbone.input_size,
                self.image_size(),
                self.dataset
            ));
        }
        if self.backbone.input_channels != 3 {
            problems.push("backbone.input_channels must be 3 for RGB datasets".into());
        }
        if let Err(e) = self.backbone.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.partition.validate(Some(c)) {
            problems.push(e.to_string());
        }
        problems.extend(self.round.problems(self.partition.num_clients));
        if let Some(n) = self.data.train_subset {
            if n < self.partition.num_clients {
                problems.push(format!("train_subset {n} is smaller than the number of clients"));
            }
        }
        if self.data.test_subset == Some(0) {
            problems.push("test_subset must be positive".into());
        }
        if self.dataset == DatasetKind::Synthetic {
            let s = &self.data.synthetic;
            if s.num_classes < 2 || s.train_per_class == 0 || s.test_per_class == 0 {
                problems.push("synthetic data needs >= 2 classes and non-empty splits".into());
            }
        }
        if !self.extraction.prompt_template.contains("{name}") {
            problems.push("extraction.prompt_template must contain `{name}`".into());
        }
        if self.extraction.timestep < 1 {
            problems.push("extraction.timestep must be at least 1".into());
        }
        if !(self.plot.perplexity > 0.0) {
            problems.push("plot.perplexity must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn synthetic_provider(&self, class_names: &[String]) -> Result<SyntheticProvider> {
        SyntheticProvider::new(SyntheticProviderConfig::new(
            class_names.to_vec(),
            self.extraction.prompt_template.clone(),
            self.extraction.seed,
        ))
    }
}

/// Training and test splits after subsetting.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = load_dataset(cfg.dataset, &cfg.data.root, Split::Train, cfg.data.download, &cfg.data.synthetic)?;
    let test = load_dataset(cfg.dataset, &cfg.data.root, Split::Test, cfg.data.download, &cfg.data.synthetic)?;
    let sub = |ds: Dataset, n: Option<usize>, tag: u64| match n {
        Some(n) if n < ds.len() => {
            let idx = ds.stratified_indices(n, derive_seed(cfg.seed, &[tag]));
            ds.subset(&idx)
        }
        _ => ds,
    };
    Ok((sub(train, cfg.data.train_subset, 10), sub(test, cfg.data.test_subset, 11)))
}

/// Loads the configured store, or builds and saves one with the synthetic provider.
pub fn obtain_store(cfg: &ExperimentConfig, train: &Dataset) -> Result<FeatureStore> {
    let dir = cfg.store_path();
    let store = if dir.join("manifest.json").is_file() {
        load_store_for(&dir, &cfg.extraction)?
    } else {
        match cfg.provider {
            ProviderKind::Diffusion => {
                return Err(Error::MissingStore {
                    path: dir,
                    dataset: cfg.dataset.to_string(),
                })
            }
            ProviderKind::Synthetic => {
                let provider = cfg.synthetic_provider(&train.class_names)?;
                let ids: Vec<usize> = (0..train.len()).collect();
                let store = build_store(train, &ids, &cfg.extraction, &provider as &dyn FeatureProvider, None)?;
                save_store(&store, &dir)?;
                store
            }
        }
    };
    if store.visual.len() != train.len() || store.text.class_names != train.class_names {
        return Err(Error::Integrity(format!(
            "feature store at {} covers {} samples / {} classes, training set has {} / {}",
            dir.display(),
            store.visual.len(),
            store.text.num_classes(),
            train.len(),
            train.num_classes()
        )));
    }
    Ok(store)
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONFIG_TOML: &str = "config.toml";
pub const PARTITION_JSON: &str = "partition.json";
pub const MODEL_DIR: &str = "model";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_COLUMNS: [&str; 7] = ["round", "test_acc", "mean_ce", "mean_kd", "mean_con", "clients", "wall_time_s"];

pub fn write_metrics(path: &Path, records: &[MetricsRecord], record_wall_time: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_COLUMNS)?;
    for r in records {
        let clients = r.clients.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
        let wall = if record_wall_time { r.wall_time_s } else { 0.0 };
        w.write_record([
            r.round.to_string(),
            r.test_acc.to_string(),
            r.mean_ce.to_string(),
            r.mean_kd.to_string(),
            r.mean_con.to_string(),
            clients,
            wall.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Format(format!("{} has columns {header:?}", path.display())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{}: {e}", path.display())));
    r.records()
        .map(|row| {
            let row = row?;
            Ok(MetricsRecord {
                round: row[0].parse().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
                test_acc: num(&row[1])?,
                mean_ce: num(&row[2])?,
                mean_kd: num(&row[3])?,
                mean_con: num(&row[4])?,
                clients: row[5]
                    .split(';')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
                    .collect::<Result<_>>()?,
                wall_time_s: num(&row[6])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_acc: f64,
    pub best_acc: f64,
    pub best_round: usize,
    pub config_hash: String,
}

pub fn summarize(history: &[MetricsRecord], config_hash: &str) -> Summary {
    let (best_round, best_acc) = history
        .iter()
        .fold((0, 0.0), |(br, ba), r| if r.test_acc > ba { (r.round, r.test_acc) } else { (br, ba) });
    Summary {
        final_acc: history.last().map_or(0.0, |r| r.test_acc),
        best_acc,
        best_round,
        config_hash: config_hash.to_string(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunResult {
    pub dir: PathBuf,
    pub summary: Summary,
    pub state: GlobalState,
}

/// Options for partially executing a run (used to exercise resume).
#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    pub stop_after: Option<usize>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    run_experiment_with(cfg, RunControl::default())
}

/// partition -> (extract) -> rounds, writing the config snapshot, partition,
/// metrics, final checkpoint, and summary into `cfg.output_dir`.
pub fn run_experiment_with(cfg: &ExperimentConfig, control: RunControl) -> Result<RunResult> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join(CONFIG_TOML), &cfg.to_toml())?;
    let started = Instant::now();
    let (train, test) = load_splits(cfg)?;
    let map: PartitionMap = partition(&train.labels, &cfg.partition)?;
    write_text(&dir.join(PARTITION_JSON), &map.to_json()?)?;
    let store = if cfg.round.needs_anchors() {
        Some(obtain_store(cfg, &train)?)
    } else {
        None
    };
    let hash = cfg.hash();
    let fed = Federation {
        spec: &cfg.backbone,
        train: &train,
        test: &test,
        partition: &map,
        store: store.as_ref(),
    };
    let ckpt = dir.join(CHECKPOINT_DIR);
    let opts = RunOptions {
        checkpoint_dir: Some(&ckpt),
        config_hash: hash.clone(),
        max_new_rounds: control.stop_after,
    };
    let state = run_rounds(initial_state(&cfg.backbone)?, fed, &cfg.round, cfg.rounds, &opts)?;
    write_metrics(&dir.join(METRICS_CSV), &state.history, cfg.record_wall_time)?;
    let timing: Vec<(usize, f64)> = state.history.iter().map(|r| (r.round, r.wall_time_s)).collect();
    write_text(
        &dir.join("timing.json"),
        &serde_json::to_string_pretty(&serde_json::json!({
            "rounds": timing,
            "total_s": started.elapsed().as_secs_f64(),
        }))?,
    )?;
    save_checkpoint(&dir.join(MODEL_DIR), &cfg.backbone, &state.params)?;
    let summary = summarize(&state.history, &hash);
    write_text(&dir.join(SUMMARY_JSON), &serde_json::to_string_pretty(&summary)?)?;
    Ok(RunResult { dir, summary, state })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Temperature,
    Clients,
    Epochs,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" | "tau" => Ok(Self::Temperature),
            "clients" => Ok(Self::Clients),
            "epochs" => Ok(Self::Epochs),
            other => Err(Error::Config(format!("unknown sweep axis `{other}` (temperature, clients, epochs)"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Temperature => "temperature",
            Self::Clients => "clients",
            Self::Epochs => "epochs",
        })
    }
}

impl SweepAxis {
    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        let as_count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{self} values must be positive integers, got {v}")))
            }
        };
        match self {
            Self::Temperature => {
                if !(value > 0.0) {
                    return Err(Error::Config(format!("temperature must be positive, got {value}")));
                }
                cfg.round.weights.tau = value;
            }
            Self::Clients => {
                let k = as_count(value)?;
                cfg.partition.num_clients = k;
                cfg.round.clients_per_round = cfg.round.clients_per_round.min(k);
            }
            Self::Epochs => cfg.round.local_epochs = as_count(value)?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub status: String,
    pub final_acc: Option<f64>,
    pub best_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub runs: usize,
    pub failed: usize,
}

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SUMMARY_CSV: &str = "sweep_summary.csv";

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn value_label(v: f64) -> String {
    v.to_string()
}

/// One run per (value, seed) under `out/<axis>=<value>/seed=<seed>`. Failing
/// cells are recorded and do not stop the sweep.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], seeds: &[u64], out: &Path) -> Result<Vec<SweepPoint>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one value and one seed".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut cells = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut cfg = base.clone().with_seed(seed);
            cfg.name = format!("{}-{axis}={}", base.name, value_label(value));
            cfg.output_dir = out.join(format!("{axis}={}", value_label(value))).join(format!("seed={seed}"));
            if cfg.store_dir.is_none() {
                cfg.store_dir = Some(out.join(format!("features-seed={seed}")));
            }
            let outcome = axis.apply(&mut cfg, value).and_then(|_| run_experiment(&cfg));
            cells.push(match outcome {
                Ok(r) => SweepCell {
                    value,
                    seed,
                    status: "ok".into(),
                    final_acc: Some(r.summary.final_acc),
                    best_acc: Some(r.summary.best_acc),
                },
                Err(e) => {
                    log::warn!("sweep cell {axis}={value} seed={seed} failed: {e}");
                    SweepCell {
                        value,
                        seed,
                        status: format!("failed: {e}"),
                        final_acc: None,
                        best_acc: None,
                    }
                }
            });
        }
    }
    let mut w = csv::Writer::from_path(out.join(SWEEP_CSV))?;
    w.write_record(["axis", "value", "seed", "status", "final_acc", "best_acc"])?;
    for c in &cells {
        w.write_record([
            axis.to_string(),
            value_label(c.value),
            c.seed.to_string(),
            c.status.clone(),
            c.final_acc.map_or(String::new(), |v| v.to_string()),
            c.best_acc.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let points: Vec<SweepPoint> = values
        .iter()
        .map(|&v| {
            let accs: Vec<f64> = cells.iter().filter(|c| c.value == v).filter_map(|c| c.final_acc).collect();
            let failed = cells.iter().filter(|c| c.value == v && c.final_acc.is_none()).count();
            let (mean_acc, std_acc) = mean_std(&accs);
            SweepPoint {
                value: v,
                mean_acc,
                std_acc,
                runs: accs.len(),
                failed,
            }
        })
        .collect();
    write_sweep_summary(&out.join(SWEEP_SUMMARY_CSV), axis, &points)?;
    Ok(points)
}

pub fn write_sweep_summary(path: &Path, axis: SweepAxis, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["axis", "value", "mean_acc", "std_acc", "runs", "failed"])?;
    for p in points {
        w.write_record([
            axis.to_string(),
            value_label(p.value),
            p.mean_acc.to_string(),
            p.std_acc.to_string(),
            p.runs.to_string(),
            p.failed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_summary(path: &Path) -> Result<(SweepAxis, Vec<SweepPoint>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut axis = None;
    let mut points = Vec::new();
    let bad = |e: String| Error::Format(format!("{}: {e}", path.display()));
    for row in r.records() {
        let row = row?;
        axis = Some(row[0].parse::<SweepAxis>()?);
        points.push(SweepPoint {
            value: row[1].parse().map_err(|e| bad(format!("{e}")))?,
            mean_acc: row[2].parse().map_err(|e| bad(format!("{e}")))?,
            std_acc: row[3].parse().map_err(|e| bad(format!("{e}")))?,
            runs: row[4].parse().map_err(|e| bad(format!("{e}")))?,
            failed: row[5].parse().map_err(|e| bad(format!("{e}")))?,
        });
    }
    let axis = axis.ok_or_else(|| bad("empty sweep summary".into()))?;
    Ok((axis, points))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub semantic_losses: bool,
    pub feature_guidance: bool,
    pub accs: Vec<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
}

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_MD: &str = "ablation.md";

/// The 2x2 grid over {contrastive text alignment} x {visual distillation},
/// each cell run under every seed. The all-off cell is plain FedAvg.
pub fn reproduce_ablation(base: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<AblationCell>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut cells = Vec::new();
    for (semantic, guidance) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut accs = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone().with_seed(seed);
            cfg.round.algorithm = Algorithm::Semanticfl;
            if !semantic {
                cfg.round.weights.lambda_con = 0.0;
            }
            if !guidance {
                cfg.round.weights.lambda_kd = 0.0;
            }
            let tag = format!("sem={}-kd={}", semantic as u8, guidance as u8);
            cfg.name = format!("{}-{tag}", base.name);
            cfg.output_dir = out.join(&tag).join(format!("seed={seed}"));
            if cfg.store_dir.is_none() {
                cfg.store_dir = Some(out.join(format!("features-seed={seed}")));
            }
            accs.push(run_experiment(&cfg)?.summary.final_acc);
        }
        let (mean_acc, std_acc) = mean_std(&accs);
        cells.push(AblationCell {
            semantic_losses: semantic,
            feature_guidance: guidance,
            accs,
            mean_acc,
            std_acc,
        });
    }
    let mut w = csv::Writer::from_path(out.join(ABLATION_CSV))?;
    w.write_record(["semantic_losses", "feature_guidance", "mean_acc", "std_acc", "accs"])?;
    for c in &cells {
        w.write_record([
            c.semantic_losses.to_string(),
            c.feature_guidance.to_string(),
            c.mean_acc.to_string(),
            c.std_acc.to_string(),
            c.accs.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    write_text(&out.join(ABLATION_MD), &ablation_table(&cells, seeds.len()))?;
    Ok(cells)
}

pub fn ablation_table(cells: &[AblationCell], seeds: usize) -> String {
    let mark = |b: bool| if b { "✓" } else { "" };
    let mut s = format!("| Semantic losses | Feature guidance | Top-1 acc (%), mean ± std over {seeds} seed(s) |\n|:-:|:-:|:-:|\n");
    for c in cells {
        s.push_str(&format!(
            "| {} | {} | {:.2} ± {:.2} |\n",
            mark(c.semantic_losses),
            mark(c.feature_guidance),
            100.0 * c.mean_acc,
            100.0 * c.std_acc
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
        assert!(ExperimentConfig::preset("huge").unwrap_err().is_config());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::preset("smoke").unwrap().to_toml();
        text.push_str("\nlearning_rat = 0.1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = ExperimentConfig::preset("smoke").unwrap();
        cfg.backbone.num_classes = 7;
        cfg.extraction.feature_dim = 8;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("num_classes") && msg.contains("feature_dim"), "{msg}");
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::preset("smoke").unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.clone().with_seed(1).hash());
    }

    #[test]
    fn mean_std_sample_convention() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}

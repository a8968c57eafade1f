use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semanticfl::data::DatasetKind;
use semanticfl::experiments::{
    load_splits, reproduce_ablation, run_experiment, run_sweep, ExperimentConfig, SweepAxis, PRESETS,
};
use semanticfl::features::{build_store, save_store, DiffusionProvider, FeatureProvider, ProviderKind};
use semanticfl::fl::{evaluate, Algorithm};
use semanticfl::nn::load_model;
use semanticfl::partition::{partition, partition_stats, Scenario};
use semanticfl::plots::emit_plots;
use semanticfl::{Error, Result};

#[derive(Parser)]
#[command(name = "semanticfl", version, about = "Federated learning with diffusion-derived semantic anchors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigSource {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: smoke, desk, desk-synthetic.
    #[arg(long)]
    preset: Option<String>,
    /// Run seed; every component seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => {
                return Err(Error::Config(format!(
                    "pass --config <file> or --preset <{}>",
                    PRESETS.join("|")
                )))
            }
        };
        if let Some(seed) = self.seed {
            cfg.apply_seed(seed);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Extract visual and text anchors into a feature store.
    ExtractFeatures {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        dataset: Option<DatasetKind>,
        #[arg(long, default_value = "synthetic")]
        provider: ProviderKind,
        /// Diffusers-layout model directory (diffusion provider).
        #[arg(long)]
        model_dir: Option<PathBuf>,
        #[arg(long)]
        timestep: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        download: bool,
    },
    /// Partition a dataset's training split and write the partition JSON.
    Partition {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        classes_per_client: Option<usize>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 2x2 component ablation.
    Ablation {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render figures for a run or sweep directory.
    Plot {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on the configured test split.
    Evaluate {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print a configuration as TOML.
    ShowConfig {
        #[command(flatten)]
        source: ConfigSource,
    },
}

fn store_from(cfg: &ExperimentConfig, provider: ProviderKind, model_dir: Option<&Path>, out: &Path) -> Result<()> {
    let (train, _) = load_splits(cfg)?;
    let ids: Vec<usize> = (0..train.len()).collect();
    let store = match provider {
        ProviderKind::Synthetic => {
            let p = cfg.synthetic_provider(&train.class_names)?;
            build_store(&train, &ids, &cfg.extraction, &p as &dyn FeatureProvider, None)?
        }
        ProviderKind::Diffusion => {
            let dir = model_dir.ok_or_else(|| Error::Config("--model-dir is required for the diffusion provider".into()))?;
            let p = DiffusionProvider::open(dir)?;
            build_store(&train, &ids, &cfg.extraction, &p as &dyn FeatureProvider, None)?
        }
    };
    save_store(&store, out)?;
    println!(
        "wrote {} visual and {} text anchors (d={}) to {}",
        store.visual.len(),
        store.text.num_classes(),
        store.dim(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractFeatures {
            source,
            dataset,
            provider,
            model_dir,
            timestep,
            dim,
            out,
            data_root,
            download,
        } => {
            let mut cfg = if source.config.is_none() && source.preset.is_none() {
                let mut c = ExperimentConfig::preset("desk")?;
                c.data.train_subset = None;
                c.data.test_subset = None;
                if let Some(seed) = source.seed {
                    c.apply_seed(seed);
                }
                c
            } else {
                source.load()?
            };
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            if let Some(t) = timestep {
                cfg.extraction.timestep = t;
            }
            if let Some(d) = dim {
                cfg.extraction.feature_dim = d;
                cfg.backbone.feature_dim = d;
            }
            if let Some(root) = data_root {
                cfg.data.root = root;
            }
            cfg.data.download |= download;
            cfg.backbone.num_classes = cfg.num_classes();
            cfg.backbone.input_size = cfg.image_size();
            cfg.provider = provider;
            cfg.validate()?;
            let out = out.unwrap_or_else(|| cfg.store_path());
            store_from(&cfg, provider, model_dir.as_deref(), &out)
        }
        Command::Partition {
            source,
            scenario,
            clients,
            alpha,
            classes_per_client,
            rho,
            out,
        } => {
            let mut cfg = source.load()?;
            if let Some(s) = scenario {
                cfg.partition.scenario = s;
            }
            if let Some(k) = clients {
                cfg.partition.num_clients = k;
            }
            if let Some(a) = alpha {
                cfg.partition.alpha = a;
            }
            if let Some(s) = classes_per_client {
                cfg.partition.classes_per_client = s;
            }
            if let Some(r) = rho {
                cfg.partition.imbalance_ratio = r;
            }
            cfg.partition.validate(Some(cfg.num_classes()))?;
            let (train, _) = load_splits(&cfg)?;
            let map = partition(&train.labels, &cfg.partition)?;
            std::fs::write(&out, map.to_json()?).map_err(|e| Error::io(&out, e))?;
            println!("{}", serde_json::to_string_pretty(&partition_stats(&map))?);
            Ok(())
        }
        Command::Train {
            source,
            algorithm,
            rounds,
            out,
        } => {
            let mut cfg = source.load()?;
            if let Some(a) = algorithm {
                cfg.round.algorithm = a;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let result = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&result.summary)?);
            Ok(())
        }
        Command::Sweep {
            source,
            axis,
            values,
            seeds,
            out,
        } => {
            let cfg = source.load()?;
            cfg.validate()?;
            for p in run_sweep(&cfg, axis, &values, &seeds, &out)? {
                println!(
                    "{axis}={}: {:.4} ± {:.4} ({} ok, {} failed)",
                    p.value, p.mean_acc, p.std_acc, p.runs, p.failed
                );
            }
            Ok(())
        }
        Command::Ablation { source, seeds, out } => {
            let cfg = source.load()?;
            cfg.validate()?;
            let cells = reproduce_ablation(&cfg, &seeds, &out)?;
            print!("{}", semanticfl::experiments::ablation_table(&cells, seeds.len()));
            Ok(())
        }
        Command::Plot { dir } => {
            for f in emit_plots(&dir)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Evaluate { source, checkpoint } => {
            let cfg = source.load()?;
            let (_, test) = load_splits(&cfg)?;
            let mut model = load_model(&checkpoint)?;
            let params = model.params().to_vec();
            let acc = evaluate(&mut model, &params, &test)?;
            println!("{}", serde_json::json!({ "test_acc": acc, "samples": test.len() }));
            Ok(())
        }
        Command::ShowConfig { source } => {
            print!("{}", source.load()?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

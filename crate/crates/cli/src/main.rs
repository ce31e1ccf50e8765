use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use itl_core::data::{read_json, write_atomic, write_json, Dims, Domain};
use itl_core::eval::{boxplot_csv, compare_methods, MetricsReport, SplitPlan};
use itl_core::nets::checkpoint::load_checkpoint;
use itl_core::phantom::generate_dataset;
use itl_core::pipeline::{
    evaluate_td, evaluate_tissue, induce_dataset, induction_audit, load_induced, run_experiment, train_sd_segmentor,
    train_td_segmentor, train_uda, ExperimentConfig, InducedMode, PhantomConfig, Stage, TrainConfig, TrainOutcome,
};
use itl_core::rng::{derive_seed, tag};

#[derive(Parser)]
#[command(name = "itl", version, about = "Tissue-informed tumor segmentation with cycle-consistent domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root holding manifest.json.
    #[arg(long, env = "ITL_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the data dir).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Crop, resample and rescale a dataset.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: PathBuf,
        /// Target shape, e.g. 24,24,24.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        shape: Option<Vec<usize>>,
    },
    /// Train the source tissue segmentor.
    TrainSd {
        #[command(flatten)]
        common: Common,
    },
    /// Train the translators and discriminators against a frozen source segmentor.
    TrainUda {
        #[command(flatten)]
        common: Common,
        /// Source segmentor checkpoint (overrides sd_checkpoint in the config).
        #[arg(long)]
        sd_checkpoint: Option<PathBuf>,
    },
    /// Write induced tissue maps for every target case.
    Induce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        uda_checkpoint: Option<PathBuf>,
        #[arg(long)]
        sd_checkpoint: Option<PathBuf>,
        /// Also score the maps against withheld tissue truth.
        #[arg(long)]
        audit: bool,
    },
    /// Train the target tumor segmentor.
    TrainTd {
        #[command(flatten)]
        common: Common,
        /// Append the induced tissue maps recorded in the manifest.
        #[arg(long)]
        induced: bool,
    },
    /// Score a segmentor checkpoint on the test cases of its split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split file; defaults to the split stored in the checkpoint.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        method: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Paired comparison of two sets of metrics reports.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        proposed: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-case Dice table for box plots.
        #[arg(long)]
        boxplot: Option<PathBuf>,
    },
    /// Run data generation, all stages, the paired repeats and the comparison.
    RunExperiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Existing preprocessed dataset to use instead of generating one.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenDataConfig {
    output: Option<PathBuf>,
    #[serde(flatten)]
    phantom: PhantomConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct InduceConfig {
    data_dir: Option<PathBuf>,
    uda_checkpoint: Option<PathBuf>,
    sd_checkpoint: Option<PathBuf>,
}

fn load_config<T: Default + for<'de> Deserialize<'de>>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => read_json(p).with_context(|| format!("reading config {}", p.display())),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn train_config(common: &Common, stage: Stage) -> Result<TrainConfig> {
    let Some(path) = &common.config else { bail!("--config is required") };
    let mut cfg: TrainConfig = load_config(Some(path))?;
    cfg.stage = stage;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.data_dir {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint: &'a Path,
    step: u64,
    iterations: usize,
    final_loss: f64,
    best_val: Option<(f64, usize)>,
}

fn summarize(out: &TrainOutcome) -> Result<()> {
    print_json(&TrainSummary {
        checkpoint: &out.checkpoint.path,
        step: out.checkpoint.step,
        iterations: out.loss_history.len(),
        final_loss: out.final_loss,
        best_val: out.best_val,
    })
}

/// One report per repeat, or a single report as written by `evaluate`.
fn read_reports(path: &Path) -> Result<Vec<MetricsReport>> {
    let v: serde_json::Value = read_json(path)?;
    let v = if v.is_array() { v } else { serde_json::Value::Array(vec![v]) };
    serde_json::from_value(v).with_context(|| format!("{} holds no metrics reports", path.display()))
}

fn required(v: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    v.with_context(|| format!("{what} is required"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, output } => {
            let cfg: GenDataConfig = load_config(common.config.as_deref())?;
            let out = required(output.or(cfg.output).or(common.data_dir), "--output")?;
            let mut p = cfg.phantom;
            if let Some(s) = common.seed {
                p.params.seed = derive_seed(s, &[tag("phantom")]);
                p.shift.seed = derive_seed(s, &[tag("shift")]);
            }
            let m = generate_dataset(&out, p.n_source, p.n_target, &p.params, &p.shift)?;
            print_json(&serde_json::json!({
                "root": out,
                "source_cases": m.cases_in(Domain::Source).count(),
                "target_cases": m.cases_in(Domain::Target).count(),
            }))
        }
        Command::Preprocess { common, output, shape } => {
            let input = required(common.data_dir, "--data-dir")?;
            let shape: Dims = match shape {
                Some(s) => [s[0], s[1], s[2]],
                None => load_config::<PhantomConfig>(common.config.as_deref())?.params.shape,
            };
            let m = itl_core::preprocess::preprocess_dataset(&input, &output, shape)?;
            print_json(&serde_json::json!({"root": output, "shape": m.shape, "cases": m.cases.len()}))
        }
        Command::TrainSd { common } => summarize(&train_sd_segmentor(&train_config(&common, Stage::SdSeg)?)?),
        Command::TrainUda { common, sd_checkpoint } => {
            let mut cfg = train_config(&common, Stage::Uda)?;
            if sd_checkpoint.is_some() {
                cfg.sd_checkpoint = sd_checkpoint;
            }
            let sd = required(cfg.sd_checkpoint.clone(), "--sd-checkpoint")?;
            summarize(&train_uda(&cfg, &sd)?)
        }
        Command::Induce { common, uda_checkpoint, sd_checkpoint, audit } => {
            let cfg: InduceConfig = load_config(common.config.as_deref())?;
            let root = required(common.data_dir.or(cfg.data_dir), "--data-dir")?;
            let uda = required(uda_checkpoint.or(cfg.uda_checkpoint), "--uda-checkpoint")?;
            let sd = required(sd_checkpoint.or(cfg.sd_checkpoint), "--sd-checkpoint")?;
            let maps = induce_dataset(&root, &uda, &sd)?;
            let report = if audit { Some(induction_audit(&root, &uda, &sd)?) } else { None };
            print_json(&serde_json::json!({"induced_cases": maps.keys().collect::<Vec<_>>(), "audit": report}))
        }
        Command::TrainTd { common, induced } => {
            let cfg = train_config(&common, Stage::TdSeg)?;
            let maps = if induced {
                let m = itl_core::data::DatasetManifest::load(&cfg.data_dir)?;
                let ids: Vec<String> = m.cases_in(Domain::Target).map(|c| c.case_id.clone()).collect();
                Some(load_induced(&cfg.data_dir, &ids)?)
            } else {
                None
            };
            summarize(&train_td_segmentor(&cfg, maps.as_ref())?)
        }
        Command::Evaluate { common, checkpoint, split, method, output } => {
            let root = required(common.data_dir, "--data-dir")?;
            let ck = load_checkpoint(&checkpoint)?;
            let meta = &ck.header.metadata;
            let split: SplitPlan = match split {
                Some(p) => read_json(&p)?,
                None => serde_json::from_value(meta["split"].clone()).context("checkpoint records no split")?,
            };
            let seg = ck.segmentor("segmentor")?;
            let report = if ck.header.kind == "sd_segmentor" {
                serde_json::to_value(evaluate_tissue(&seg, &root, &split.test)?)?
            } else {
                let with = meta["induced"].as_bool().unwrap_or(false);
                let mode: InducedMode =
                    serde_json::from_value(meta["induced_mode"].clone()).unwrap_or(InducedMode::Probabilities);
                let maps = if with { Some(load_induced(&root, &split.test)?) } else { None };
                let hash = itl_core::eval::config_hash(&ck.header.networks)?;
                serde_json::to_value(evaluate_td(&seg, &root, &split, maps.as_ref(), mode, &method, &hash)?)?
            };
            if let Some(o) = output {
                write_json(&o, &report)?;
            }
            print_json(&report)
        }
        Command::Compare { baseline, proposed, output, boxplot } => {
            let b = read_reports(&baseline)?;
            let p = read_reports(&proposed)?;
            let report = compare_methods(&b, &p)?;
            eprintln!("{}", report.table());
            if let Some(o) = output {
                write_json(&o, &report)?;
            }
            if let Some(path) = boxplot {
                let names = [b.first(), p.first()].map(|r| r.map_or("", |r| r.method.as_str()));
                write_atomic(&path, boxplot_csv(&[(names[0], &b), (names[1], &p)]).as_bytes())?;
            }
            print_json(&report)
        }
        Command::RunExperiment { config, seed, data_dir, output_dir } => {
            let mut cfg: ExperimentConfig = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if data_dir.is_some() {
                cfg.data_dir = data_dir;
            }
            if let Some(o) = output_dir {
                cfg.output_dir = o;
            }
            let out = run_experiment(&cfg)?;
            eprintln!("{}", out.comparison.table());
            print_json(&out.comparison)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::induce::{induce_dataset, induction_audit, InductionAudit};
use super::sd::{evaluate_tissue, TissueScores};
use super::td::{evaluate_td, train_td_segmentor};
use super::uda::train_uda;
use super::{domain_ids, train_sd_segmentor, Stage, TrainConfig};
use crate::data::{write_json, DatasetManifest, Domain, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{
    boxplot_csv, compare_methods, config_hash, monte_carlo_splits, ComparisonReport, MetricsReport, SplitPlan,
    SplitRatios,
};
use crate::nets::checkpoint::load_checkpoint;
use crate::nets::{Norm, SegmentorSpec};
use crate::phantom::{generate_dataset, DomainShiftParams, PhantomParams};
use crate::preprocess::preprocess_dataset;
use crate::rng::{derive_seed, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub params: PhantomParams,
    pub shift: DomainShiftParams,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_source: 40,
            n_target: 40,
            params: PhantomParams::default(),
            shift: DomainShiftParams::default(),
        }
    }
}

/// Every setting of a full run: dataset, the three stage configurations
/// and the Monte-Carlo plan. Stage `data_dir`, `checkpoint`, `log`,
/// `split` and `seed` fields are filled in by the orchestrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Existing preprocessed dataset; when absent phantoms are generated
    /// and preprocessed under `output_dir/data`.
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub phantom: PhantomConfig,
    pub repeats: usize,
    pub ratios: SplitRatios,
    pub sd: TrainConfig,
    pub uda: TrainConfig,
    pub td: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sd = TrainConfig {
            stage: Stage::SdSeg,
            iterations: 300,
            // Instance norm would cancel most of the intensity shift before
            // adaptation gets to act on it.
            segmentor: SegmentorSpec {
                norm: Norm::None,
                ..Default::default()
            },
            ..Default::default()
        };
        let uda = TrainConfig {
            stage: Stage::Uda,
            iterations: 500,
            batch_size: 1,
            ..Default::default()
        };
        let td = TrainConfig {
            stage: Stage::TdSeg,
            iterations: 800,
            ..Default::default()
        };
        ExperimentConfig {
            seed: 0,
            data_dir: None,
            output_dir: PathBuf::from("experiment"),
            phantom: PhantomConfig::default(),
            repeats: 5,
            ratios: SplitRatios::default(),
            sd,
            uda,
            td,
        }
    }
}

impl ExperimentConfig {
    /// Hash of every setting that influences results (paths excluded).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.data_dir = None;
        c.output_dir = PathBuf::new();
        config_hash(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config_hash: String,
    pub sd_split: SplitPlan,
    pub sd_best_val: Option<(f64, usize)>,
    /// Source segmentor on its held-out source test cases.
    pub sd_test: TissueScores,
    /// Generator objective medians over the first and last 50 iterations.
    pub uda_early_median: f64,
    pub uda_late_median: f64,
    pub induction: InductionAudit,
    pub baseline: Vec<MetricsReport>,
    pub proposed: Vec<MetricsReport>,
    pub comparison: ComparisonReport,
}

pub const BASELINE: &str = "baseline";
pub const PROPOSED: &str = "induced";

fn median(v: &[f64]) -> f64 {
    crate::eval::Summary::of(v).median
}

fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    if let Some(d) = &cfg.data_dir {
        return Ok(d.clone());
    }
    let base = cfg.output_dir.join("data");
    let raw = base.join("raw");
    let prep = base.join("prep");
    let params = PhantomParams {
        seed: derive_seed(seed, &[tag("phantom")]),
        ..cfg.phantom.params.clone()
    };
    let shift = DomainShiftParams {
        seed: derive_seed(seed, &[tag("shift")]),
        ..cfg.phantom.shift.clone()
    };
    generate_dataset(&raw, cfg.phantom.n_source, cfg.phantom.n_target, &params, &shift)?;
    preprocess_dataset(&raw, &prep, params.shape)?;
    Ok(prep)
}

fn stage(base: &TrainConfig, stage: Stage, data: &Path, dir: &Path, seed: u64, split: Option<SplitPlan>) -> TrainConfig {
    TrainConfig {
        stage,
        data_dir: data.to_path_buf(),
        checkpoint: dir.join("model.json"),
        log: Some(dir.join("train.jsonl")),
        seed,
        split,
        ..base.clone()
    }
}

/// Runs data preparation, the three stages, the paired baseline/induced
/// target runs over all Monte-Carlo repeats, and the comparison. Reports
/// are written under `output_dir/reports`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    if cfg.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    let hash = cfg.hash()?;
    let out = &cfg.output_dir;
    let data = prepare_data(cfg, cfg.seed)?;
    if !data.join(MANIFEST_FILE).is_file() {
        return Err(Error::InvalidArgument(format!("no manifest under {}", data.display())));
    }
    let manifest = DatasetManifest::load(&data)?;
    log::info!("dataset ready at {}", data.display());

    // Step 1: source segmentor.
    let sd_seed = derive_seed(cfg.seed, &[tag("sd")]);
    let sd_ids = domain_ids(&manifest, Domain::Source);
    let sd_split = monte_carlo_splits(&sd_ids, sd_seed, cfg.ratios, 1)?.remove(0);
    let sd_cfg = stage(&cfg.sd, Stage::SdSeg, &data, &out.join("sd"), sd_seed, Some(sd_split.clone()));
    let sd = train_sd_segmentor(&sd_cfg)?;
    let f_s = load_checkpoint(&sd.checkpoint.path)?.segmentor("segmentor")?;
    let sd_test = evaluate_tissue(&f_s, &data, &sd_split.test)?;
    log::info!("source segmentor: val {:?}, test tissue Dice {:.4}", sd.best_val, sd_test.mean);

    // Step 2: adaptation, then induced maps for every target case.
    let uda_cfg = stage(
        &cfg.uda,
        Stage::Uda,
        &data,
        &out.join("uda"),
        derive_seed(cfg.seed, &[tag("uda")]),
        Some(sd_split.clone()),
    );
    let uda = train_uda(&uda_cfg, &sd.checkpoint.path)?;
    let h = &uda.loss_history;
    let w = 50.min(h.len());
    let (early, late) = (median(&h[..w]), median(&h[h.len() - w..]));
    log::info!("adaptation: generator objective median {early:.4} -> {late:.4}");
    let induced = induce_dataset(&data, &uda.checkpoint.path, &sd.checkpoint.path)?;
    let induction = induction_audit(&data, &uda.checkpoint.path, &sd.checkpoint.path)?;
    log::info!(
        "induced tissue Dice {:.4} (without adaptation {:.4})",
        induction.with_uda.mean,
        induction.without_uda.mean
    );

    // Step 3: paired target runs.
    let td_ids = domain_ids(&manifest, Domain::Target);
    let splits = monte_carlo_splits(&td_ids, derive_seed(cfg.seed, &[tag("td-splits")]), cfg.ratios, cfg.repeats)?;
    let image_channels = cfg.td.segmentor.in_channels.min(manifest_channels(&data, &manifest)?);
    let mut baseline = Vec::with_capacity(splits.len());
    let mut proposed = Vec::with_capacity(splits.len());
    for split in &splits {
        let r = split.repeat_index;
        let seed = derive_seed(cfg.seed, &[tag("td"), r as u64]);
        for (method, with) in [(BASELINE, false), (PROPOSED, true)] {
            let mut c = stage(&cfg.td, Stage::TdSeg, &data, &out.join(format!("td/{r:02}/{method}")), seed, Some(split.clone()));
            c.segmentor.in_channels = image_channels + if with { crate::data::NUM_CLASSES } else { 0 };
            let ind = with.then_some(&induced);
            let run = train_td_segmentor(&c, ind)?;
            let seg = load_checkpoint(&run.checkpoint.path)?.segmentor("segmentor")?;
            let report = evaluate_td(&seg, &data, split, ind, c.induced_mode, method, &hash)?;
            log::info!(
                "repeat {r} {method}: WT {:.4} TC {:.4} ET {:.4}",
                report.mean(crate::eval::Region::WT),
                report.mean(crate::eval::Region::TC),
                report.mean(crate::eval::Region::ET)
            );
            if with {
                proposed.push(report);
            } else {
                baseline.push(report);
            }
        }
    }
    let comparison = compare_methods(&baseline, &proposed)?;

    let outcome = ExperimentOutcome {
        config_hash: hash,
        sd_split,
        sd_best_val: sd.best_val,
        sd_test,
        uda_early_median: early,
        uda_late_median: late,
        induction,
        baseline,
        proposed,
        comparison,
    };
    let reports = out.join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    write_json(&reports.join("comparison.json"), &outcome.comparison)?;
    write_json(&reports.join("metrics_baseline.json"), &outcome.baseline)?;
    write_json(&reports.join("metrics_induced.json"), &outcome.proposed)?;
    write_json(&reports.join("experiment.json"), &outcome)?;
    let csv = boxplot_csv(&[(BASELINE, &outcome.baseline), (PROPOSED, &outcome.proposed)]);
    crate::data::write_atomic(&reports.join("boxplot.csv"), csv.as_bytes())?;
    Ok(outcome)
}

fn manifest_channels(root: &Path, manifest: &DatasetManifest) -> Result<usize> {
    let first = manifest
        .cases
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty manifest".into()))?;
    Ok(crate::data::load_header(&first.stem(root))?.shape[0])
}

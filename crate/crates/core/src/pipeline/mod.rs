//! The three training stages, label induction and the end-to-end
//! experiment.

mod experiment;
mod induce;
mod sd;
mod td;
mod uda;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_case, DatasetManifest, Domain, LabelMap, Volume};
use crate::error::{Error, Result};
use crate::eval::SplitPlan;
use crate::losses::LossWeights;
use crate::nets::checkpoint::RngState;
use crate::nets::tensor::Tensor;
use crate::nets::{DiscriminatorSpec, GeneratorSpec, ParamSet, SegmentorSpec};

pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, PhantomConfig};
pub use induce::{
    induce_dataset, induce_tissue_probabilities, induction_audit, IdentityTranslator, InducedChannels, InductionAudit,
    Translator,
};
pub use sd::{evaluate_tissue, train_sd_segmentor, TissueScores};
pub use td::{evaluate_td, load_induced, pair_init, predict_tumor_labels, td_input, train_td_segmentor};
pub use uda::train_uda;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    SdSeg,
    Uda,
    TdSeg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor Adam state for one network.
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.values.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; `grads[i]` of `None` leaves tensor `i` unchanged.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor<f32>>]) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let step = (c.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, (c.eps * bc2.sqrt()) as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in params.values[i].data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// How induced tissue maps enter the target segmentor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducedMode {
    Probabilities,
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Dataset root holding `manifest.json`.
    pub data_dir: PathBuf,
    /// Train/val/test assignment. When absent the first Monte-Carlo split
    /// of the stage's domain is used.
    pub split: Option<SplitPlan>,
    pub optimizer: AdamConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub segmentor: SegmentorSpec,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    /// Checkpoint file written by the stage.
    pub checkpoint: PathBuf,
    /// JSON-lines training log.
    pub log: Option<PathBuf>,
    /// Validation interval in iterations (segmentor stages).
    pub val_every: usize,
    pub dice_include_background: bool,
    /// Discriminator updates per generator update (UDA).
    pub d_steps: usize,
    /// Capacity of the discriminator history pool; 0 disables it.
    pub replay_pool: usize,
    pub induced_mode: InducedMode,
    /// Initialise the 8-channel target segmentor from the 4-channel one
    /// built with the same seed so paired runs share their starting point.
    pub paired_init: bool,
    /// Source segmentor checkpoint (UDA stage).
    pub sd_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::SdSeg,
            data_dir: PathBuf::from("data"),
            split: None,
            optimizer: AdamConfig::default(),
            iterations: 300,
            batch_size: 2,
            seed: 0,
            loss_weights: LossWeights::default(),
            segmentor: SegmentorSpec::default(),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            checkpoint: PathBuf::from("checkpoint.json"),
            log: None,
            val_every: 25,
            dice_include_background: true,
            d_steps: 1,
            replay_pool: 0,
            induced_mode: InducedMode::Probabilities,
            paired_init: true,
            sd_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("iterations and batch_size must be >= 1".into()));
        }
        if self.d_steps == 0 {
            return Err(Error::InvalidArgument("d_steps must be >= 1".into()));
        }
        self.loss_weights.validate()
    }
}

/// Result of a training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: crate::nets::CheckpointRef,
    pub final_loss: f64,
    /// Best validation score and the iteration it was reached at (segmentor
    /// stages).
    pub best_val: Option<(f64, usize)>,
    /// Objective value per iteration (generator total for UDA).
    pub loss_history: Vec<f64>,
}

pub(crate) struct Case {
    pub id: String,
    pub volume: Volume,
    pub labels: Option<LabelMap>,
}

pub(crate) fn load_cases(root: &Path, manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<Case>> {
    ids.iter()
        .map(|id| {
            let rec = manifest
                .case(id)
                .ok_or_else(|| Error::InvalidArgument(format!("case {id} not in manifest")))?;
            let (volume, labels) = load_case(&rec.stem(root))?;
            Ok(Case {
                id: id.clone(),
                volume,
                labels,
            })
        })
        .collect()
}

pub(crate) fn domain_ids(manifest: &DatasetManifest, domain: Domain) -> Vec<String> {
    let mut ids: Vec<String> = manifest.cases_in(domain).map(|c| c.case_id.clone()).collect();
    ids.sort();
    ids
}

/// Epoch-wise shuffled mini-batch indices.
pub(crate) struct BatchSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    pub rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, rng: ChaCha8Rng) -> Self {
        BatchSampler {
            n,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }

    pub fn state(&self, seed: u64) -> RngState {
        RngState {
            seed,
            word_pos: self.rng.get_word_pos(),
        }
    }
}

/// Optional JSON-lines sink.
pub(crate) struct TrainLog {
    out: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn open(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            None => None,
            Some(p) => {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Some(BufWriter::new(f))
            }
        };
        Ok(TrainLog { out })
    }

    pub fn record(&mut self, value: &serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, value)?;
            w.write_all(b"\n").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.out {
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

pub(crate) fn check_finite(v: f64, what: &str, iter: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} diverged at iteration {iter} (value {v})")))
    }
}

pub(crate) fn grads_of(gr: &mut crate::nets::graph::Gradients<f32>, vars: &[crate::nets::Var]) -> Vec<Option<Tensor<f32>>> {
    vars.iter().map(|v| gr.take(*v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = ParamSet {
            names: vec!["x".into()],
            values: vec![Tensor::new(vec![2], vec![3.0, -2.0])],
            trainable: vec![true],
        };
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            &p,
        );
        for _ in 0..500 {
            let g: Vec<f32> = p.values[0].data().iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &[Some(Tensor::new(vec![2], g))]);
        }
        assert!(p.values[0].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn first_adam_step_has_lr_magnitude() {
        let mut p = ParamSet {
            names: vec!["x".into()],
            values: vec![Tensor::new(vec![1], vec![1.0])],
            trainable: vec![true],
        };
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[Some(Tensor::new(vec![1], vec![123.0]))]);
        assert!((p.values[0].data()[0] - (1.0 - 0.002)).abs() < 1e-6);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, ChaCha8Rng::seed_from_u64(1));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(1)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            optimizer: AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

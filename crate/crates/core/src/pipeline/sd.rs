use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    check_finite, domain_ids, grads_of, load_cases, Adam, BatchSampler, Case, Stage, TrainConfig, TrainLog,
    TrainOutcome,
};
use crate::data::{tissue, DatasetManifest, Domain, LabelMap, Taxonomy, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{binary_dice, monte_carlo_splits, SplitPlan, SplitRatios};
use crate::losses::DiceLoss;
use crate::nets::checkpoint::{save_checkpoint, ArchSpec, NamedNet, RngState};
use crate::nets::graph::Graph;
use crate::nets::params::ForwardCtx;
use crate::nets::tensor::Tensor;
use crate::nets::{CheckpointRef, Segmentor};
use crate::rng::{derive_seed, rng_from, tag};

/// Mean per-class tissue Dice over a set of cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueScores {
    pub cases: usize,
    pub wm: f64,
    pub gm: f64,
    pub csf: f64,
    /// Mean of the three foreground classes.
    pub mean: f64,
}

impl TissueScores {
    pub fn from_pairs(pairs: &[(LabelMap, &LabelMap)]) -> Result<Self> {
        let mut acc = [0.0; 3];
        for (pred, truth) in pairs {
            for (k, cls) in [tissue::WM, tissue::GM, tissue::CSF].into_iter().enumerate() {
                let p: Vec<bool> = pred.data().iter().map(|&v| v == cls).collect();
                let t: Vec<bool> = truth.data().iter().map(|&v| v == cls).collect();
                acc[k] += binary_dice(&p, &t)?;
            }
        }
        let n = pairs.len().max(1) as f64;
        let [wm, gm, csf] = acc.map(|v| v / n);
        Ok(TissueScores {
            cases: pairs.len(),
            wm,
            gm,
            csf,
            mean: (wm + gm + csf) / 3.0,
        })
    }
}

pub(crate) fn tissue_scores(seg: &Segmentor, cases: &[Case]) -> Result<TissueScores> {
    let mut pairs = Vec::with_capacity(cases.len());
    for c in cases {
        let truth = c
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("case {} has no labels", c.id)))?;
        pairs.push((seg.predict(&c.volume)?.argmax(Taxonomy::Tissue), truth));
    }
    TissueScores::from_pairs(&pairs)
}

/// Tissue Dice of `seg` on the listed cases of the dataset at `root`.
pub fn evaluate_tissue(seg: &Segmentor, root: &std::path::Path, ids: &[String]) -> Result<TissueScores> {
    let manifest = DatasetManifest::load(root)?;
    let cases = load_cases(root, &manifest, ids)?;
    tissue_scores(seg, &cases)
}

pub(crate) fn one_hot_batch(labels: &[&LabelMap]) -> Tensor<f32> {
    let d = labels[0].dims();
    let data = labels.iter().flat_map(|l| l.one_hot()).collect();
    Tensor::new(vec![labels.len(), NUM_CLASSES, d[0], d[1], d[2]], data)
}

pub(crate) fn save_segmentor(
    path: &std::path::Path,
    kind: &str,
    step: u64,
    rng: RngState,
    metadata: serde_json::Value,
    seg: &Segmentor,
) -> Result<CheckpointRef> {
    save_checkpoint(
        path,
        kind,
        step,
        rng,
        metadata,
        &[NamedNet {
            role: "segmentor",
            arch: ArchSpec::Segmentor(seg.spec.clone()),
            params: &seg.params,
        }],
    )
}

pub(crate) fn resolve_split(cfg: &TrainConfig, ids: &[String]) -> Result<SplitPlan> {
    match &cfg.split {
        Some(s) => Ok(s.clone()),
        None => Ok(monte_carlo_splits(ids, cfg.seed, SplitRatios::default(), 1)?.remove(0)),
    }
}

/// Trains a segmentor on labelled source cases with the Dice loss,
/// keeping the checkpoint with the best validation tissue Dice.
pub fn train_sd_segmentor(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = &cfg.data_dir;
    let manifest = DatasetManifest::load(root)?;
    let labelled: Vec<String> = domain_ids(&manifest, Domain::Source)
        .into_iter()
        .filter(|id| manifest.case(id).is_some_and(|c| c.label_path.is_some()))
        .collect();
    if labelled.is_empty() {
        return Err(Error::InvalidArgument("no labelled SOURCE cases in manifest".into()));
    }
    let split = if cfg.split.is_none() && labelled.len() < crate::eval::MIN_SPLIT_CASES {
        // Too few cases for a split: train and validate on all of them.
        SplitPlan {
            repeat_index: 0,
            train: labelled.clone(),
            val: labelled.clone(),
            test: Vec::new(),
        }
    } else {
        resolve_split(cfg, &labelled)?
    };
    let train = load_cases(root, &manifest, &split.train)?;
    let val = load_cases(root, &manifest, &split.val)?;
    for c in train.iter().chain(&val) {
        match &c.labels {
            Some(l) if l.taxonomy() == Taxonomy::Tissue => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "case {} lacks tissue labels",
                    c.id
                )))
            }
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }

    let mut seg = Segmentor::new(cfg.segmentor.clone(), derive_seed(cfg.seed, &[tag("sd-init")]))?;
    seg.spec.check_input(train[0].volume.channels(), train[0].volume.dims())?;
    let mut opt = Adam::new(cfg.optimizer, &seg.params);
    let mut sampler = BatchSampler::new(train.len(), rng_from(cfg.seed, &[tag("sd-batches")]));
    let mut log = TrainLog::open(cfg.log.as_deref())?;
    let dice = DiceLoss {
        include_background: cfg.dice_include_background,
        ..Default::default()
    };
    let meta = |best: Option<(f64, usize)>| {
        json!({"stage": Stage::SdSeg, "split": split, "best_val": best})
    };

    let mut best: Option<(f64, usize)> = None;
    let mut ckpt = None;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let vols: Vec<_> = idx.iter().map(|&i| &train[i].volume).collect();
        let labels: Vec<_> = idx.iter().map(|&i| train[i].labels.as_ref().expect("checked")).collect();
        let mut g: Graph<f32> = Graph::new();
        let p = seg.params.bind(&mut g, true);
        let x = g.constant(Tensor::stack(&vols));
        let y = g.constant(one_hot_batch(&labels));
        let mut ctx = ForwardCtx::train();
        let out = seg.forward(&mut g, &p, x, &mut ctx)?;
        let l = g.objective(&[out, y], Box::new(dice));
        let loss = g.value(l).item() as f64;
        check_finite(loss, "segmentation loss", it)?;
        let mut gr = g.backward(l);
        opt.step(&mut seg.params, &grads_of(&mut gr, &p));
        ctx.update_running_stats(&mut seg.params);
        history.push(loss);

        let mut rec = json!({"stage": "SD_SEG", "iter": it, "dice_loss": loss});
        let last = it + 1 == cfg.iterations;
        if (it + 1) % cfg.val_every.max(1) == 0 || last {
            let score = tissue_scores(&seg, &val)?.mean;
            rec["val_tissue_dice"] = json!(score);
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, it + 1));
                ckpt = Some(save_segmentor(
                    &cfg.checkpoint,
                    "sd_segmentor",
                    (it + 1) as u64,
                    sampler.state(cfg.seed),
                    meta(best),
                    &seg,
                )?);
            }
        }
        log.record(&rec)?;
    }
    log.flush()?;
    Ok(TrainOutcome {
        checkpoint: ckpt.expect("final iteration always validates"),
        final_loss: *history.last().expect("iterations >= 1"),
        best_val: best,
        loss_history: history,
    })
}

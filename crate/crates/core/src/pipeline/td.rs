use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use super::induce::InducedChannels;
use super::sd::{one_hot_batch, resolve_split, save_segmentor};
use super::{check_finite, domain_ids, grads_of, load_cases, Adam, BatchSampler, Case, InducedMode, TrainConfig, TrainLog, TrainOutcome};
use crate::data::{load_prob_map, DatasetManifest, Domain, LabelMap, ProbabilityMap, Taxonomy, Volume, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, MetricsReport, Region, SplitPlan};
use crate::losses::DiceLoss;
use crate::nets::graph::Graph;
use crate::nets::params::ForwardCtx;
use crate::nets::tensor::Tensor;
use crate::nets::{Segmentor, SegmentorSpec};
use crate::rng::{derive_seed, rng_from, tag};

/// Segmentor input: the image alone, or the image followed by the induced
/// tissue channels.
pub fn td_input(volume: &Volume, induced: Option<&ProbabilityMap>, mode: InducedMode) -> Result<Volume> {
    match induced {
        None => Ok(volume.clone()),
        Some(p) => {
            let extra = match mode {
                InducedMode::Probabilities => p.as_volume(),
                InducedMode::OneHot => p.to_one_hot().as_volume(),
            };
            volume.concat(&extra)
        }
    }
}

/// Induced maps recorded in the manifest for `ids`.
pub fn load_induced(root: &Path, ids: &[String]) -> Result<InducedChannels> {
    let manifest = DatasetManifest::load(root)?;
    let mut out = InducedChannels::new();
    for id in ids {
        let rec = manifest
            .case(id)
            .ok_or_else(|| Error::InvalidArgument(format!("case {id} not in manifest")))?;
        if rec.induced_prob_path.is_none() {
            return Err(Error::InvalidArgument(format!("no induced map recorded for case {id}")));
        }
        out.insert(id.clone(), load_prob_map(&rec.stem(root), manifest.shape)?);
    }
    Ok(out)
}

/// Copies every tensor of `base` into `target` where names and shapes
/// agree; for the input convolution the overlapping leading input
/// channels are copied.
pub fn pair_init(base: &Segmentor, target: &mut Segmentor) {
    for (i, name) in target.params.names.iter().enumerate() {
        let Some(j) = base.params.names.iter().position(|n| n == name) else { continue };
        let src = &base.params.values[j];
        let dst = &mut target.params.values[i];
        if src.shape() == dst.shape() {
            *dst = src.clone();
        } else if src.shape().len() == 5 && src.shape()[0] == dst.shape()[0] && src.shape()[2..] == dst.shape()[2..] {
            let k: usize = src.shape()[2..].iter().product();
            let (ci_s, ci_d) = (src.shape()[1], dst.shape()[1]);
            let ci = ci_s.min(ci_d);
            for o in 0..src.shape()[0] {
                let s = &src.data()[(o * ci_s) * k..(o * ci_s + ci) * k];
                dst.data_mut()[(o * ci_d) * k..(o * ci_d + ci) * k].copy_from_slice(s);
            }
        }
    }
}

fn inputs_for(cases: &[Case], induced: Option<&InducedChannels>, mode: InducedMode) -> Result<Vec<Volume>> {
    cases
        .iter()
        .map(|c| {
            let p = match induced {
                None => None,
                Some(m) => Some(
                    m.get(&c.id)
                        .ok_or_else(|| Error::InvalidArgument(format!("induced map missing for case {}", c.id)))?,
                ),
            };
            td_input(&c.volume, p, mode)
        })
        .collect()
}

/// Per-voxel argmax of the segmentor output (ties to the lower index).
pub fn predict_tumor_labels(
    seg: &Segmentor,
    volume: &Volume,
    induced: Option<&ProbabilityMap>,
    mode: InducedMode,
) -> Result<LabelMap> {
    let x = td_input(volume, induced, mode)?;
    Ok(seg.predict(&x)?.argmax(Taxonomy::Tumor))
}

fn mean_region_dice(seg: &Segmentor, cases: &[Case], inputs: &[Volume]) -> Result<f64> {
    let mut preds = BTreeMap::new();
    let mut truths = BTreeMap::new();
    for (c, x) in cases.iter().zip(inputs) {
        preds.insert(c.id.clone(), seg.predict(x)?.argmax(Taxonomy::Tumor));
        truths.insert(c.id.clone(), c.labels.clone().expect("checked"));
    }
    let split = SplitPlan {
        repeat_index: 0,
        train: Vec::new(),
        val: Vec::new(),
        test: cases.iter().map(|c| c.id.clone()).collect(),
    };
    let r = evaluate_split(&preds, &truths, &split, "val", "")?;
    Ok(Region::ALL.iter().map(|&g| r.mean(g)).sum::<f64>() / 3.0)
}

/// Trains the target tumor segmentor, with induced tissue channels when
/// `induced` is given. Keeps the checkpoint with the best validation mean
/// of WT/TC/ET Dice.
pub fn train_td_segmentor(cfg: &TrainConfig, induced: Option<&InducedChannels>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = &cfg.data_dir;
    let manifest = DatasetManifest::load(root)?;
    let ids: Vec<String> = domain_ids(&manifest, Domain::Target)
        .into_iter()
        .filter(|id| manifest.case(id).is_some_and(|c| c.label_path.is_some()))
        .collect();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no labelled TARGET cases in manifest".into()));
    }
    let split = if cfg.split.is_none() && ids.len() < crate::eval::MIN_SPLIT_CASES {
        SplitPlan {
            repeat_index: 0,
            train: ids.clone(),
            val: ids.clone(),
            test: Vec::new(),
        }
    } else {
        resolve_split(cfg, &ids)?
    };
    let train = load_cases(root, &manifest, &split.train)?;
    let val = load_cases(root, &manifest, &split.val)?;
    for c in train.iter().chain(&val) {
        if c.labels.as_ref().map(|l| l.taxonomy()) != Some(Taxonomy::Tumor) {
            return Err(Error::InvalidArgument(format!("case {} lacks tumor labels", c.id)));
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let image_channels = train[0].volume.channels();
    let expected = image_channels + if induced.is_some() { NUM_CLASSES } else { 0 };
    if cfg.segmentor.in_channels != expected {
        return Err(Error::Shape(format!(
            "target segmentor needs in_channels = {expected} ({}), spec has {}",
            if induced.is_some() { "image + induced" } else { "image only" },
            cfg.segmentor.in_channels
        )));
    }
    let train_x = inputs_for(&train, induced, cfg.induced_mode)?;
    let val_x = inputs_for(&val, induced, cfg.induced_mode)?;

    let init_seed = derive_seed(cfg.seed, &[tag("td-init")]);
    let mut seg = Segmentor::new(cfg.segmentor.clone(), init_seed)?;
    if induced.is_some() && cfg.paired_init {
        let base = Segmentor::new(
            SegmentorSpec {
                in_channels: image_channels,
                ..cfg.segmentor.clone()
            },
            init_seed,
        )?;
        pair_init(&base, &mut seg);
    }
    let mut opt = Adam::new(cfg.optimizer, &seg.params);
    let mut sampler = BatchSampler::new(train.len(), rng_from(cfg.seed, &[tag("td-batches")]));
    let mut log = TrainLog::open(cfg.log.as_deref())?;
    let dice = DiceLoss {
        include_background: cfg.dice_include_background,
        ..Default::default()
    };
    let with_induced = induced.is_some();
    let meta = |best: Option<(f64, usize)>| {
        json!({"stage": "TD_SEG", "split": split, "induced": with_induced,
               "induced_mode": cfg.induced_mode, "best_val": best})
    };

    let mut best: Option<(f64, usize)> = None;
    let mut ckpt = None;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let idx = sampler.next_batch(cfg.batch_size);
        let vols: Vec<_> = idx.iter().map(|&i| &train_x[i]).collect();
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

        let mut rec = json!({"stage": "TD_SEG", "iter": it, "dice_loss": loss});
        let last = it + 1 == cfg.iterations;
        if (it + 1) % cfg.val_every.max(1) == 0 || last {
            let score = mean_region_dice(&seg, &val, &val_x)?;
            rec["val_region_dice"] = json!(score);
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, it + 1));
                ckpt = Some(save_segmentor(
                    &cfg.checkpoint,
                    "td_segmentor",
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

/// Scores `seg` on the test cases of `split`.
pub fn evaluate_td(
    seg: &Segmentor,
    root: &Path,
    split: &SplitPlan,
    induced: Option<&InducedChannels>,
    mode: InducedMode,
    method: &str,
    config_hash: &str,
) -> Result<MetricsReport> {
    let manifest = DatasetManifest::load(root)?;
    let cases = load_cases(root, &manifest, &split.test)?;
    let inputs = inputs_for(&cases, induced, mode)?;
    let mut preds = BTreeMap::new();
    let mut truths = BTreeMap::new();
    for (c, x) in cases.iter().zip(&inputs) {
        let truth = c
            .labels
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("test case {} has no labels", c.id)))?;
        preds.insert(c.id.clone(), seg.predict(x)?.argmax(Taxonomy::Tumor));
        truths.insert(c.id.clone(), truth);
    }
    evaluate_split(&preds, &truths, split, method, config_hash)
}

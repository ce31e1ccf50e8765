use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{check_finite, domain_ids, grads_of, load_cases, Adam, BatchSampler, TrainConfig, TrainLog, TrainOutcome};
use crate::data::{DatasetManifest, Domain, Taxonomy, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::SplitPlan;
use crate::losses::{
    uda_discriminator_objective, uda_generator_objective, BatchVars, Bound, Translations, UdaBatch, UdaModels, Which,
};
use crate::nets::checkpoint::{load_checkpoint, save_checkpoint, ArchSpec, NamedNet};
use crate::nets::graph::Graph;
use crate::nets::params::ForwardCtx;
use crate::nets::tensor::Tensor;
use crate::nets::{Discriminator, DiscriminatorSpec, Generator};
use crate::rng::{derive_seed, rng_from, tag};

/// History of generated samples shown to the discriminators.
struct ImagePool {
    cap: usize,
    items: Vec<Vec<f32>>,
}

impl ImagePool {
    fn new(cap: usize) -> Self {
        ImagePool { cap, items: Vec::new() }
    }

    /// Per sample: fill the pool first, then with probability 1/2 return a
    /// stored sample and keep the new one in its place.
    fn query(&mut self, batch: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        if self.cap == 0 {
            return batch.clone();
        }
        let n = batch.shape()[0];
        let per = batch.len() / n;
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.data().chunks(per) {
            if self.items.len() < self.cap {
                self.items.push(chunk.to_vec());
                out.extend_from_slice(chunk);
            } else if rng.gen_bool(0.5) {
                let j = rng.gen_range(0..self.cap);
                out.extend(std::mem::replace(&mut self.items[j], chunk.to_vec()));
            } else {
                out.extend_from_slice(chunk);
            }
        }
        Tensor::new(batch.shape().to_vec(), out)
    }
}

/// Source cases available to adaptation: the train and validation cases of
/// the source segmentor's split when recorded, otherwise every labelled
/// source case.
fn source_ids(cfg: &TrainConfig, manifest: &DatasetManifest, sd_meta: &serde_json::Value) -> Vec<String> {
    let from_split = |s: &SplitPlan| s.train.iter().chain(&s.val).cloned().collect::<Vec<_>>();
    if let Some(s) = &cfg.split {
        return from_split(s);
    }
    if let Ok(s) = serde_json::from_value::<SplitPlan>(sd_meta["split"].clone()) {
        let mut ids = from_split(&s);
        ids.sort();
        ids.dedup();
        return ids;
    }
    domain_ids(manifest, Domain::Source)
        .into_iter()
        .filter(|id| manifest.case(id).is_some_and(|c| c.label_path.is_some()))
        .collect()
}

/// Adversarial adaptation with two generators and three discriminators
/// against a frozen source segmentor. Each iteration updates the
/// discriminators `d_steps` times, then both generators once.
pub fn train_uda(cfg: &TrainConfig, sd_ckpt: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sd = load_checkpoint(sd_ckpt)?;
    let f_s = sd.segmentor("segmentor")?;
    let root = &cfg.data_dir;
    let manifest = DatasetManifest::load(root)?;
    let src = load_cases(root, &manifest, &source_ids(cfg, &manifest, &sd.header.metadata))?;
    let tgt = load_cases(root, &manifest, &domain_ids(&manifest, Domain::Target))?;
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::InvalidArgument("adaptation needs SOURCE and TARGET cases".into()));
    }
    for c in &src {
        if c.labels.as_ref().map(|l| l.taxonomy()) != Some(Taxonomy::Tissue) {
            return Err(Error::InvalidArgument(format!("source case {} lacks tissue labels", c.id)));
        }
    }
    let channels = src[0].volume.channels();
    f_s.spec.check_input(channels, src[0].volume.dims())?;

    let seed = |name: &str| derive_seed(cfg.seed, &[tag(name)]);
    let gspec = crate::nets::GeneratorSpec {
        channels,
        ..cfg.generator.clone()
    };
    let dspec = |c| DiscriminatorSpec {
        in_channels: c,
        ..cfg.discriminator.clone()
    };
    let mut g_ts = Generator::new(gspec.clone(), seed("g_ts"))?;
    let mut g_st = Generator::new(gspec, seed("g_st"))?;
    let mut d_s = Discriminator::new(dspec(channels), seed("d_s"))?;
    let mut d_t = Discriminator::new(dspec(channels), seed("d_t"))?;
    let mut d_m = Discriminator::new(dspec(NUM_CLASSES), seed("d_m"))?;
    let mut opt_g = [Adam::new(cfg.optimizer, &g_ts.params), Adam::new(cfg.optimizer, &g_st.params)];
    let mut opt_d = [
        Adam::new(cfg.optimizer, &d_s.params),
        Adam::new(cfg.optimizer, &d_t.params),
        Adam::new(cfg.optimizer, &d_m.params),
    ];
    let mut src_sampler = BatchSampler::new(src.len(), rng_from(cfg.seed, &[tag("uda-source")]));
    let mut tgt_sampler = BatchSampler::new(tgt.len(), rng_from(cfg.seed, &[tag("uda-target")]));
    let mut pool_rng = rng_from(cfg.seed, &[tag("uda-pool")]);
    let mut pools = [
        ImagePool::new(cfg.replay_pool),
        ImagePool::new(cfg.replay_pool),
        ImagePool::new(cfg.replay_pool),
    ];
    let mut log = TrainLog::open(cfg.log.as_deref())?;
    let mut history = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let si = src_sampler.next_batch(cfg.batch_size);
        let ti = tgt_sampler.next_batch(cfg.batch_size);
        let xs: Vec<_> = si.iter().map(|&i| &src[i].volume).collect();
        let ys: Vec<_> = si.iter().map(|&i| src[i].labels.as_ref().expect("checked")).collect();
        let xt: Vec<_> = ti.iter().map(|&i| &tgt[i].volume).collect();
        let batch = UdaBatch::new(&xs, &xt, Some(&ys))?;

        // Discriminator updates on fakes from the current generators.
        let mut d_losses = [0.0; 3];
        for _ in 0..cfg.d_steps {
            let mut g: Graph<f32> = Graph::new();
            let models = UdaModels {
                g_ts: Some(Bound::new(&mut g, &g_ts, false)),
                g_st: Some(Bound::new(&mut g, &g_st, false)),
                d_s: Some(Bound::new(&mut g, &d_s, true)),
                d_t: Some(Bound::new(&mut g, &d_t, true)),
                d_m: Some(Bound::new(&mut g, &d_m, true)),
                f_s: Some(Bound::new(&mut g, &f_s, false)),
            };
            let bv = BatchVars::bind(&mut g, &batch);
            let mut ctx = ForwardCtx::eval();
            let fake_s = g_ts.forward(&mut g, &models.g_ts.as_ref().expect("bound").params, bv.x_t, &mut ctx)?;
            let fake_t = g_st.forward(&mut g, &models.g_st.as_ref().expect("bound").params, bv.x_s, &mut ctx)?;
            let seg = f_s.forward(&mut g, &models.f_s.as_ref().expect("bound").params, fake_s, &mut ctx)?;
            let mut pooled = [fake_s, fake_t, seg].map(|v| g.value(v).clone());
            for (t, pool) in pooled.iter_mut().zip(&mut pools) {
                *t = pool.query(t, &mut pool_rng);
            }
            let [ps, pt, pm] = pooled;
            let tr = Translations {
                fake_s: g.constant(ps),
                fake_t: g.constant(pt),
                seg_fake_s: Some(g.constant(pm)),
            };
            let mut terms = Vec::with_capacity(3);
            for (k, which) in [Which::DS, Which::DT, Which::DM].into_iter().enumerate() {
                let l = uda_discriminator_objective(&mut g, which, bv, &models, Some(&tr))?;
                d_losses[k] = g.value(l).item() as f64;
                check_finite(d_losses[k], "discriminator loss", it)?;
                terms.push((l, 1.0));
            }
            let total = g.weighted_sum(&terms);
            let mut gr = g.backward(total);
            let gd_s = grads_of(&mut gr, &models.d_s.as_ref().expect("bound").params);
            let gd_t = grads_of(&mut gr, &models.d_t.as_ref().expect("bound").params);
            let gd_m = grads_of(&mut gr, &models.d_m.as_ref().expect("bound").params);
            drop(models);
            opt_d[0].step(&mut d_s.params, &gd_s);
            opt_d[1].step(&mut d_t.params, &gd_t);
            opt_d[2].step(&mut d_m.params, &gd_m);
        }

        // Generator update against the refreshed discriminators.
        let mut g: Graph<f32> = Graph::new();
        let models = UdaModels {
            g_ts: Some(Bound::new(&mut g, &g_ts, true)),
            g_st: Some(Bound::new(&mut g, &g_st, true)),
            d_s: Some(Bound::new(&mut g, &d_s, false)),
            d_t: Some(Bound::new(&mut g, &d_t, false)),
            d_m: Some(Bound::new(&mut g, &d_m, false)),
            f_s: Some(Bound::new(&mut g, &f_s, false)),
        };
        let bv = BatchVars::bind(&mut g, &batch);
        let obj = uda_generator_objective(&mut g, bv, &models, &cfg.loss_weights)
            .map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;
        let total = obj.breakdown.total;
        check_finite(total, "generator objective", it)?;
        let mut gr = g.backward(obj.total);
        let gg_ts = grads_of(&mut gr, &models.g_ts.as_ref().expect("bound").params);
        let gg_st = grads_of(&mut gr, &models.g_st.as_ref().expect("bound").params);
        drop(models);
        opt_g[0].step(&mut g_ts.params, &gg_ts);
        opt_g[1].step(&mut g_st.params, &gg_st);
        history.push(total);

        log.record(&json!({
            "stage": "UDA",
            "iter": it,
            "generator": obj.breakdown,
            "d_s": d_losses[0],
            "d_t": d_losses[1],
            "d_m": d_losses[2],
        }))?;
    }
    log.flush()?;

    let nets = [
        NamedNet {
            role: "g_ts",
            arch: ArchSpec::Generator(g_ts.spec.clone()),
            params: &g_ts.params,
        },
        NamedNet {
            role: "g_st",
            arch: ArchSpec::Generator(g_st.spec.clone()),
            params: &g_st.params,
        },
        NamedNet {
            role: "d_s",
            arch: ArchSpec::Discriminator(d_s.spec.clone()),
            params: &d_s.params,
        },
        NamedNet {
            role: "d_t",
            arch: ArchSpec::Discriminator(d_t.spec.clone()),
            params: &d_t.params,
        },
        NamedNet {
            role: "d_m",
            arch: ArchSpec::Discriminator(d_m.spec.clone()),
            params: &d_m.params,
        },
        NamedNet {
            role: "f_s",
            arch: ArchSpec::Segmentor(f_s.spec.clone()),
            params: &f_s.params,
        },
    ];
    let meta = json!({"stage": "UDA", "sd_checkpoint": sd_ckpt, "source_cases": src.len(), "target_cases": tgt.len()});
    let ckpt = save_checkpoint(
        &cfg.checkpoint,
        "uda",
        cfg.iterations as u64,
        src_sampler.state(cfg.seed),
        meta,
        &nets,
    )?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        final_loss: *history.last().expect("iterations >= 1"),
        best_val: None,
        loss_history: history,
    })
}

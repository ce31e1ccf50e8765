use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sd::TissueScores;
use super::{domain_ids, load_cases};
use crate::data::{
    hidden_tissue_stem, load_label_map, save_prob_map, CasePaths, DatasetManifest, Domain, ProbabilityMap, Taxonomy,
    Volume,
};
use crate::error::Result;
use crate::nets::checkpoint::load_checkpoint;
use crate::nets::{Generator, Segmentor};

/// Tissue probability maps per target case id.
pub type InducedChannels = BTreeMap<String, ProbabilityMap>;

/// Target→source image translation.
pub trait Translator {
    fn translate(&self, volume: &Volume) -> Result<Volume>;
}

impl Translator for Generator {
    fn translate(&self, volume: &Volume) -> Result<Volume> {
        Generator::translate(self, volume)
    }
}

/// Returns its input unchanged; stands in for an untrained translator.
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, volume: &Volume) -> Result<Volume> {
        Ok(volume.clone())
    }
}

/// `f_s(G_ts(x_t))`.
pub fn induce_tissue_probabilities(
    x_t: &Volume,
    g_ts: &dyn Translator,
    f_s: &Segmentor,
) -> Result<ProbabilityMap> {
    f_s.predict(&g_ts.translate(x_t)?)
}

fn load_pair(uda_ckpt: &Path, sd_ckpt: &Path) -> Result<(Generator, Segmentor)> {
    let g_ts = load_checkpoint(uda_ckpt)?.generator("g_ts")?;
    let f_s = load_checkpoint(sd_ckpt)?.segmentor("segmentor")?;
    Ok((g_ts, f_s))
}

/// Computes induced maps for every target case, stores them next to the
/// case as `<id>.prob.bin` and records them in the manifest.
pub fn induce_dataset(root: &Path, uda_ckpt: &Path, sd_ckpt: &Path) -> Result<InducedChannels> {
    let (g_ts, f_s) = load_pair(uda_ckpt, sd_ckpt)?;
    let mut manifest = DatasetManifest::load(root)?;
    let ids = domain_ids(&manifest, Domain::Target);
    let cases = load_cases(root, &manifest, &ids)?;
    let mut out = InducedChannels::new();
    for c in cases {
        let prob = induce_tissue_probabilities(&c.volume, &g_ts, &f_s)?;
        let stem = root.join(&c.id);
        save_prob_map(&prob, &stem)?;
        let rel = CasePaths::from_stem(Path::new(&c.id)).prob;
        if let Some(rec) = manifest.cases.iter_mut().find(|r| r.case_id == c.id) {
            rec.induced_prob_path = Some(rel.to_string_lossy().into_owned());
        }
        out.insert(c.id, prob);
    }
    manifest.save(root)?;
    Ok(out)
}

/// Tissue Dice of induced maps against the withheld target tissue truth,
/// with and without translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionAudit {
    pub cases: Vec<String>,
    pub with_uda: TissueScores,
    pub without_uda: TissueScores,
}

pub fn induction_audit(root: &Path, uda_ckpt: &Path, sd_ckpt: &Path) -> Result<InductionAudit> {
    let (g_ts, f_s) = load_pair(uda_ckpt, sd_ckpt)?;
    let manifest = DatasetManifest::load(root)?;
    let ids = domain_ids(&manifest, Domain::Target);
    let cases = load_cases(root, &manifest, &ids)?;
    let mut truths = Vec::with_capacity(cases.len());
    for c in &cases {
        truths.push(load_label_map(&hidden_tissue_stem(root, &c.id))?);
    }
    let mut with = Vec::with_capacity(cases.len());
    let mut without = Vec::with_capacity(cases.len());
    for (c, t) in cases.iter().zip(&truths) {
        with.push((induce_tissue_probabilities(&c.volume, &g_ts, &f_s)?.argmax(Taxonomy::Tissue), t));
        without.push((
            induce_tissue_probabilities(&c.volume, &IdentityTranslator, &f_s)?.argmax(Taxonomy::Tissue),
            t,
        ));
    }
    Ok(InductionAudit {
        cases: ids,
        with_uda: TissueScores::from_pairs(&with)?,
        without_uda: TissueScores::from_pairs(&without)?,
    })
}

use std::path::{Path, PathBuf};

use itl_core::data::{load_case, DatasetManifest, Domain};
use itl_core::nets::checkpoint::{blob_path, load_checkpoint};
use itl_core::nets::{GeneratorSpec, Segmentor, SegmentorSpec};
use itl_core::phantom::{generate_dataset, DomainShiftParams, PhantomParams};
use itl_core::pipeline::{
    induce_dataset, induce_tissue_probabilities, load_induced, train_sd_segmentor, train_td_segmentor, train_uda,
    IdentityTranslator, Stage, TrainConfig,
};
use itl_core::preprocess::preprocess_dataset;
use itl_core::Error;
use tempfile::TempDir;

fn dataset(dir: &Path, shift: DomainShiftParams) -> PathBuf {
    let params = PhantomParams {
        shape: [16, 16, 16],
        seed: 3,
        ..Default::default()
    };
    let raw = dir.join("raw");
    let prep = dir.join("prep");
    generate_dataset(&raw, 10, 10, &params, &shift).unwrap();
    preprocess_dataset(&raw, &prep, [16, 16, 16]).unwrap();
    prep
}

fn base(stage: Stage, data: &Path, out: &Path) -> TrainConfig {
    TrainConfig {
        stage,
        data_dir: data.to_path_buf(),
        checkpoint: out.join("model.json"),
        log: Some(out.join("train.jsonl")),
        iterations: 2,
        batch_size: 1,
        seed: 9,
        segmentor: SegmentorSpec {
            base_width: 4,
            ..Default::default()
        },
        generator: GeneratorSpec {
            base_width: 4,
            residual_blocks: 1,
            ..Default::default()
        },
        discriminator: itl_core::nets::DiscriminatorSpec {
            base_width: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn read_log(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn all_numbers_finite(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        serde_json::Value::Object(m) => m.values().all(all_numbers_finite),
        serde_json::Value::Array(a) => a.iter().all(all_numbers_finite),
        _ => true,
    }
}

#[test]
fn full_chain_smoke() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path(), DomainShiftParams::default());

    let sd_cfg = base(Stage::SdSeg, &data, &tmp.path().join("sd"));
    let sd = train_sd_segmentor(&sd_cfg).unwrap();
    assert!(sd.final_loss.is_finite());
    assert!(sd.checkpoint.path.is_file());
    let sd_blob = std::fs::read(blob_path(&sd.checkpoint.path)).unwrap();

    let uda_cfg = base(Stage::Uda, &data, &tmp.path().join("uda"));
    let uda = train_uda(&uda_cfg, &sd.checkpoint.path).unwrap();
    let ck = load_checkpoint(&uda.checkpoint.path).unwrap();
    let roles: Vec<&str> = ck.header.networks.iter().map(|n| n.role.as_str()).collect();
    for r in ["g_ts", "g_st", "d_s", "d_t", "d_m", "f_s"] {
        assert!(roles.contains(&r), "missing {r}");
    }
    let log = read_log(uda_cfg.log.as_ref().unwrap());
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(all_numbers_finite));
    for term in ["adv_st", "adv_ts", "cycle", "identity", "semantic"] {
        assert!(log[0]["generator"]["raw"][term].is_number());
    }

    // The source segmentor is untouched by adaptation.
    assert_eq!(std::fs::read(blob_path(&sd.checkpoint.path)).unwrap(), sd_blob);
    let f_s = load_checkpoint(&sd.checkpoint.path).unwrap().segmentor("segmentor").unwrap();
    assert_eq!(ck.segmentor("f_s").unwrap().params.blob(), f_s.params.blob());

    let induced = induce_dataset(&data, &uda.checkpoint.path, &sd.checkpoint.path).unwrap();
    let manifest = DatasetManifest::load(&data).unwrap();
    let target: Vec<String> = manifest.cases_in(Domain::Target).map(|c| c.case_id.clone()).collect();
    assert_eq!(induced.len(), target.len());
    assert_eq!(load_induced(&data, &target).unwrap(), induced);

    let td_cfg = |channels: usize| TrainConfig {
        segmentor: SegmentorSpec {
            in_channels: channels,
            base_width: 4,
            ..Default::default()
        },
        ..base(Stage::TdSeg, &data, &tmp.path().join(format!("td{channels}")))
    };
    assert!(matches!(train_td_segmentor(&td_cfg(4), Some(&induced)), Err(Error::Shape(_))));
    assert!(matches!(train_td_segmentor(&td_cfg(8), None), Err(Error::Shape(_))));
    let base_run = train_td_segmentor(&td_cfg(4), None).unwrap();
    let ind_run = train_td_segmentor(&td_cfg(8), Some(&induced)).unwrap();
    assert!(base_run.final_loss.is_finite() && ind_run.final_loss.is_finite());

    let mut partial = induced.clone();
    partial.pop_first();
    assert!(train_td_segmentor(&td_cfg(8), Some(&partial)).is_err());
}

#[test]
fn identity_translator_induction_is_plain_segmentation() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path(), DomainShiftParams::default());
    let manifest = DatasetManifest::load(&data).unwrap();
    let rec = manifest.cases_in(Domain::Target).next().unwrap();
    let (vol, _) = load_case(&rec.stem(&data)).unwrap();
    let f_s = Segmentor::new(
        SegmentorSpec {
            base_width: 4,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let a = induce_tissue_probabilities(&vol, &IdentityTranslator, &f_s).unwrap();
    assert_eq!(a, f_s.predict(&vol).unwrap());
    for v in 0..a.data().len() / 4 {
        let s: f32 = (0..4).map(|k| a.class(k)[v]).sum();
        assert!((s - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn stages_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path(), DomainShiftParams::default());
    let run = |name: &str| {
        let cfg = base(Stage::SdSeg, &data, &tmp.path().join(name));
        let out = train_sd_segmentor(&cfg).unwrap();
        let sd_blob = std::fs::read(blob_path(&out.checkpoint.path)).unwrap();
        let ucfg = base(Stage::Uda, &data, &tmp.path().join(format!("{name}-uda")));
        let u = train_uda(&ucfg, &out.checkpoint.path).unwrap();
        (sd_blob, std::fs::read(blob_path(&u.checkpoint.path)).unwrap(), u.loss_history)
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = TempDir::new().unwrap();
    let cfg = base(Stage::SdSeg, tmp.path(), &tmp.path().join("sd"));
    assert!(train_sd_segmentor(&cfg).is_err());
    let data = dataset(tmp.path(), DomainShiftParams::default());
    let ucfg = base(Stage::Uda, &data, &tmp.path().join("uda"));
    assert!(train_uda(&ucfg, &tmp.path().join("absent.json")).is_err());
    let bad = TrainConfig {
        iterations: 0,
        ..base(Stage::SdSeg, &data, &tmp.path().join("x"))
    };
    assert!(matches!(train_sd_segmentor(&bad), Err(Error::InvalidArgument(_))));
}

#[test]
fn identity_initialised_generators_start_with_zero_cycle() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path(), DomainShiftParams::identity());
    let sd = train_sd_segmentor(&base(Stage::SdSeg, &data, &tmp.path().join("sd"))).unwrap();
    let mut cfg = TrainConfig {
        iterations: 1,
        ..base(Stage::Uda, &data, &tmp.path().join("uda"))
    };
    cfg.generator.head_init_gain = 0.0;
    train_uda(&cfg, &sd.checkpoint.path).unwrap();
    let raw = &read_log(cfg.log.as_ref().unwrap())[0]["generator"]["raw"];
    // Only the input clamp separates them from the identity.
    let bound = 2.0 * itl_core::nets::generator::LOGIT_EPS + 1e-6;
    assert!(raw["cycle"].as_f64().unwrap() <= bound);
    assert!(raw["identity"].as_f64().unwrap() <= bound);
}

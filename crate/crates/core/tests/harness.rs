use std::fs;
use std::path::Path;

use raingen::harness::*;
use raingen::losses::{GeomVariant, NceVariant};
use raingen::metrics::read_records;
use raingen::models::{init_params, ModelConfig, GENERATOR};
use raingen::substrate::Tensor;
use raingen::synthdata::*;
use raingen::Error;
use tempfile::tempdir;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        res_blocks: 1,
        embed_dim: 8,
        taps: vec![0, 1, 2, 3],
        init_std: 0.02,
    }
}

fn tiny_dataset(root: &Path) -> DatasetManifest {
    let spec = DatasetSpec {
        counts: SplitCounts {
            train_a: 3,
            test_a: 3,
            train_b: 3,
            test_b: 3,
        },
        height: 16,
        width: 16,
        scenes: SceneDistribution::default(),
        weather: WeatherDistribution::default(),
    };
    build_dataset(&spec, root, 7).unwrap()
}

fn tiny_config(data: &Path, out: &Path) -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        manifest: data.to_path_buf(),
        output_dir: out.to_path_buf(),
        epochs: 2,
        crop_size: 16,
        num_patches: 16,
        eval_triples: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn config_parsing_and_overrides() {
    let mut kv =
        KeyValues::parse("# run\nepochs = 3\nvariant = m3\n\ntaps = 0, 2\nres_blocks = 2\n")
            .unwrap();
    kv.set("epochs=4").unwrap();
    let cfg = TrainConfig::from_key_values(&kv).unwrap();
    assert_eq!(cfg.epochs, 4);
    assert_eq!(cfg.variant, Some(Variant::M3));
    assert_eq!(cfg.loss.geom_variant, GeomVariant::Tps);
    assert_eq!(cfg.loss.nce_variant, NceVariant::PatchNce);
    assert_eq!(cfg.model.taps, vec![0, 2]);

    let back = TrainConfig::from_key_values(&KeyValues::parse(&cfg.render()).unwrap()).unwrap();
    assert_eq!(back, cfg);

    let custom =
        TrainConfig::from_key_values(&KeyValues::parse("nce = monce_easy\ngeom = ptl").unwrap())
            .unwrap();
    assert_eq!(custom.variant, None);
    assert_eq!(custom.loss.nce_variant, NceVariant::MoNceEasy);
    let back = TrainConfig::from_key_values(&KeyValues::parse(&custom.render()).unwrap()).unwrap();
    assert_eq!(back, custom);
}

#[test]
fn config_errors() {
    let bad = |text: &str| TrainConfig::from_key_values(&KeyValues::parse(text).unwrap());
    assert!(matches!(bad("epochz = 3"), Err(Error::Config(_))));
    assert!(bad("variant = M8").is_err());
    assert!(bad("variant = M2\nnce = patchnce").is_err());
    assert!(bad("epochs = many").is_err());
    assert!(bad("crop_size = 40").is_err());
    assert!(bad("batch_size = 4").is_err());
    assert!(bad("phase_boundary = 1.5").is_err());
    assert!(bad("taps = 9").is_err());
    assert!(KeyValues::parse("a = 1\na = 2").is_err());
    assert!(KeyValues::parse("no equals sign").is_err());
    assert!(KeyValues::default().set("novalue").is_err());
}

#[test]
fn variant_table() {
    use GeomVariant as G;
    use NceVariant as N;
    let want = [
        (G::None, N::PatchNce),
        (G::Ptl, N::PatchNce),
        (G::Tps, N::PatchNce),
        (G::None, N::MoNceHard),
        (G::None, N::SenceMpa),
        (G::Tps, N::SenceMiou),
        (G::Tps, N::SenceMpa),
    ];
    for (v, w) in Variant::ALL.iter().zip(want) {
        assert_eq!(v.losses(), w, "{v}");
        assert_eq!(v.name().parse::<Variant>().unwrap(), *v);
    }
}

#[test]
fn data_config_defaults_and_overrides() {
    let c = DataConfig::from_key_values(&KeyValues::default()).unwrap();
    assert_eq!(
        (c.counts.train_a, c.counts.train_b, c.image_size),
        (200, 200, 64)
    );
    let mut kv = KeyValues::default();
    kv.set("train_a=5").unwrap();
    kv.set("image_size=32").unwrap();
    let c = DataConfig::from_key_values(&kv).unwrap();
    assert_eq!(c.dataset_spec().counts.train_a, 5);
    assert_eq!(c.dataset_spec().height, 32);
    kv.set("image_size=30").unwrap();
    assert!(DataConfig::from_key_values(&kv).is_err());
}

#[test]
fn training_writes_log_checkpoint_and_config() {
    let (data, out) = (tempdir().unwrap(), tempdir().unwrap());
    tiny_dataset(data.path());
    let cfg = tiny_config(data.path(), out.path());
    let td = TrainData::load(&cfg).unwrap();
    let mut seen = Vec::new();
    let outcome = train(&cfg, &td, &mut |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2]);

    let log: Vec<EpochRecord> = read_records(&outcome.log).unwrap();
    assert_eq!(log, outcome.epochs);
    for r in &log {
        assert_eq!(r.iterations, 3);
        for v in [
            r.discriminator,
            r.adversarial,
            r.contrastive,
            r.geometric,
            r.total,
            r.point_to_segment,
        ] {
            assert!(v.is_finite());
        }
        assert!(r.geometric > 0.0);
    }
    assert_eq!(log[0].lr, 2e-4);
    assert_eq!(log[1].lr, 2e-5);

    let loaded = checkpoint::load(&outcome.checkpoint, &cfg.model).unwrap();
    for ((n, a), (m, b)) in loaded.iter().zip(outcome.params.iter()) {
        assert_eq!(n, m);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, f64::from(*y as f32));
        }
    }
    let saved = fs::read_to_string(out.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(
        TrainConfig::from_key_values(&KeyValues::parse(&saved).unwrap()).unwrap(),
        cfg
    );
}

#[test]
fn zero_epochs_returns_initialization() {
    let (data, out) = (tempdir().unwrap(), tempdir().unwrap());
    tiny_dataset(data.path());
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_config(data.path(), out.path())
    };
    let outcome = train(&cfg, &TrainData::load(&cfg).unwrap(), &mut |_| {}).unwrap();
    assert!(outcome.epochs.is_empty());
    assert_eq!(outcome.params, init_params(&cfg.model, cfg.seed).unwrap());
}

#[test]
fn training_is_deterministic_and_seed_sensitive() {
    let data = tempdir().unwrap();
    tiny_dataset(data.path());
    let run = |seed: u64| {
        let out = tempdir().unwrap();
        let cfg = TrainConfig {
            seed,
            ..tiny_config(data.path(), out.path())
        };
        let o = train(&cfg, &TrainData::load(&cfg).unwrap(), &mut |_| {}).unwrap();
        (fs::read(&o.checkpoint).unwrap(), fs::read(&o.log).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_ne!(a.0, run(2).0);
}

#[test]
fn semantic_variants_need_segmaps() {
    let (data, out) = (tempdir().unwrap(), tempdir().unwrap());
    let m = tiny_dataset(data.path());
    let cfg = tiny_config(data.path(), out.path());
    let strip = |items: Vec<DomainItem>| {
        items
            .into_iter()
            .map(|i| DomainItem { segmap: None, ..i })
            .collect::<Vec<_>>()
    };
    let td = TrainData::new(
        strip(m.load_split(Split::TrainA).unwrap()),
        strip(m.load_split(Split::TrainB).unwrap()),
        false,
    )
    .unwrap();
    assert!(train(&cfg, &td, &mut |_| {}).is_err());
    let mut plain = cfg.clone();
    plain.apply_variant(Variant::M3);
    plain.epochs = 1;
    train(&plain, &td, &mut |_| {}).unwrap();
    assert!(TrainData::new(strip(m.load_split(Split::TrainA).unwrap()), vec![], false).is_err());
}

#[test]
fn silent_decoder_reproduces_baseline_statistics() {
    let data = tempdir().unwrap();
    let manifest = tiny_dataset(data.path());
    let cfg = tiny_config(data.path(), data.path());
    let mut store = init_params(&cfg.model, 0).unwrap();
    let names: Vec<String> = store
        .iter()
        .filter(|(n, _)| n.starts_with(&format!("{GENERATOR}dec")))
        .map(|(n, _)| n.to_string())
        .collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let report = evaluate(&store, &cfg, &manifest).unwrap();
    assert!((report.mmd2 - report.baseline_mmd2).abs() < 1e-3 * report.baseline_mmd2.max(1e-9));
    assert!((report.energy_distance - report.baseline_energy_distance).abs() < 1e-2);
    assert_eq!(report.triple_count, 2);
    assert_eq!(report.generated_count, 3);

    let path = data.path().join(REPORT_FILE);
    write_report(&path, &report).unwrap();
    assert_eq!(read_report(&path).unwrap(), report);
}

#[test]
fn translation_keeps_native_size() {
    let dir = tempdir().unwrap();
    let cfg = tiny_model();
    let store = init_params(&cfg, 3).unwrap();
    let input = dir.path().join("in");
    fs::create_dir_all(&input).unwrap();
    let img = Tensor::new(
        vec![3, 20, 28],
        (0..3 * 20 * 28).map(|i| (i % 17) as f64 / 16.0).collect(),
    )
    .unwrap();
    save_image(&input.join("odd.png"), &img).unwrap();
    save_image(
        &input.join("even.png"),
        &Tensor::new(vec![3, 16, 16], vec![0.5; 768]).unwrap(),
    )
    .unwrap();
    let output = dir.path().join("out");
    assert_eq!(translate_folder(&store, &cfg, &input, &output).unwrap(), 2);
    assert_eq!(
        load_image(&output.join("odd.png")).unwrap().shape(),
        &[3, 20, 28]
    );
    assert_eq!(
        load_image(&output.join("even.png")).unwrap().shape(),
        &[3, 16, 16]
    );

    let padded = pad_to_multiple(&img, 8).unwrap();
    assert_eq!(padded.shape(), &[3, 24, 32]);
    let d = padded.data();
    assert_eq!(d[23 * 32 + 31], img.data()[19 * 28 + 27]);
}

#[test]
fn ablation_driver_writes_table() {
    let (data, out) = (tempdir().unwrap(), tempdir().unwrap());
    tiny_dataset(data.path());
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config(data.path(), out.path())
    };
    let mut calls = Vec::new();
    let rows = ablate(&cfg, &[Variant::M1, Variant::M2], &mut |v, r| {
        calls.push((v, r.epoch))
    })
    .unwrap();
    assert_eq!(calls, vec![(Variant::M1, 1), (Variant::M2, 1)]);
    assert_eq!(rows[0].geometric_log, vec![0.0]);
    assert!(rows[1].geometric_log[0] > 0.0);
    let table = fs::read_to_string(out.path().join(ABLATION_FILE)).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], TABLE_HEADER);
    assert!(lines[1].starts_with("M1\tnone\tpatchnce\t"));
    assert!(lines[2].starts_with("M2\tptl\tpatchnce\t"));
    assert!(out.path().join("M2").join(CHECKPOINT_FILE).is_file());
    assert!(out.path().join("M1").join(REPORT_FILE).is_file());
    assert!(ablate(&cfg, &[], &mut |_, _| {}).is_err());
}

#[test]
fn gradcheck_passes_and_catches_injected_faults() {
    let report = gradcheck(&GradcheckOptions::default()).unwrap();
    assert!(report.passed(), "{}", report.render());
    for name in [
        "tps_loss",
        "ptl_loss",
        "gan_loss",
        "patch_nce",
        "monce_hard",
        "monce_easy",
        "sence",
        "conv2d",
    ] {
        assert!(report.get(name).is_some(), "{name} missing");
        let broken = gradcheck(&GradcheckOptions {
            seeds: 2,
            flip_sign_of: Some(name.into()),
            ..Default::default()
        })
        .unwrap();
        let failed: Vec<&str> = broken.failures().map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec![name]);
    }
}

use std::fs;

use raingen::semantic::{mpa, ScoreCache};
use raingen::synthdata::*;
use tempfile::tempdir;

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        counts: SplitCounts {
            train_a: 8,
            test_a: 2,
            train_b: 8,
            test_b: 2,
        },
        height: 32,
        width: 32,
        scenes: SceneDistribution::default(),
        weather: WeatherDistribution::default(),
    }
}

#[test]
fn build_writes_a_valid_manifest() {
    let dir = tempdir().unwrap();
    let m = build_dataset(&small_spec(), dir.path(), 3).unwrap();
    assert_eq!(m.entries.len(), 20);
    assert_eq!(m.count(Split::TrainA), 8);
    assert_eq!(m.count(Split::TestB), 2);
    m.validate().unwrap();

    let reloaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(reloaded, m);
    let same = DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(same.entries, m.entries);

    let items = m.load_split(Split::TrainB).unwrap();
    assert_eq!(items.len(), 8);
    for it in &items {
        assert_eq!(it.image.shape(), &[3, 32, 32]);
        let s = it.segmap.as_ref().unwrap();
        assert_eq!((s.height(), s.width()), (32, 32));
        assert!(it.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let ma = build_dataset(&small_spec(), a.path(), 11).unwrap();
    build_dataset(&small_spec(), b.path(), 11).unwrap();
    for e in &ma.entries {
        for p in [&e.image, &e.segmap] {
            assert_eq!(
                fs::read(a.path().join(p)).unwrap(),
                fs::read(b.path().join(p)).unwrap()
            );
        }
    }
    let c = tempdir().unwrap();
    build_dataset(&small_spec(), c.path(), 12).unwrap();
    let first = &ma.entries[0].image;
    assert_ne!(
        fs::read(a.path().join(first)).unwrap(),
        fs::read(c.path().join(first)).unwrap()
    );
}

#[test]
fn rainy_images_are_darker_and_semantic_scores_spread() {
    let dir = tempdir().unwrap();
    let m = build_dataset(&small_spec(), dir.path(), 5).unwrap();
    let clear = m.load_split(Split::TrainA).unwrap();
    let rainy = m.load_split(Split::TrainB).unwrap();
    let mean = |items: &[DomainItem]| {
        items
            .iter()
            .map(|i| i.image.data().iter().sum::<f64>() / i.image.numel() as f64)
            .sum::<f64>()
            / items.len() as f64
    };
    assert!(mean(&rainy) < mean(&clear));

    let maps = |items: &[DomainItem]| {
        items
            .iter()
            .map(|i| i.segmap.clone().unwrap())
            .collect::<Vec<_>>()
    };
    let cache = ScoreCache::new(maps(&clear), maps(&rainy));
    let mut scores = Vec::new();
    for a in 0..clear.len() {
        for b in 0..rainy.len() {
            let s = cache.get(a, b).unwrap();
            assert_eq!(
                s.mpa,
                mpa(
                    clear[a].segmap.as_ref().unwrap(),
                    rainy[b].segmap.as_ref().unwrap()
                )
                .unwrap()
            );
            scores.push(s.mpa);
        }
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(hi - lo > 0.2, "mPA spread too narrow: [{lo}, {hi}]");
}

#[test]
fn image_folder_loading() {
    let dir = tempdir().unwrap();
    build_dataset(&small_spec(), dir.path(), 1).unwrap();
    let folder = dir.path().join(Split::TestA.name());
    let items = load_image_folder(&folder, true).unwrap();
    assert_eq!(
        items.iter().map(|i| i.name.as_str()).collect::<Vec<_>>(),
        ["00000.png", "00001.png"]
    );

    fs::remove_file(folder.join(SEGMAP_DIR).join("00001.png")).unwrap();
    assert!(load_image_folder(&folder, true).is_err());
    let items = load_image_folder(&folder, false).unwrap();
    assert!(items[0].segmap.is_some() && items[1].segmap.is_none());

    fs::write(folder.join("notes.txt"), "ignored").unwrap();
    assert_eq!(load_image_folder(&folder, false).unwrap().len(), 2);
    assert!(load_image_folder(&dir.path().join("missing"), false).is_err());
}

#[test]
fn manifest_validation_catches_missing_files() {
    let dir = tempdir().unwrap();
    let m = build_dataset(&small_spec(), dir.path(), 2).unwrap();
    fs::remove_file(dir.path().join(&m.entries[3].image)).unwrap();
    assert!(m.validate().is_err());
    fs::write(dir.path().join(MANIFEST_FILE), "trainA\tonly-two-fields\n").unwrap();
    assert!(DatasetManifest::load(dir.path()).is_err());
    fs::write(dir.path().join(MANIFEST_FILE), "bogus\ta.png\tb.png\n").unwrap();
    assert!(DatasetManifest::load(dir.path()).is_err());
}

#[test]
fn mismatched_segmap_size_is_rejected() {
    let dir = tempdir().unwrap();
    build_dataset(&small_spec(), dir.path(), 4).unwrap();
    let folder = dir.path().join(Split::TrainA.name());
    let spec = SceneSpec::random(9, 16, 16, &SceneDistribution::default());
    let (_, seg) = gen_scene(&spec).unwrap();
    seg.save(&folder.join(SEGMAP_DIR).join("00000.png"))
        .unwrap();
    assert!(load_image_folder(&folder, true).is_err());
}

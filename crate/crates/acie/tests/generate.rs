//! End-to-end generation: invariants over the emitted dataset, byte
//! determinism across runs and thread counts, and annotation tightness
//! against recomposed pixels.

use std::collections::BTreeMap;
use std::path::Path;

use acie::{generate, read_annotations, read_manifest, rect_overlap, AcieConfig};
use image::RgbImage;

fn small_cfg() -> AcieConfig {
    AcieConfig {
        background_pool: 3,
        target_pool: 6,
        per_image: 4,
        count: 12,
        seed: 41,
        ..AcieConfig::default()
    }
}

fn pools(cfg: &AcieConfig) -> (Vec<RgbImage>, Vec<acie::TargetCrop>) {
    let bgs = acie::toy::toy_backgrounds(cfg.background_pool, 96, 80, 5, 23);
    let targets = acie::toy::toy_targets(3, &[10, 14]);
    assert_eq!(targets.len(), cfg.target_pool);
    (bgs, targets)
}

fn dir_snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        out.insert(name, std::fs::read(entry.path()).unwrap());
    }
    out
}

#[test]
fn emitted_dataset_satisfies_the_contract() {
    let cfg = small_cfg();
    let (bgs, targets) = pools(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let rows = generate(&cfg, &bgs, &targets, dir.path()).unwrap();

    assert_eq!(rows.len(), cfg.count);
    let reread = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(reread, rows);

    for row in &rows {
        let img = image::open(dir.path().join(&row.image)).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (row.width, row.height));

        let boxes = read_annotations(&dir.path().join(&row.annotations)).unwrap();
        assert_eq!(boxes.len(), cfg.per_image);
        for b in &boxes {
            assert!(b.x2 <= row.width && b.y2 <= row.height, "{:?} out of bounds", b);
        }
        for i in 0..boxes.len() {
            for j in (i + 1)..boxes.len() {
                assert!(!rect_overlap(&boxes[i], &boxes[j]), "{:?} vs {:?}", boxes[i], boxes[j]);
            }
        }

        let text_path = row.text.as_ref().expect("emit_text defaults on");
        let text = std::fs::read_to_string(dir.path().join(text_path)).unwrap();
        assert!(text.starts_with("scene with class"), "{}", text);
        assert_eq!(text.split_whitespace().count(), 2 + cfg.per_image);
    }
}

#[test]
fn same_seed_reproduces_every_byte() {
    let cfg = small_cfg();
    let (bgs, targets) = pools(&cfg);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    generate(&cfg, &bgs, &targets, dir_a.path()).unwrap();
    generate(&cfg, &bgs, &targets, dir_b.path()).unwrap();
    assert_eq!(dir_snapshot(dir_a.path()), dir_snapshot(dir_b.path()));

    let mut other = cfg.clone();
    other.seed = 42;
    let dir_c = tempfile::tempdir().unwrap();
    generate(&other, &bgs, &targets, dir_c.path()).unwrap();
    assert_ne!(dir_snapshot(dir_a.path()), dir_snapshot(dir_c.path()));
}

#[test]
fn single_threaded_run_matches_the_parallel_one() {
    let cfg = small_cfg();
    let (bgs, targets) = pools(&cfg);
    let dir_par = tempfile::tempdir().unwrap();
    generate(&cfg, &bgs, &targets, dir_par.path()).unwrap();

    let dir_ser = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| generate(&cfg, &bgs, &targets, dir_ser.path())).unwrap();

    assert_eq!(dir_snapshot(dir_par.path()), dir_snapshot(dir_ser.path()));
}

#[test]
fn annotations_are_tight_on_black_backgrounds() {
    let cfg = AcieConfig {
        background_pool: 1,
        target_pool: 6,
        per_image: 3,
        count: 8,
        seed: 3,
        ..AcieConfig::default()
    };
    let bgs = vec![RgbImage::new(96, 96)];
    let targets = acie::toy::toy_targets(3, &[9, 13]);
    let dir = tempfile::tempdir().unwrap();
    let rows = generate(&cfg, &bgs, &targets, dir.path()).unwrap();

    for row in &rows {
        let img = image::open(dir.path().join(&row.image)).unwrap().to_rgb8();
        let boxes = read_annotations(&dir.path().join(&row.annotations)).unwrap();
        let lit = |x: u32, y: u32| img.get_pixel(x, y).0.iter().any(|&c| c > 0);

        for (x, y, px) in img.enumerate_pixels() {
            let covered = boxes
                .iter()
                .any(|b| x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2);
            if !covered {
                assert_eq!(px.0, [0, 0, 0], "stray pixel at ({}, {})", x, y);
            }
        }
        for b in &boxes {
            assert!((b.x1..b.x2).any(|x| lit(x, b.y1)), "loose top edge in {:?}", b);
            assert!((b.x1..b.x2).any(|x| lit(x, b.y2 - 1)), "loose bottom edge in {:?}", b);
            assert!((b.y1..b.y2).any(|y| lit(b.x1, y)), "loose left edge in {:?}", b);
            assert!((b.y1..b.y2).any(|y| lit(b.x2 - 1, y)), "loose right edge in {:?}", b);
        }
    }
}

#[test]
fn impossible_packing_reports_the_reroll_budget() {
    let cfg = AcieConfig {
        background_pool: 1,
        target_pool: 1,
        per_image: 2,
        count: 1,
        seed: 0,
        reroll_budget: 4,
        ..AcieConfig::default()
    };
    // Two 20-wide crops cannot coexist on a 24-wide background.
    let bgs = vec![RgbImage::new(24, 24)];
    let targets = vec![acie::toy::toy_target(0, 20)];
    let dir = tempfile::tempdir().unwrap();
    let err = generate(&cfg, &bgs, &targets, dir.path()).unwrap_err().to_string();
    assert!(err.contains("4 re-rolls"), "{}", err);
}

#[test]
fn scale_jitter_changes_box_sizes() {
    let cfg = AcieConfig { scale_jitter: true, ..small_cfg() };
    let (bgs, targets) = pools(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let rows = generate(&cfg, &bgs, &targets, dir.path()).unwrap();

    let mut widths = std::collections::BTreeSet::new();
    for row in &rows {
        for b in read_annotations(&dir.path().join(&row.annotations)).unwrap() {
            widths.insert(b.x2 - b.x1);
        }
    }
    // The un-jittered pools only ever produce widths 10 and 14.
    assert!(widths.iter().any(|w| *w != 10 && *w != 14), "{:?}", widths);
}

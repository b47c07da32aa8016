//! Manifest-backed dataset loading, pool loading for synthesis, and the
//! deterministic train/val/test split.

use std::fmt;
use std::path::{Path, PathBuf};

use acie::{read_annotations, read_manifest, ManifestRow, TargetCrop};
use fusedet::detect::GroundTruth;
use fusedet::model::Sample;
use fusedet::pngio;
use image::RgbImage;
use numcore::derive_seed;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{CliError, Result};

/// Decoded samples plus their manifest rows, kept index-aligned for
/// reporting and re-serialization.
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub rows: Vec<ManifestRow>,
    pub dir: PathBuf,
}

fn data_err(path: &Path, detail: impl fmt::Display) -> CliError {
    CliError::Data(format!("{}: {}", path.display(), detail))
}

/// Loads every sample referenced by a manifest. Images come back as
/// `[3, H, W]` tensors in `[0, 1]`; a null text path loads as `None`.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let rows = read_manifest(manifest)?;
    if rows.is_empty() {
        return Err(data_err(manifest, "manifest is empty"));
    }
    let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut samples = Vec::with_capacity(rows.len());
    for row in &rows {
        let image_path = dir.join(&row.image);
        let image = pngio::load_rgb(&image_path).map_err(|e| data_err(&image_path, e))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if (w, h) != (row.width as usize, row.height as usize) {
            return Err(data_err(
                &image_path,
                format!("file is {}x{} but the manifest says {}x{}", w, h, row.width, row.height),
            ));
        }
        let gts = read_annotations(&dir.join(&row.annotations))?
            .into_iter()
            .map(|b| GroundTruth {
                class_id: b.class_id,
                x1: b.x1 as f64,
                y1: b.y1 as f64,
                x2: b.x2 as f64,
                y2: b.y2 as f64,
            })
            .collect();
        let text = match &row.text {
            None => None,
            Some(rel) => {
                let path = dir.join(rel);
                Some(std::fs::read_to_string(&path).map_err(|e| data_err(&path, e))?)
            }
        };
        samples.push(Sample { image, text, gts });
    }
    Ok(Dataset { samples, rows, dir })
}

/// Largest-remainder apportionment of `n` samples to the given ratios;
/// every count is within one of `n * ratio`.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(CliError::Usage(format!("ratios {:?} must be non-negative and sum to 1", ratios)));
    }
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    Ok(counts)
}

/// Shuffles row indices with the seed and deals them into train/val/test
/// index lists sized by `split_counts`.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if n == 0 {
        return Err(CliError::Data("cannot split an empty dataset".to_string()));
    }
    let counts = split_counts(n, ratios)?;
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split-shuffle", 0));
    indices.shuffle(&mut rng);
    let val_start = counts[0];
    let test_start = counts[0] + counts[1];
    Ok([
        indices[..val_start].to_vec(),
        indices[val_start..test_start].to_vec(),
        indices[test_start..].to_vec(),
    ])
}

/// Backgrounds for synthesis: every `.png` directly in `dir`, sorted by
/// file name.
pub fn load_backgrounds(dir: &Path) -> Result<Vec<RgbImage>> {
    let mut paths = png_files(dir)?;
    paths.sort();
    if paths.is_empty() {
        return Err(data_err(dir, "no .png backgrounds"));
    }
    paths
        .iter()
        .map(|p| Ok(image::open(p).map_err(|e| data_err(p, e))?.to_rgb8()))
        .collect()
}

/// Targets for synthesis: `dir` holds one subdirectory per class, named
/// by its numeric class id, each containing `.png` rasters whose alpha
/// channel masks the target.
pub fn load_targets(dir: &Path) -> Result<Vec<TargetCrop>> {
    let mut class_dirs: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| data_err(dir, e))? {
        let entry = entry.map_err(|e| data_err(dir, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().into_string().unwrap_or_default();
        let class_id = name.parse::<usize>().map_err(|_| {
            data_err(&entry.path(), "target subdirectories must be named by class id")
        })?;
        class_dirs.push((class_id, entry.path()));
    }
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(data_err(dir, "no class subdirectories"));
    }
    let mut crops = Vec::new();
    for (class_id, class_dir) in class_dirs {
        let mut paths = png_files(&class_dir)?;
        paths.sort();
        for p in paths {
            let rgba = image::open(&p).map_err(|e| data_err(&p, e))?.to_rgba8();
            crops.push(TargetCrop::from_rgba(rgba, class_id).map_err(|e| data_err(&p, e))?);
        }
    }
    if crops.is_empty() {
        return Err(data_err(dir, "class subdirectories contain no .png targets"));
    }
    Ok(crops)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| data_err(dir, e))? {
        let path = entry.map_err(|e| data_err(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            out.push(path);
        }
    }
    Ok(out)
}

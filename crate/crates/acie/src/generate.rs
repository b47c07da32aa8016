//! The dataset generator: per-image rejection-sampled composition.

use std::fs;
use std::path::Path;

use image::RgbImage;
use numcore::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compose::{paste, TargetCrop};
use crate::files::{write_annotations, write_manifest, ManifestRow};
use crate::place::{place_target, BoxAnnotation};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcieConfig {
    /// Required background pool size; generation rejects a pool of any
    /// other size so a config names its dataset unambiguously.
    pub background_pool: usize,
    /// Required target pool size.
    pub target_pool: usize,
    /// Targets pasted per image.
    pub per_image: usize,
    /// Number of composite images to emit.
    pub count: usize,
    pub seed: u64,
    /// Placement attempts per target before the image is re-rolled.
    pub max_retries: usize,
    /// Background/target re-rolls per image before giving up.
    pub reroll_budget: usize,
    /// Uniform per-target rescale in [0.5, 1.5] when set. Off by default;
    /// the base algorithm pastes crops at native size.
    pub scale_jitter: bool,
    /// Write a caption sidecar naming the pasted classes.
    pub emit_text: bool,
}

impl Default for AcieConfig {
    fn default() -> Self {
        AcieConfig {
            background_pool: 580,
            target_pool: 820,
            per_image: 4,
            count: 10_000,
            seed: 0,
            max_retries: 100,
            reroll_budget: 10,
            scale_jitter: false,
            emit_text: true,
        }
    }
}

impl AcieConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("background_pool", self.background_pool),
            ("target_pool", self.target_pool),
            ("per_image", self.per_image),
            ("count", self.count),
            ("max_retries", self.max_retries),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        Ok(())
    }
}

/// Composes one output image. Draws everything it needs from `rng`, so a
/// fresh per-image rng makes the result independent of scheduling.
fn compose_image(
    cfg: &AcieConfig,
    backgrounds: &[RgbImage],
    targets: &[TargetCrop],
    rng: &mut ChaCha8Rng,
) -> Result<Option<(RgbImage, Vec<BoxAnnotation>)>> {
    let bg = &backgrounds[rng.gen_range(0..backgrounds.len())];
    let (bg_w, bg_h) = bg.dimensions();
    let mut boxes: Vec<BoxAnnotation> = Vec::with_capacity(cfg.per_image);
    let mut placed: Vec<(TargetCrop, u32, u32)> = Vec::with_capacity(cfg.per_image);
    for _ in 0..cfg.per_image {
        let crop = &targets[rng.gen_range(0..targets.len())];
        let crop = if cfg.scale_jitter {
            let fit = (bg_w as f64 / crop.tight_w() as f64)
                .min(bg_h as f64 / crop.tight_h() as f64);
            let hi = fit.min(1.5).max(0.5);
            crop.scaled(rng.gen_range(0.5..=hi))?
        } else {
            crop.clone()
        };
        match place_target(bg_w, bg_h, &crop, &boxes, rng, cfg.max_retries) {
            Ok(annotation) => {
                placed.push((crop, annotation.x1, annotation.y1));
                boxes.push(annotation);
            }
            // A crowded roll is expected; report it so the caller re-rolls.
            Err(Error::Placement { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    let mut out = bg.clone();
    for (crop, x1, y1) in &placed {
        paste(&mut out, crop, *x1, *y1);
    }
    Ok(Some((out, boxes)))
}

fn caption(boxes: &[BoxAnnotation]) -> String {
    let names: Vec<String> = boxes.iter().map(|b| format!("class{}", b.class_id)).collect();
    format!("scene with {}", names.join(" "))
}

/// Emits `cfg.count` composite images plus sidecars under `out_dir` and
/// returns the manifest rows in image order. The manifest itself is
/// written as `manifest.jsonl` in the same directory.
pub fn generate(
    cfg: &AcieConfig,
    backgrounds: &[RgbImage],
    targets: &[TargetCrop],
    out_dir: &Path,
) -> Result<Vec<ManifestRow>> {
    cfg.validate()?;
    if backgrounds.len() != cfg.background_pool {
        return Err(Error::Config(format!(
            "config names a background pool of {}, got {}",
            cfg.background_pool,
            backgrounds.len()
        )));
    }
    if targets.len() != cfg.target_pool {
        return Err(Error::Config(format!(
            "config names a target pool of {}, got {}",
            cfg.target_pool,
            targets.len()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::Io(out_dir.to_path_buf(), e))?;

    let rows: Vec<ManifestRow> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "acie-image", i as u64));
            let mut composed = None;
            for _ in 0..=cfg.reroll_budget {
                if let Some(ok) = compose_image(cfg, backgrounds, targets, &mut rng)? {
                    composed = Some(ok);
                    break;
                }
            }
            let (img, boxes) = composed.ok_or(Error::ImageRetries {
                image: i,
                rolls: cfg.reroll_budget,
            })?;

            let stem = format!("img_{:05}", i);
            let image_name = format!("{}.png", stem);
            let ann_name = format!("{}.txt", stem);
            let image_path = out_dir.join(&image_name);
            img.save(&image_path).map_err(|e| Error::Image(e.to_string()))?;
            write_annotations(&out_dir.join(&ann_name), &boxes)?;
            let text = if cfg.emit_text {
                let text_name = format!("{}.text", stem);
                fs::write(out_dir.join(&text_name), caption(&boxes))
                    .map_err(|e| Error::Io(out_dir.join(&text_name), e))?;
                Some(text_name)
            } else {
                None
            };
            Ok(ManifestRow {
                image: image_name,
                annotations: ann_name,
                text,
                width: img.width(),
                height: img.height(),
            })
        })
        .collect::<Result<Vec<ManifestRow>>>()?;

    write_manifest(&out_dir.join("manifest.jsonl"), &rows)?;
    Ok(rows)
}

//! Procedural pools for tests and small experiments: bright geometric
//! targets on transparent rasters, plus dim noise backgrounds.

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use numcore::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compose::TargetCrop;

const PALETTE: [[u8; 3]; 7] = [
    [230, 60, 60],
    [60, 200, 60],
    [70, 110, 230],
    [230, 200, 50],
    [200, 70, 200],
    [60, 200, 200],
    [240, 140, 40],
];

/// A solid shape (square, circle, or triangle by class) in a class-keyed
/// color. The opaque mask touches all four edges of the raster, so the
/// crop's tight rect is exactly `size` by `size`.
pub fn toy_target(class_id: usize, size: u32) -> TargetCrop {
    assert!(size >= 3, "toy targets need at least a 3px raster");
    let [r, g, b] = PALETTE[class_id % PALETTE.len()];
    let color = Rgba([r, g, b, 255]);
    let clear = Rgba([0, 0, 0, 0]);
    let c = (size - 1) as f64 / 2.0;
    let radius = size as f64 / 2.0;
    let mut img = RgbaImage::from_pixel(size, size, clear);
    for y in 0..size {
        for x in 0..size {
            let inside = match class_id % 3 {
                0 => true,
                1 => {
                    let (dx, dy) = (x as f64 - c, y as f64 - c);
                    dx * dx + dy * dy <= radius * radius
                }
                _ => (x as f64 - c).abs() * 2.0 <= y as f64 + 1.0,
            };
            if inside {
                img.put_pixel(x, y, color);
            }
        }
    }
    TargetCrop::from_rgba(img, class_id).expect("toy shapes are never empty")
}

/// One target per (class, size) pair, classes varying fastest.
pub fn toy_targets(num_class: usize, sizes: &[u32]) -> Vec<TargetCrop> {
    let mut out = Vec::with_capacity(num_class * sizes.len());
    for &size in sizes {
        for class_id in 0..num_class {
            out.push(toy_target(class_id, size));
        }
    }
    out
}

/// Uniform noise with per-channel values in `0..=noise`. Zero noise gives
/// a black background, which keeps pasted targets as the only content.
pub fn noise_background(w: u32, h: u32, noise: u8, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = RgbImage::new(w, h);
    for px in img.pixels_mut() {
        *px = Rgb([
            rng.gen_range(0..=noise),
            rng.gen_range(0..=noise),
            rng.gen_range(0..=noise),
        ]);
    }
    img
}

pub fn toy_backgrounds(count: usize, w: u32, h: u32, seed: u64, noise: u8) -> Vec<RgbImage> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "toy-background", i as u64));
            noise_background(w, h, noise, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_shape_touches_all_four_edges() {
        for class_id in 0..7 {
            for size in [3u32, 8, 9, 16] {
                let crop = toy_target(class_id, size);
                assert_eq!((crop.tight_w(), crop.tight_h()), (size, size));
                let img = crop.raster();
                let opaque = |x: u32, y: u32| img.get_pixel(x, y).0[3] > 0;
                assert!((0..size).any(|x| opaque(x, 0)), "class {} size {} top", class_id, size);
                assert!((0..size).any(|x| opaque(x, size - 1)));
                assert!((0..size).any(|y| opaque(0, y)));
                assert!((0..size).any(|y| opaque(size - 1, y)));
            }
        }
    }

    #[test]
    fn classes_get_distinct_colors() {
        let a = toy_target(0, 8);
        let b = toy_target(1, 8);
        let first_opaque = |crop: &TargetCrop| {
            crop.raster().pixels().find(|p| p.0[3] > 0).copied().unwrap()
        };
        assert_ne!(first_opaque(&a), first_opaque(&b));
    }

    #[test]
    fn background_pools_are_seed_deterministic() {
        let a = toy_backgrounds(3, 16, 12, 9, 23);
        let b = toy_backgrounds(3, 16, 12, 9, 23);
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.as_raw(), y.as_raw());
        }
        let c = toy_backgrounds(3, 16, 12, 10, 23);
        assert_ne!(a[0].as_raw(), c[0].as_raw());
    }
}

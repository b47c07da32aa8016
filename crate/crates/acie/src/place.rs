//! Rejection-sampled placement of crops into a background.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::compose::TargetCrop;
use crate::{Error, Result};

/// One pasted target: corner-form integer pixel rect plus its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxAnnotation {
    pub class_id: usize,
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BoxAnnotation {
    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }
}

/// True iff the rects share positive area. Touching edges or corners do
/// not count: a zero-area intersection cannot confuse downstream IoU.
pub fn rect_overlap(a: &BoxAnnotation, b: &BoxAnnotation) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

/// Samples a uniform position for `crop` inside a `bg_w` by `bg_h`
/// background, rejecting positions that overlap any existing box. Gives up
/// after `max_retries` attempts.
pub fn place_target(
    bg_w: u32,
    bg_h: u32,
    crop: &TargetCrop,
    existing: &[BoxAnnotation],
    rng: &mut ChaCha8Rng,
    max_retries: usize,
) -> Result<BoxAnnotation> {
    let (tw, th) = (crop.tight_w(), crop.tight_h());
    if tw > bg_w || th > bg_h {
        return Err(Error::Config(format!(
            "crop {}x{} does not fit background {}x{}",
            tw, th, bg_w, bg_h
        )));
    }
    for _ in 0..max_retries {
        let x1 = rng.gen_range(0..=bg_w - tw);
        let y1 = rng.gen_range(0..=bg_h - th);
        let candidate = BoxAnnotation {
            class_id: crop.class_id,
            x1,
            y1,
            x2: x1 + tw,
            y2: y1 + th,
        };
        if existing.iter().all(|b| !rect_overlap(b, &candidate)) {
            return Ok(candidate);
        }
    }
    Err(Error::Placement { attempts: max_retries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbaImage;
    use rand::SeedableRng;

    fn rect(x1: u32, y1: u32, x2: u32, y2: u32) -> BoxAnnotation {
        BoxAnnotation { class_id: 0, x1, y1, x2, y2 }
    }

    fn opaque_crop(w: u32, h: u32) -> TargetCrop {
        let img = RgbaImage::from_pixel(w, h, image::Rgba([200, 40, 40, 255]));
        TargetCrop::from_rgba(img, 0).unwrap()
    }

    /// Pixel-set reference: integer rects overlap iff they share a pixel.
    fn rasterized_overlap(a: &BoxAnnotation, b: &BoxAnnotation) -> bool {
        for y in a.y1..a.y2 {
            for x in a.x1..a.x2 {
                if x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2 {
                    return true;
                }
            }
        }
        false
    }

    #[test]
    fn overlap_goldens() {
        assert!(rect_overlap(&rect(0, 0, 2, 2), &rect(1, 1, 3, 3)));
        assert!(!rect_overlap(&rect(0, 0, 2, 2), &rect(2, 0, 4, 2)));
        assert!(!rect_overlap(&rect(0, 0, 2, 2), &rect(2, 2, 4, 4)));
        assert!(rect_overlap(&rect(0, 0, 4, 4), &rect(1, 1, 2, 2)));
    }

    #[test]
    fn overlap_agrees_with_rasterization_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let mut mk = || {
                let x1 = rng.gen_range(0..20u32);
                let y1 = rng.gen_range(0..20u32);
                let x2 = x1 + rng.gen_range(1..8u32);
                let y2 = y1 + rng.gen_range(1..8u32);
                rect(x1, y1, x2, y2)
            };
            let (a, b) = (mk(), mk());
            assert_eq!(rect_overlap(&a, &b), rasterized_overlap(&a, &b), "{:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn empty_existing_list_accepts_the_first_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let crop = opaque_crop(8, 8);
        let placed = place_target(64, 64, &crop, &[], &mut rng, 1).unwrap();
        assert_eq!(placed.width(), 8);
        assert_eq!(placed.height(), 8);
        assert!(placed.x2 <= 64 && placed.y2 <= 64);
    }

    #[test]
    fn crop_as_large_as_the_background_is_forced_to_the_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let crop = opaque_crop(32, 24);
        let placed = place_target(32, 24, &crop, &[], &mut rng, 1).unwrap();
        assert_eq!(placed, BoxAnnotation { class_id: 0, x1: 0, y1: 0, x2: 32, y2: 24 });
    }

    #[test]
    fn four_placements_never_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let crop = opaque_crop(64, 64);
        let mut placed: Vec<BoxAnnotation> = Vec::new();
        for _ in 0..4 {
            let b = place_target(512, 512, &crop, &placed, &mut rng, 100).unwrap();
            placed.push(b);
        }
        for i in 0..placed.len() {
            for j in i + 1..placed.len() {
                assert!(!rect_overlap(&placed[i], &placed[j]));
            }
        }
    }

    #[test]
    fn exhausted_retries_report_the_attempt_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let crop = opaque_crop(8, 8);
        // The whole background is already claimed, so no sample can land.
        let wall = rect(0, 0, 10, 10);
        let err = place_target(10, 10, &crop, &[wall], &mut rng, 100).unwrap_err();
        assert!(err.to_string().contains("100"), "{}", err);
    }

    #[test]
    fn oversized_crop_is_rejected_up_front() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let crop = opaque_crop(20, 8);
        assert!(place_target(16, 16, &crop, &[], &mut rng, 5).is_err());
    }
}

//! Target crops and alpha compositing onto backgrounds.

use image::{imageops, Rgb, RgbImage, Rgba, RgbaImage};

use crate::{Error, Result};

/// A pasteable target: an RGBA raster cropped to the minimum bounding
/// rectangle of its opaque content, plus its class.
#[derive(Debug, Clone)]
pub struct TargetCrop {
    image: RgbaImage,
    pub class_id: usize,
}

impl TargetCrop {
    /// Crops the raster to the bounding rect of pixels with nonzero alpha.
    /// A fully transparent raster has nothing to paste and is rejected.
    pub fn from_rgba(image: RgbaImage, class_id: usize) -> Result<Self> {
        let (w, h) = image.dimensions();
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (w, h, 0u32, 0u32);
        for (x, y, px) in image.enumerate_pixels() {
            if px.0[3] > 0 {
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
        if min_x > max_x {
            return Err(Error::Image("target raster is fully transparent".to_string()));
        }
        let tight = imageops::crop_imm(&image, min_x, min_y, max_x - min_x + 1, max_y - min_y + 1)
            .to_image();
        Ok(TargetCrop { image: tight, class_id })
    }

    pub fn tight_w(&self) -> u32 {
        self.image.width()
    }

    pub fn tight_h(&self) -> u32 {
        self.image.height()
    }

    pub fn raster(&self) -> &RgbaImage {
        &self.image
    }

    /// Uniformly rescales the crop; dims are rounded and clamped to at
    /// least one pixel. Nearest-neighbor keeps the opaque mask tight.
    pub fn scaled(&self, factor: f64) -> Result<TargetCrop> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::Config(format!("scale factor {} must be positive", factor)));
        }
        let w = ((self.tight_w() as f64 * factor).round() as u32).max(1);
        let h = ((self.tight_h() as f64 * factor).round() as u32).max(1);
        let resized = imageops::resize(&self.image, w, h, imageops::FilterType::Nearest);
        // Nearest resize of a tight mask can still drop the opaque fringe,
        // so re-crop to keep the invariant.
        TargetCrop::from_rgba(resized, self.class_id)
    }
}

/// Alpha-composites the crop over the background with its top-left corner
/// at `(x1, y1)`. The caller guarantees the crop fits.
pub fn paste(bg: &mut RgbImage, crop: &TargetCrop, x1: u32, y1: u32) {
    for (dx, dy, px) in crop.raster().enumerate_pixels() {
        let Rgba([r, g, b, a]) = *px;
        if a == 0 {
            continue;
        }
        let dst = bg.get_pixel_mut(x1 + dx, y1 + dy);
        let Rgb([br, bgc, bb]) = *dst;
        let blend = |s: u8, d: u8| {
            ((s as u32 * a as u32 + d as u32 * (255 - a as u32) + 127) / 255) as u8
        };
        *dst = Rgb([blend(r, br), blend(g, bgc), blend(b, bb)]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transparent_margin_is_cropped_away() {
        let mut img = RgbaImage::from_pixel(10, 8, Rgba([0, 0, 0, 0]));
        for y in 2..5 {
            for x in 3..7 {
                img.put_pixel(x, y, Rgba([10, 20, 30, 255]));
            }
        }
        let crop = TargetCrop::from_rgba(img, 2).unwrap();
        assert_eq!((crop.tight_w(), crop.tight_h()), (4, 3));
        assert_eq!(crop.class_id, 2);
    }

    #[test]
    fn fully_transparent_raster_is_rejected() {
        let img = RgbaImage::from_pixel(4, 4, Rgba([50, 50, 50, 0]));
        assert!(TargetCrop::from_rgba(img, 0).is_err());
    }

    #[test]
    fn paste_blends_by_alpha() {
        let mut bg = RgbImage::from_pixel(3, 3, Rgb([100, 100, 100]));
        let mut fg = RgbaImage::from_pixel(1, 1, Rgba([200, 0, 100, 255]));
        fg.put_pixel(0, 0, Rgba([200, 0, 100, 255]));
        let crop = TargetCrop::from_rgba(fg, 0).unwrap();
        paste(&mut bg, &crop, 1, 1);
        assert_eq!(*bg.get_pixel(1, 1), Rgb([200, 0, 100]));
        assert_eq!(*bg.get_pixel(0, 0), Rgb([100, 100, 100]));

        // Half opacity lands halfway, with round-to-nearest.
        let mut bg = RgbImage::from_pixel(1, 1, Rgb([100, 100, 100]));
        let fg = RgbaImage::from_pixel(1, 1, Rgba([200, 0, 100, 128]));
        // A half-transparent pixel still counts as content for the crop.
        let crop = TargetCrop::from_rgba(fg, 0).unwrap();
        paste(&mut bg, &crop, 0, 0);
        let Rgb([r, g, b]) = *bg.get_pixel(0, 0);
        assert_eq!((r, g, b), (150, 50, 100));
    }

    #[test]
    fn scaling_keeps_the_mask_tight() {
        let mut img = RgbaImage::from_pixel(8, 8, Rgba([0, 0, 0, 0]));
        for y in 0..8 {
            for x in 0..8 {
                img.put_pixel(x, y, Rgba([40, 120, 40, 255]));
            }
        }
        let crop = TargetCrop::from_rgba(img, 1).unwrap();
        let up = crop.scaled(1.5).unwrap();
        assert_eq!((up.tight_w(), up.tight_h()), (12, 12));
        let down = crop.scaled(0.5).unwrap();
        assert_eq!((down.tight_w(), down.tight_h()), (4, 4));
    }
}

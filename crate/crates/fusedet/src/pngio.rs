//! PNG round-trips between files and `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use numcore::Tensor;

use crate::error::{Error, Result};

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(Error::Tensor)
}

pub fn save_rgb(path: &Path, t: &Tensor) -> Result<()> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::Image(format!("expected [3, H, W] tensor, got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let data = t.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for c in 0..3 {
            let v = data[(c * h + y as usize) * w + x as usize];
            px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image(format!("{}: {}", path.display(), e)))
}

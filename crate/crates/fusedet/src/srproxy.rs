//! Super-resolution proxy: upscalers, a degradation model, and the paired
//! original/super-resolved input that feeds the two-stream network.
//!
//! Real SR models stay external; they can be plugged in through a command
//! hook that receives a PNG and writes one back. The in-process methods
//! (nearest, bilinear) keep the pipeline self-contained and deterministic.

use std::path::Path;
use std::process::Command;

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pngio;

/// An original image and its upscaled companion, both `[C, H, W]` in `[0,1]`.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub original: Tensor,
    pub super_resolved: Tensor,
    pub factor: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "cmd")]
pub enum UpscaleMethod {
    Nearest,
    Bilinear,
    /// Invokes `cmd <in.png> <out.png> <factor>`; the command must write an
    /// 8-bit RGB PNG with both dimensions scaled by `factor`.
    External(String),
}

fn check_image(image: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    if image.rank() != 3 {
        return Err(Error::Image(format!("{}: expected [C, H, W], got {:?}", op, image.shape())));
    }
    if let Some(bad) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Image(format!("{}: value {} outside [0, 1]", op, bad)));
    }
    Ok((image.shape()[0], image.shape()[1], image.shape()[2]))
}

/// Upscales both spatial dims by an integer factor. Output values stay in
/// `[0, 1]`.
pub fn upscale(image: &Tensor, factor: usize, method: &UpscaleMethod) -> Result<Tensor> {
    let (c, h, w) = check_image(image, "upscale")?;
    if factor == 0 {
        return Err(Error::Image("upscale: factor must be >= 1".to_string()));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    match method {
        UpscaleMethod::Nearest => Ok(nearest(image, c, h, w, factor)),
        UpscaleMethod::Bilinear => Ok(bilinear(image, c, h, w, factor)),
        UpscaleMethod::External(cmd) => external(image, factor, cmd),
    }
}

/// Blur-then-downsample degradation used to synthesize low-resolution
/// training views. `blur_sigma == 0` skips the blur entirely, making the op
/// a pure block average that preserves the image mean. Both dims must be
/// divisible by `factor`.
pub fn degrade(image: &Tensor, factor: usize, blur_sigma: f64) -> Result<Tensor> {
    let (c, h, w) = check_image(image, "degrade")?;
    if factor == 0 {
        return Err(Error::Image("degrade: factor must be >= 1".to_string()));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Image(format!(
            "degrade: dims {}x{} not divisible by factor {}",
            h, w, factor
        )));
    }
    if !(blur_sigma.is_finite() && blur_sigma >= 0.0) {
        return Err(Error::Image("degrade: blur_sigma must be finite and >= 0".to_string()));
    }
    let blurred = if blur_sigma > 0.0 { gaussian_blur(image, c, h, w, blur_sigma) } else { image.clone() };
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; c * oh * ow];
    let inv = 1.0 / (factor * factor) as f64;
    let data = blurred.data();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += data[(ci * h + oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                out[(ci * oh + oy) * ow + ox] = (acc * inv).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).map_err(Error::Tensor)
}

/// Builds the two-stream input pair for one original image.
pub fn make_pair(original: &Tensor, factor: usize, method: &UpscaleMethod) -> Result<ImagePair> {
    let super_resolved = upscale(original, factor, method)?;
    Ok(ImagePair { original: original.clone(), super_resolved, factor })
}

fn nearest(image: &Tensor, c: usize, h: usize, w: usize, f: usize) -> Tensor {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    let data = image.data();
    for ci in 0..c {
        for oy in 0..oh {
            let src_row = (ci * h + oy / f) * w;
            let dst_row = (ci * oh + oy) * ow;
            for ox in 0..ow {
                out[dst_row + ox] = data[src_row + ox / f];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("nearest keeps values in range")
}

fn bilinear(image: &Tensor, c: usize, h: usize, w: usize, f: usize) -> Tensor {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; c * oh * ow];
    let data = image.data();
    let ff = f as f64;
    for oy in 0..oh {
        // Half-pixel centers: the output grid samples between input centers.
        let sy = ((oy as f64 + 0.5) / ff - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f64;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) / ff - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f64;
            for ci in 0..c {
                let base = ci * h;
                let top = data[(base + y0) * w + x0] * (1.0 - wx) + data[(base + y0) * w + x1] * wx;
                let bot = data[(base + y1) * w + x0] * (1.0 - wx) + data[(base + y1) * w + x1] * wx;
                out[(ci * oh + oy) * ow + ox] = (top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("bilinear keeps values in range")
}

fn gaussian_blur(image: &Tensor, c: usize, h: usize, w: usize, sigma: f64) -> Tensor {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        total += v;
    }
    for v in &mut kernel {
        *v /= total;
    }
    let data = image.data();
    // Horizontal pass with edge clamping, then vertical.
    let mut tmp = vec![0.0; data.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * data[(ci * h + y) * w + sx];
                }
                tmp[(ci * h + y) * w + x] = acc;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ci * h + sy) * w + x];
                }
                out[(ci * h + y) * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![c, h, w], out).expect("blur keeps values in range")
}

fn external(image: &Tensor, factor: usize, cmd: &str) -> Result<Tensor> {
    if image.shape()[0] != 3 {
        return Err(Error::Image(format!(
            "external upscaler needs a 3-channel image, got {} channels",
            image.shape()[0]
        )));
    }
    let dir = tempfile::tempdir().map_err(|e| Error::External(format!("tempdir: {}", e)))?;
    let in_path = dir.path().join("in.png");
    let out_path = dir.path().join("out.png");
    pngio::save_rgb(&in_path, image)?;
    run_hook(cmd, &in_path, &out_path, factor)?;
    let result = pngio::load_rgb(&out_path)?;
    let want_h = image.shape()[1] * factor;
    let want_w = image.shape()[2] * factor;
    if result.shape() != [3, want_h, want_w] {
        return Err(Error::External(format!(
            "{}: expected {}x{} output, got {}x{}",
            cmd,
            want_w,
            want_h,
            result.shape()[2],
            result.shape()[1]
        )));
    }
    Ok(result)
}

fn run_hook(cmd: &str, input: &Path, output: &Path, factor: usize) -> Result<()> {
    let status = Command::new(cmd)
        .arg(input)
        .arg(output)
        .arg(factor.to_string())
        .status()
        .map_err(|e| Error::External(format!("{}: {}", cmd, e)))?;
    if !status.success() {
        return Err(Error::External(format!("{}: exit status {}", cmd, status)));
    }
    Ok(())
}

//! Strided convolutional backbone shared by both image streams.
//!
//! Five 3x3 stride-2 convolutions take an RGB image down by a factor of 32.
//! The last three activations form the feature pyramid handed to the
//! multi-scale bridge: `v3` at stride 8, `v2` at stride 16 and `v1` at
//! stride 32 (the deepest, coarsest map).

use numcore::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;

/// One named convolution with optional relu. The struct owns the live weight
/// values; `forward` binds them onto the tape under stable names, so calling
/// it twice on one tape shares the parameters between both calls.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    name: String,
    weight: Tensor,
    bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

impl ConvLayer {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        ConvLayer {
            name: name.to_string(),
            weight: init::he_uniform(vec![c_out, c_in, kernel, kernel], fan_in, rng),
            // Nonzero bias keeps bias-only output cells off the exact relu
            // kink, where central differences disagree with the one-sided
            // analytic slope.
            bias: init::uniform(vec![c_out], 1.0 / (fan_in as f64).sqrt(), rng),
            stride,
            padding,
            relu,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.w", self.name), &self.weight);
        let b = tape.param(&format!("{}.b", self.name), &self.bias);
        let y = tape.conv2d(x, w, Some(b), self.stride, self.padding)?;
        if self.relu {
            Ok(tape.relu(y)?)
        } else {
            Ok(y)
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.w", self.name), &self.weight);
        f(&format!("{}.b", self.name), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.w", self.name), &mut self.weight);
        f(&format!("{}.b", self.name), &mut self.bias);
    }
}

/// Transposed-convolution counterpart of [`ConvLayer`], used by the bridge's
/// inverse branches.
#[derive(Debug, Clone)]
pub struct ConvTransposeLayer {
    name: String,
    weight: Tensor,
    bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub relu: bool,
}

impl ConvTransposeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        relu: bool,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        ConvTransposeLayer {
            name: name.to_string(),
            weight: init::he_uniform(vec![c_in, c_out, kernel, kernel], fan_in, rng),
            bias: init::uniform(vec![c_out], 1.0 / (fan_in as f64).sqrt(), rng),
            stride,
            padding,
            output_padding,
            relu,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{}.w", self.name), &self.weight);
        let b = tape.param(&format!("{}.b", self.name), &self.bias);
        let y = tape.conv_transpose2d(x, w, Some(b), self.stride, self.padding, self.output_padding)?;
        if self.relu {
            Ok(tape.relu(y)?)
        } else {
            Ok(y)
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{}.w", self.name), &self.weight);
        f(&format!("{}.b", self.name), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.w", self.name), &mut self.weight);
        f(&format!("{}.b", self.name), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels after the two stem convolutions (strides 2 and 4).
    pub stem: [usize; 2],
    /// Channels at the tapped scales, shallow to deep (strides 8, 16, 32).
    pub taps: [usize; 3],
}

/// The three tapped activations for one image, deepest first.
#[derive(Debug, Clone, Copy)]
pub struct PyramidVars {
    /// Stride 32, `taps[2]` channels.
    pub v1: Var,
    /// Stride 16, `taps[1]` channels.
    pub v2: Var,
    /// Stride 8, `taps[0]` channels.
    pub v3: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<ConvLayer>,
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str, cfg: &BackboneConfig) -> Result<Self> {
        let widths = [3, cfg.stem[0], cfg.stem[1], cfg.taps[0], cfg.taps[1], cfg.taps[2]];
        if widths.iter().skip(1).any(|&c| c == 0) {
            return Err(Error::Build("backbone channel counts must be >= 1".to_string()));
        }
        let layers = (0..5)
            .map(|i| {
                ConvLayer::new(rng, &format!("{}.conv{}", prefix, i), widths[i], widths[i + 1], 3, 2, 1, true)
            })
            .collect();
        Ok(Backbone { layers })
    }

    /// Runs the stack and taps the last three activations. The input must be
    /// `[3, H, W]` with both dims divisible by 32 so every halving is exact.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<PyramidVars> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Build(format!("backbone expects [3, H, W], got {:?}", shape)));
        }
        if shape[1] % 32 != 0 || shape[2] % 32 != 0 {
            return Err(Error::Build(format!(
                "backbone input {}x{} must be divisible by 32",
                shape[1], shape[2]
            )));
        }
        let mut x = image;
        let mut taps = Vec::with_capacity(3);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i >= 2 {
                taps.push(x);
            }
        }
        Ok(PyramidVars { v1: taps[2], v2: taps[1], v3: taps[0] })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for layer in &self.layers {
            layer.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for layer in &mut self.layers {
            layer.visit_mut(f);
        }
    }
}

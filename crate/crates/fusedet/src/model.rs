//! Full pipeline assembly: two image streams through a shared backbone and
//! bridge, text through the embedding table, fusion, expansion back to the
//! pyramid, and the detection tail.
//!
//! Geometry convention: the original image is square with side
//! `image_size`; both streams run at the super-resolved side
//! `image_size * sr_factor`, which must be divisible by 32. Ground truth
//! enters in original pixels, the loss lives in super-resolved pixels, and
//! detections are mapped back to original pixels on the way out.

use numcore::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::bridge::{Bridge, BridgeSpec};
use crate::detect::{AnchorSet, Detect, DetectConfig, Detection, GroundTruth, LossVars};
use crate::error::{Error, Result};
use crate::fusion::{EncoderConfig, Fusion};
use crate::init;
use crate::srproxy::{self, UpscaleMethod};
use crate::textenc::{EmbeddingTable, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input image in original pixels.
    pub image_size: usize,
    /// Integer upscale factor applied before the network.
    pub sr_factor: usize,
    pub num_class: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub neck_channels: usize,
    pub duplicate_text: bool,
    pub learned_positions: bool,
    /// Ablation switch: drop the text tokens from the fused sequence.
    pub text_enabled: bool,
    /// Ablation switch: when false the second stream gets a plain nearest
    /// upscale instead of `sr_method`.
    pub sr_enabled: bool,
    pub sr_method: UpscaleMethod,
    pub objectness_in_loss: bool,
    pub conf_thresh: f64,
    pub nms_thresh: f64,
    /// Anchor dims in super-resolved pixels; derived from the image dims
    /// when absent.
    pub anchors: Option<AnchorSet>,
}

impl Default for ModelConfig {
    /// Full-scale defaults: 152-pixel originals upscaled 4x to the 608-pixel
    /// network input.
    fn default() -> Self {
        ModelConfig {
            image_size: 152,
            sr_factor: 4,
            num_class: 102,
            backbone: BackboneConfig { stem: [64, 128], taps: [256, 512, 1024] },
            encoder: EncoderConfig {
                token_channels: 768,
                heads: 16,
                layers: 2,
                ff_expansion: 4,
                dropout: 0.5,
            },
            tokenizer: Tokenizer::default(),
            neck_channels: 256,
            duplicate_text: false,
            learned_positions: false,
            text_enabled: true,
            sr_enabled: true,
            sr_method: UpscaleMethod::Bilinear,
            objectness_in_loss: true,
            conf_thresh: 0.5,
            nms_thresh: 0.4,
            anchors: None,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration for the overfit and ablation runs.
    pub fn toy(num_class: usize) -> Self {
        ModelConfig {
            image_size: 64,
            sr_factor: 2,
            num_class,
            backbone: BackboneConfig { stem: [4, 8], taps: [16, 32, 64] },
            encoder: EncoderConfig {
                token_channels: 32,
                heads: 4,
                layers: 2,
                ff_expansion: 2,
                dropout: 0.5,
            },
            tokenizer: Tokenizer { buckets: 512, ..Tokenizer::default() },
            neck_channels: 16,
            ..ModelConfig::default()
        }
    }

    /// Smallest end-to-end configuration; the gradient checker's default.
    pub fn micro(num_class: usize) -> Self {
        ModelConfig {
            image_size: 32,
            sr_factor: 2,
            num_class,
            backbone: BackboneConfig { stem: [2, 3], taps: [4, 5, 6] },
            encoder: EncoderConfig {
                token_channels: 8,
                heads: 2,
                layers: 1,
                ff_expansion: 2,
                dropout: 0.0,
            },
            tokenizer: Tokenizer { buckets: 64, ..Tokenizer::default() },
            neck_channels: 4,
            ..ModelConfig::default()
        }
    }

    /// Network input side in super-resolved pixels.
    pub fn sr_size(&self) -> usize {
        self.image_size * self.sr_factor
    }

    /// Grid sides per scale, coarsest first.
    pub fn grids(&self) -> [usize; 3] {
        let s = self.sr_size();
        [s / 32, s / 16, s / 8]
    }

    /// Pyramid pooling kernels: the full-scale sizes when the coarsest grid
    /// can carry them, reduced sizes otherwise.
    pub fn spp_kernels(&self) -> [usize; 3] {
        if self.grids()[0] >= 13 {
            [5, 9, 13]
        } else {
            [3, 5, 7]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.sr_factor == 0 {
            return Err(Error::Build("image_size and sr_factor must be >= 1".to_string()));
        }
        if self.sr_size() % 32 != 0 {
            return Err(Error::Build(format!(
                "super-resolved side {} must be divisible by 32",
                self.sr_size()
            )));
        }
        if self.num_class == 0 {
            return Err(Error::Build("num_class must be >= 1".to_string()));
        }
        self.encoder.validate()?;
        for (name, v) in [("conf_thresh", self.conf_thresh), ("nms_thresh", self.nms_thresh)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Build(format!("{} {} outside [0, 1]", name, v)));
            }
        }
        if self.tokenizer.buckets == 0 || self.tokenizer.sent_maxlen == 0 {
            return Err(Error::Build("tokenizer buckets and sent_maxlen must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// One training or evaluation example in original pixel space.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub text: Option<String>,
    pub gts: Vec<GroundTruth>,
}

/// Loss of one batch plus the fused sequence lengths seen per sample.
pub struct BatchLoss {
    pub loss: LossVars,
    pub seq_lens: Vec<usize>,
}

pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    bridge: Bridge,
    embed: EmbeddingTable,
    embed_weights: Tensor,
    fusion: Fusion,
    detect: Detect,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init::derive_seed(seed, "model-init", 0));
        let backbone = Backbone::new(&mut rng, "backbone", &cfg.backbone)?;
        let grids = cfg.grids();
        let taps = cfg.backbone.taps;
        let deep_first = [taps[2], taps[1], taps[0]];
        let t = cfg.encoder.token_channels;
        let spec = BridgeSpec::build(grids, deep_first, t)?;
        let bridge = Bridge::new(&mut rng, "bridge", spec);
        let embed = EmbeddingTable::new("embed.table", cfg.tokenizer.buckets, t);
        let embed_weights = init::uniform(vec![cfg.tokenizer.buckets, t], 0.1, &mut rng);
        let fusion = Fusion::new(
            &mut rng,
            "fusion",
            cfg.encoder.clone(),
            cfg.duplicate_text,
            cfg.learned_positions,
            cfg.tokenizer.sent_maxlen,
        )?;
        let s = cfg.sr_size();
        let detect_cfg = DetectConfig {
            num_class: cfg.num_class,
            neck_channels: cfg.neck_channels,
            spp_kernels: cfg.spp_kernels(),
            anchors: cfg.anchors.clone().unwrap_or_else(|| AnchorSet::defaults(s, s)),
            image_w: s,
            image_h: s,
            objectness_in_loss: cfg.objectness_in_loss,
        };
        let detect = Detect::new(&mut rng, "detect", detect_cfg, deep_first)?;
        Ok(Model { cfg, backbone, bridge, embed, embed_weights, fusion, detect })
    }

    /// Runs one sample up to the raw prediction volumes. Returns the volumes
    /// and the fused sequence length.
    fn run_streams(
        &self,
        tape: &mut Tape,
        sample: &Sample,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<([Var; 3], usize)> {
        let s = self.cfg.image_size;
        if sample.image.shape() != [3, s, s] {
            return Err(Error::Build(format!(
                "sample image must be [3, {}, {}], got {:?}",
                s,
                s,
                sample.image.shape()
            )));
        }
        let f = self.cfg.sr_factor;
        let lr_input = srproxy::upscale(&sample.image, f, &UpscaleMethod::Nearest)?;
        let sr_method = if self.cfg.sr_enabled { self.cfg.sr_method.clone() } else { UpscaleMethod::Nearest };
        let sr_input = srproxy::upscale(&sample.image, f, &sr_method)?;

        let lr_var = tape.constant(&lr_input);
        let sr_var = tape.constant(&sr_input);
        let lr_pyramid = self.backbone.forward(tape, lr_var)?;
        let sr_pyramid = self.backbone.forward(tape, sr_var)?;
        let lr_blocks = self.bridge.tic_forward(tape, &lr_pyramid)?;
        let sr_blocks = self.bridge.tic_forward(tape, &sr_pyramid)?;

        let text_var = match (&sample.text, self.cfg.text_enabled) {
            (Some(text), true) => {
                let ids = self.cfg.tokenizer.encode(text)?;
                Some(self.embed.embed(tape, &self.embed_weights, &ids)?)
            }
            _ => None,
        };

        let (fused, layout) =
            self.fusion.itf_forward(tape, text_var, &lr_blocks, &sr_blocks, dropout_rng)?;
        let restored = self.bridge.itc_forward(tape, &fused)?;
        let raws = self.detect.forward(tape, &restored)?;
        Ok((raws, layout.len))
    }

    /// Mean loss over a batch. Pass a seeded rng to enable dropout.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        samples: &[Sample],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BatchLoss> {
        if samples.is_empty() {
            return Err(Error::Build("batch must contain at least one sample".to_string()));
        }
        let grids = self.cfg.grids().map(|g| (g, g));
        let f = self.cfg.sr_factor as f64;
        let mut seq_lens = Vec::with_capacity(samples.len());
        let mut total: Option<LossVars> = None;
        for sample in samples {
            let (raws, seq_len) = self.run_streams(tape, sample, dropout_rng.as_deref_mut())?;
            seq_lens.push(seq_len);
            let gts_sr: Vec<GroundTruth> = sample.gts.iter().map(|g| g.scaled(f)).collect();
            let assignments = self.detect.assign(&gts_sr, &grids)?;
            let loss = self.detect.loss(tape, &raws, &gts_sr, &assignments)?;
            total = Some(match total {
                None => loss,
                Some(acc) => LossVars {
                    l_pti: tape.add(acc.l_pti, loss.l_pti)?,
                    l_b: tape.add(acc.l_b, loss.l_b)?,
                    l_o: tape.add(acc.l_o, loss.l_o)?,
                },
            });
        }
        let acc = total.expect("batch is non-empty");
        let inv = 1.0 / samples.len() as f64;
        let loss = LossVars {
            l_pti: tape.scale(acc.l_pti, inv)?,
            l_b: tape.scale(acc.l_b, inv)?,
            l_o: tape.scale(acc.l_o, inv)?,
        };
        Ok(BatchLoss { loss, seq_lens })
    }

    /// Full inference for one sample: decode at the configured confidence
    /// threshold, suppress, and map boxes back to original pixels.
    pub fn forward_detections(&self, sample: &Sample) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let (raws, _) = self.run_streams(&mut tape, sample, None)?;
        let dets = self.detect.decode(&tape, &raws, self.cfg.conf_thresh)?;
        let kept = crate::detect::nms(&dets, self.cfg.nms_thresh);
        let inv = 1.0 / self.cfg.sr_factor as f64;
        Ok(kept
            .into_iter()
            .map(|d| Detection {
                x1: d.x1 * inv,
                y1: d.y1 * inv,
                x2: d.x2 * inv,
                y2: d.y2 * inv,
                ..d
            })
            .collect())
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(f);
        self.bridge.visit(f);
        f(&self.embed.name, &self.embed_weights);
        self.fusion.visit(f);
        self.detect.visit(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(f);
        self.bridge.visit_mut(f);
        f(&self.embed.name, &mut self.embed_weights);
        self.fusion.visit_mut(f);
        self.detect.visit_mut(f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy_sample(fill: f64) -> Sample {
        Sample {
            image: Tensor::full(vec![3, 64, 64], fill).unwrap(),
            text: Some("two beetles on a leaf".to_string()),
            gts: vec![GroundTruth { class_id: 0, x1: 10.0, y1: 12.0, x2: 30.0, y2: 33.0 }],
        }
    }

    #[test]
    fn config_validation_catches_bad_geometry() {
        let mut cfg = ModelConfig::toy(3);
        cfg.image_size = 50;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy(3);
        cfg.encoder.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_config_matches_full_scale_geometry() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.sr_size(), 608);
        assert_eq!(cfg.grids(), [19, 38, 76]);
        assert_eq!(cfg.spp_kernels(), [5, 9, 13]);
    }

    #[test]
    fn toy_config_shrinks_the_pooling_kernels() {
        let cfg = ModelConfig::toy(3);
        assert_eq!(cfg.grids(), [4, 8, 16]);
        assert_eq!(cfg.spp_kernels(), [3, 5, 7]);
    }

    #[test]
    fn parameter_names_are_unique() {
        let model = Model::new(ModelConfig::micro(2), 7).unwrap();
        let mut names = HashSet::new();
        let mut dup = None;
        model.visit_params(&mut |n, _| {
            if !names.insert(n.to_string()) {
                dup = Some(n.to_string());
            }
        });
        assert_eq!(dup, None);
        assert!(names.len() > 40);
    }

    #[test]
    fn forward_loss_is_finite_and_additive() {
        let model = Model::new(ModelConfig::micro(2), 7).unwrap();
        let mut tape = Tape::new();
        let sample = Sample {
            image: Tensor::full(vec![3, 32, 32], 0.3).unwrap(),
            text: Some("a weevil".to_string()),
            gts: vec![GroundTruth { class_id: 1, x1: 4.0, y1: 5.0, x2: 20.0, y2: 22.0 }],
        };
        let batch = model.forward_loss(&mut tape, &[sample], None).unwrap();
        let pti = tape.data(batch.loss.l_pti)[0];
        let b = tape.data(batch.loss.l_b)[0];
        let o = tape.data(batch.loss.l_o)[0];
        assert!(pti.is_finite() && b >= 0.0 && o >= 0.0);
        assert!((pti - (b + o)).abs() < 1e-12);
        // 2 text tokens + 150 visual tokens.
        assert_eq!(batch.seq_lens, vec![152]);
    }

    #[test]
    fn text_ablation_shortens_the_sequence() {
        let mut cfg = ModelConfig::micro(2);
        cfg.text_enabled = false;
        let model = Model::new(cfg, 7).unwrap();
        let mut tape = Tape::new();
        let sample = Sample {
            image: Tensor::full(vec![3, 32, 32], 0.3).unwrap(),
            text: Some("a weevil".to_string()),
            gts: vec![],
        };
        let batch = model.forward_loss(&mut tape, &[sample], None).unwrap();
        assert_eq!(batch.seq_lens, vec![150]);
    }

    #[test]
    fn detections_come_back_in_original_pixel_space() {
        let model = Model::new(ModelConfig::micro(2), 7).unwrap();
        let sample = Sample {
            image: Tensor::full(vec![3, 32, 32], 0.4).unwrap(),
            text: None,
            gts: vec![],
        };
        // Threshold 0 keeps everything; all boxes must fit the original.
        let mut model = model;
        model.cfg.conf_thresh = 0.0;
        let dets = model.forward_detections(&sample).unwrap();
        assert!(!dets.is_empty());
        for d in &dets {
            assert!(d.x1 >= 0.0 && d.x2 <= 32.0 && d.y1 >= 0.0 && d.y2 <= 32.0);
            assert!(d.x1 < d.x2 && d.y1 < d.y2);
        }
    }

    #[test]
    fn batches_average_the_per_sample_losses() {
        let model = Model::new(ModelConfig::toy(3), 7).unwrap();
        let (a, b) = (toy_sample(0.2), toy_sample(0.8));
        let mut tape = Tape::new();
        let la = model.forward_loss(&mut tape, &[a.clone()], None).unwrap();
        let lb = model.forward_loss(&mut tape, &[b.clone()], None).unwrap();
        let mut tape2 = Tape::new();
        let lab = model.forward_loss(&mut tape2, &[a, b], None).unwrap();
        let mean = (tape.data(la.loss.l_pti)[0] + tape.data(lb.loss.l_pti)[0]) / 2.0;
        assert!((tape2.data(lab.loss.l_pti)[0] - mean).abs() < 1e-12);
    }
}

//! Detection tail: spatial pyramid pooling, a light path-aggregation neck,
//! per-scale anchor heads, box encode/decode, NMS and the composite loss.
//!
//! Scale order is deepest first throughout this module: index 0 is the
//! coarsest grid (stride 32) and carries the largest anchors.

use numcore::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ConvLayer;
use crate::error::{Error, Result};

/// Anchors per scale.
pub const ANCHORS_PER_SCALE: usize = 3;
/// Fields per anchor before the class logits: tx, ty, tw, th, objectness.
const BOX_FIELDS: usize = 5;

/// Initial objectness bias, sigmoid(-4) being roughly a 2% prior.
const OBJ_BIAS_PRIOR: f64 = -4.0;

/// One decoded box in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub confidence: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Detection {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Serialization line: `class_id confidence x1 y1 x2 y2`.
    pub fn line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.class_id, self.confidence, self.x1, self.y1, self.x2, self.y2
        )
    }
}

/// One labeled box in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl GroundTruth {
    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn size(&self) -> (f64, f64) {
        (self.x2 - self.x1, self.y2 - self.y1)
    }

    pub fn scaled(&self, factor: f64) -> GroundTruth {
        GroundTruth {
            class_id: self.class_id,
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }
}

/// Per-scale anchor dimensions in pixels, coarsest scale first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    scales: [[(f64, f64); ANCHORS_PER_SCALE]; 3],
}

impl AnchorSet {
    /// Validates that anchors ascend in area from the finest scale to the
    /// coarsest, so larger anchors always sit on coarser grids.
    pub fn new(scales: [[(f64, f64); ANCHORS_PER_SCALE]; 3]) -> Result<Self> {
        let mut fine_to_coarse = Vec::with_capacity(9);
        for scale in scales.iter().rev() {
            for &(w, h) in scale {
                if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
                    return Err(Error::Build(format!("anchor ({}, {}) must be positive", w, h)));
                }
                fine_to_coarse.push(w * h);
            }
        }
        if fine_to_coarse.windows(2).any(|p| p[0] > p[1]) {
            return Err(Error::Build(
                "anchor areas must ascend from the finest scale to the coarsest".to_string(),
            ));
        }
        Ok(AnchorSet { scales })
    }

    /// Default anchors: base fractions 0.4 / 0.25 / 0.1 of the image dims
    /// per scale (coarsest first), each with 0.8x / 1x / 1.25x variants.
    pub fn defaults(image_w: usize, image_h: usize) -> Self {
        let fractions = [0.4, 0.25, 0.1];
        let variants = [0.8, 1.0, 1.25];
        let scales = fractions.map(|f| {
            variants.map(|v| (f * v * image_w as f64, f * v * image_h as f64))
        });
        AnchorSet { scales }
    }

    pub fn get(&self, scale: usize, anchor: usize) -> (f64, f64) {
        self.scales[scale][anchor]
    }

    pub fn scales(&self) -> &[[(f64, f64); ANCHORS_PER_SCALE]; 3] {
        &self.scales
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub num_class: usize,
    pub neck_channels: usize,
    /// Pool sizes for the pyramid pooling block; all odd, ascending.
    pub spp_kernels: [usize; 3],
    pub anchors: AnchorSet,
    /// Pixel dims of the network input (the super-resolved space).
    pub image_w: usize,
    pub image_h: usize,
    /// When false, the loss omits the objectness term and scores only the
    /// class probabilities at assigned anchors.
    pub objectness_in_loss: bool,
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_class == 0 || self.neck_channels == 0 {
            return Err(Error::Build("num_class and neck_channels must be >= 1".to_string()));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::Build("image dims must be >= 1".to_string()));
        }
        if self.spp_kernels.iter().any(|&k| k % 2 == 0) || self.spp_kernels.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Build(format!(
                "spp kernels {:?} must be odd and ascending",
                self.spp_kernels
            )));
        }
        Ok(())
    }
}

/// Where one ground-truth box lives in the prediction volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetAssignment {
    pub gt_index: usize,
    pub scale: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub anchor: usize,
}

/// The three loss scalars; `l_pti` is the training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_pti: Var,
    pub l_b: Var,
    pub l_o: Var,
}

pub struct Detect {
    pub cfg: DetectConfig,
    reduce: [ConvLayer; 3],
    top_down: [ConvLayer; 2],
    down: [ConvLayer; 2],
    bottom_up: [ConvLayer; 2],
    heads: [ConvLayer; 3],
}

impl Detect {
    /// `in_channels` are the per-scale feature widths, coarsest first.
    pub fn new(rng: &mut ChaCha8Rng, prefix: &str, cfg: DetectConfig, in_channels: [usize; 3]) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.neck_channels;
        let depth = ANCHORS_PER_SCALE * (BOX_FIELDS + cfg.num_class);
        let reduce = [
            // The coarsest scale passes through SPP first, quadrupling its
            // channels before the 1x1 reduction.
            ConvLayer::new(rng, &format!("{}.reduce0", prefix), in_channels[0] * 4, n, 1, 1, 0, true),
            ConvLayer::new(rng, &format!("{}.reduce1", prefix), in_channels[1], n, 1, 1, 0, true),
            ConvLayer::new(rng, &format!("{}.reduce2", prefix), in_channels[2], n, 1, 1, 0, true),
        ];
        let top_down = [
            ConvLayer::new(rng, &format!("{}.td1", prefix), 2 * n, n, 3, 1, 1, true),
            ConvLayer::new(rng, &format!("{}.td2", prefix), 2 * n, n, 3, 1, 1, true),
        ];
        let down = [
            ConvLayer::new(rng, &format!("{}.down1", prefix), n, n, 3, 2, 1, true),
            ConvLayer::new(rng, &format!("{}.down0", prefix), n, n, 3, 2, 1, true),
        ];
        let bottom_up = [
            ConvLayer::new(rng, &format!("{}.bu1", prefix), 2 * n, n, 3, 1, 1, true),
            ConvLayer::new(rng, &format!("{}.bu0", prefix), 2 * n, n, 3, 1, 1, true),
        ];
        let mut heads = [
            ConvLayer::new(rng, &format!("{}.head0", prefix), n, depth, 1, 1, 0, false),
            ConvLayer::new(rng, &format!("{}.head1", prefix), n, depth, 1, 1, 0, false),
            ConvLayer::new(rng, &format!("{}.head2", prefix), n, depth, 1, 1, 0, false),
        ];
        // Objectness biases start strongly negative so the untrained model
        // stays quiet everywhere; the loss then only has to lift the few
        // assigned cells instead of first suppressing every background cell.
        for head in &mut heads {
            head.visit_mut(&mut |name, t| {
                if name.ends_with(".b") {
                    for a in 0..ANCHORS_PER_SCALE {
                        t.data_mut()[a * (BOX_FIELDS + cfg.num_class) + 4] = OBJ_BIAS_PRIOR;
                    }
                }
            });
        }
        Ok(Detect { cfg, reduce, top_down, down, bottom_up, heads })
    }

    /// Identity plus three stride-1 max pools, concatenated along channels.
    pub fn spp(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut parts = vec![x];
        for &k in &self.cfg.spp_kernels {
            parts.push(tape.maxpool2d_padded(x, k, 1, (k - 1) / 2)?);
        }
        Ok(tape.concat(&parts, 0)?)
    }

    /// Neck and heads over the three restored scales (coarsest first).
    /// Returns the raw prediction volumes, one per scale.
    pub fn forward(&self, tape: &mut Tape, features: &[Var; 3]) -> Result<[Var; 3]> {
        for w in 0..2 {
            let (sa, sb) = (tape.shape(features[w]).to_vec(), tape.shape(features[w + 1]).to_vec());
            if sb[1] != sa[1] * 2 || sb[2] != sa[2] * 2 {
                return Err(Error::Build(format!(
                    "scale {} dims {:?} must double scale {} dims {:?}",
                    w + 1,
                    &sb[1..],
                    w,
                    &sa[1..]
                )));
            }
        }
        let pooled = self.spp(tape, features[0])?;
        let t0 = self.reduce[0].forward(tape, pooled)?;
        let r1 = self.reduce[1].forward(tape, features[1])?;
        let r2 = self.reduce[2].forward(tape, features[2])?;

        let u1 = tape.upsample_nearest(t0, 2)?;
        let c1 = tape.concat(&[u1, r1], 0)?;
        let t1 = self.top_down[0].forward(tape, c1)?;

        let u2 = tape.upsample_nearest(t1, 2)?;
        let c2 = tape.concat(&[u2, r2], 0)?;
        let t2 = self.top_down[1].forward(tape, c2)?;

        let d1 = self.down[0].forward(tape, t2)?;
        let m1 = tape.concat(&[d1, t1], 0)?;
        let o1 = self.bottom_up[0].forward(tape, m1)?;

        let d0 = self.down[1].forward(tape, o1)?;
        let m0 = tape.concat(&[d0, t0], 0)?;
        let o0 = self.bottom_up[1].forward(tape, m0)?;

        Ok([
            self.heads[0].forward(tape, o0)?,
            self.heads[1].forward(tape, o1)?,
            self.heads[2].forward(tape, t2)?,
        ])
    }

    /// Assigns each ground truth to the (scale, anchor) with the highest
    /// shape IoU (ties to the lowest index) and the grid cell holding its
    /// center. A later box landing on an occupied slot is skipped.
    pub fn assign(&self, gts: &[GroundTruth], grids: &[(usize, usize); 3]) -> Result<Vec<TargetAssignment>> {
        let (iw, ih) = (self.cfg.image_w as f64, self.cfg.image_h as f64);
        let mut taken = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(gts.len());
        for (gt_index, gt) in gts.iter().enumerate() {
            if gt.class_id >= self.cfg.num_class {
                return Err(Error::Build(format!(
                    "ground truth {}: class {} out of range",
                    gt_index, gt.class_id
                )));
            }
            if !(gt.x1 >= 0.0 && gt.x1 < gt.x2 && gt.x2 <= iw && gt.y1 >= 0.0 && gt.y1 < gt.y2 && gt.y2 <= ih) {
                return Err(Error::Build(format!(
                    "ground truth {}: box ({}, {}, {}, {}) outside {}x{}",
                    gt_index, gt.x1, gt.y1, gt.x2, gt.y2, iw, ih
                )));
            }
            let (bw, bh) = gt.size();
            let mut best = (0usize, 0usize);
            let mut best_iou = -1.0;
            for scale in 0..3 {
                for anchor in 0..ANCHORS_PER_SCALE {
                    let (aw, ah) = self.cfg.anchors.get(scale, anchor);
                    let iou = shape_iou(bw, bh, aw, ah);
                    if iou > best_iou {
                        best_iou = iou;
                        best = (scale, anchor);
                    }
                }
            }
            let (scale, anchor) = best;
            let (gy, gx) = grids[scale];
            let (cx, cy) = gt.center();
            let cell_x = ((cx / (iw / gx as f64)) as usize).min(gx - 1);
            let cell_y = ((cy / (ih / gy as f64)) as usize).min(gy - 1);
            if taken.insert((scale, cell_y, cell_x, anchor)) {
                out.push(TargetAssignment { gt_index, scale, cell_x, cell_y, anchor });
            }
        }
        Ok(out)
    }

    /// Composite loss over the raw prediction volumes.
    ///
    /// The box term is the MSE of (sigmoid-offset x, y) and (log-ratio w, h)
    /// at assigned anchors. The class term is BCE of softmax class
    /// probabilities against one-hot labels there. When enabled, objectness
    /// BCE runs over every anchor, negatives down-weighted to 0.5.
    pub fn loss(
        &self,
        tape: &mut Tape,
        raws: &[Var; 3],
        gts: &[GroundTruth],
        assignments: &[TargetAssignment],
    ) -> Result<LossVars> {
        let nc = self.cfg.num_class;
        let grids = self.grids_of(tape, raws)?;
        let (iw, ih) = (self.cfg.image_w as f64, self.cfg.image_h as f64);

        let mut xy_parts = Vec::new();
        let mut wh_parts = Vec::new();
        let mut cls_parts = Vec::new();
        let mut xy_targets = Vec::new();
        let mut wh_targets = Vec::new();
        let mut cls_targets = Vec::new();
        let mut assigned_total = 0;

        for scale in 0..3 {
            let (gy, gx) = grids[scale];
            let (stride_x, stride_y) = (iw / gx as f64, ih / gy as f64);
            let mut xy_idx = Vec::new();
            let mut wh_idx = Vec::new();
            let mut cls_idx = Vec::new();
            for a in assignments.iter().filter(|a| a.scale == scale) {
                let gt = &gts[a.gt_index];
                let (aw, ah) = self.cfg.anchors.get(a.scale, a.anchor);
                let (cx, cy) = gt.center();
                let (bw, bh) = gt.size();
                let (ox, oy, lw, lh) =
                    encode_box(cx, cy, bw, bh, stride_x, stride_y, a.cell_x, a.cell_y, (aw, ah));
                xy_idx.push(flat_index(a.anchor, 0, a.cell_y, a.cell_x, nc, gy, gx));
                xy_idx.push(flat_index(a.anchor, 1, a.cell_y, a.cell_x, nc, gy, gx));
                xy_targets.extend([ox, oy]);
                wh_idx.push(flat_index(a.anchor, 2, a.cell_y, a.cell_x, nc, gy, gx));
                wh_idx.push(flat_index(a.anchor, 3, a.cell_y, a.cell_x, nc, gy, gx));
                wh_targets.extend([lw, lh]);
                for c in 0..nc {
                    cls_idx.push(flat_index(a.anchor, BOX_FIELDS + c, a.cell_y, a.cell_x, nc, gy, gx));
                    cls_targets.push(if c == gt.class_id { 1.0 } else { 0.0 });
                }
                assigned_total += 1;
            }
            if !xy_idx.is_empty() {
                let xy = tape.gather(raws[scale], xy_idx)?;
                xy_parts.push(tape.sigmoid(xy)?);
                wh_parts.push(tape.gather(raws[scale], wh_idx)?);
                cls_parts.push(tape.gather(raws[scale], cls_idx)?);
            }
        }

        let l_b = if assigned_total == 0 {
            tape.scalar(0.0)
        } else {
            let xy = tape.concat(&xy_parts, 0)?;
            let wh = tape.concat(&wh_parts, 0)?;
            let box_pred = tape.concat(&[xy, wh], 0)?;
            let mut box_targets = xy_targets;
            box_targets.extend(wh_targets);
            tape.mse_vs(box_pred, box_targets, None)?
        };

        let class_term = if assigned_total == 0 {
            None
        } else {
            let flat = tape.concat(&cls_parts, 0)?;
            let rows = tape.reshape(flat, vec![assigned_total, nc])?;
            let probs = tape.softmax(rows, 1)?;
            Some(tape.bce_probs_vs(probs, cls_targets, None)?)
        };

        let obj_term = if self.cfg.objectness_in_loss {
            let mut parts = Vec::with_capacity(3);
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            for scale in 0..3 {
                let (gy, gx) = grids[scale];
                let mut idx = Vec::with_capacity(ANCHORS_PER_SCALE * gy * gx);
                for anchor in 0..ANCHORS_PER_SCALE {
                    for y in 0..gy {
                        for x in 0..gx {
                            idx.push(flat_index(anchor, 4, y, x, nc, gy, gx));
                            let positive = assignments.iter().any(|a| {
                                a.scale == scale && a.anchor == anchor && a.cell_y == y && a.cell_x == x
                            });
                            targets.push(if positive { 1.0 } else { 0.0 });
                            weights.push(if positive { 1.0 } else { 0.5 });
                        }
                    }
                }
                parts.push(tape.gather(raws[scale], idx)?);
            }
            let all = tape.concat(&parts, 0)?;
            Some(tape.bce_logits_vs(all, targets, Some(weights))?)
        } else {
            None
        };

        let l_o = match (class_term, obj_term) {
            (Some(c), Some(o)) => tape.add(c, o)?,
            (Some(c), None) => c,
            (None, Some(o)) => o,
            (None, None) => tape.scalar(0.0),
        };
        let l_pti = tape.add(l_b, l_o)?;
        Ok(LossVars { l_pti, l_b, l_o })
    }

    /// Reads boxes out of the raw volumes. Confidence is objectness times
    /// the best softmax class probability; boxes are clamped to the image
    /// and degenerate ones dropped.
    pub fn decode(&self, tape: &Tape, raws: &[Var; 3], conf_thresh: f64) -> Result<Vec<Detection>> {
        let nc = self.cfg.num_class;
        let grids = self.grids_of(tape, raws)?;
        let (iw, ih) = (self.cfg.image_w as f64, self.cfg.image_h as f64);
        let mut out = Vec::new();
        for scale in 0..3 {
            let data = tape.data(raws[scale]);
            let (gy, gx) = grids[scale];
            let (stride_x, stride_y) = (iw / gx as f64, ih / gy as f64);
            for anchor in 0..ANCHORS_PER_SCALE {
                let (aw, ah) = self.cfg.anchors.get(scale, anchor);
                for y in 0..gy {
                    for x in 0..gx {
                        let f = |field: usize| data[flat_index(anchor, field, y, x, nc, gy, gx)];
                        let obj = sigmoid(f(4));
                        let logits: Vec<f64> = (0..nc).map(|c| f(BOX_FIELDS + c)).collect();
                        let (class_id, prob) = max_softmax(&logits);
                        let confidence = obj * prob;
                        if confidence < conf_thresh {
                            continue;
                        }
                        let (bx, by, bw, bh) = decode_box(
                            f(0),
                            f(1),
                            f(2),
                            f(3),
                            x,
                            y,
                            stride_x,
                            stride_y,
                            (aw, ah),
                        );
                        let x1 = (bx - bw / 2.0).clamp(0.0, iw);
                        let y1 = (by - bh / 2.0).clamp(0.0, ih);
                        let x2 = (bx + bw / 2.0).clamp(0.0, iw);
                        let y2 = (by + bh / 2.0).clamp(0.0, ih);
                        if x1 < x2 && y1 < y2 {
                            out.push(Detection { class_id, confidence, x1, y1, x2, y2 });
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn grids_of(&self, tape: &Tape, raws: &[Var; 3]) -> Result<[(usize, usize); 3]> {
        let depth = ANCHORS_PER_SCALE * (BOX_FIELDS + self.cfg.num_class);
        let mut grids = [(0, 0); 3];
        for (i, &raw) in raws.iter().enumerate() {
            let s = tape.shape(raw);
            if s.len() != 3 || s[0] != depth {
                return Err(Error::Build(format!(
                    "scale {} raw volume must be [{}, S, S], got {:?}",
                    i, depth, s
                )));
            }
            grids[i] = (s[1], s[2]);
        }
        Ok(grids)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for layer in self.layer_iter() {
            layer.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for layer in self.layer_iter_mut() {
            layer.visit_mut(f);
        }
    }

    fn layer_iter(&self) -> impl Iterator<Item = &ConvLayer> {
        self.reduce
            .iter()
            .chain(&self.top_down)
            .chain(&self.down)
            .chain(&self.bottom_up)
            .chain(&self.heads)
    }

    fn layer_iter_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.reduce
            .iter_mut()
            .chain(self.top_down.iter_mut())
            .chain(self.down.iter_mut())
            .chain(self.bottom_up.iter_mut())
            .chain(self.heads.iter_mut())
    }
}

/// Flat offset of (anchor, field, y, x) inside a raw `[A*(5+nc), gy, gx]`
/// volume.
fn flat_index(anchor: usize, field: usize, y: usize, x: usize, nc: usize, gy: usize, gx: usize) -> usize {
    ((anchor * (BOX_FIELDS + nc) + field) * gy + y) * gx + x
}

/// IoU of two boxes sharing a common center, driven by shape alone.
fn shape_iou(w1: f64, h1: f64, w2: f64, h2: f64) -> f64 {
    let inter = w1.min(w2) * h1.min(h2);
    inter / (w1 * h1 + w2 * h2 - inter)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn max_softmax(logits: &[f64]) -> (usize, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    (best, (logits[best] - max).exp() / total)
}

/// Maps a box (center, size in pixels) to regression targets: cell offsets
/// in [0, 1] and log size ratios against the anchor.
#[allow(clippy::too_many_arguments)]
pub fn encode_box(
    cx: f64,
    cy: f64,
    bw: f64,
    bh: f64,
    stride_x: f64,
    stride_y: f64,
    cell_x: usize,
    cell_y: usize,
    anchor: (f64, f64),
) -> (f64, f64, f64, f64) {
    (
        cx / stride_x - cell_x as f64,
        cy / stride_y - cell_y as f64,
        (bw / anchor.0).ln(),
        (bh / anchor.1).ln(),
    )
}

/// Inverse of [`encode_box`] starting from raw predictions: applies the
/// sigmoid to the center offsets and the exponential to the size ratios.
#[allow(clippy::too_many_arguments)]
pub fn decode_box(
    tx: f64,
    ty: f64,
    tw: f64,
    th: f64,
    cell_x: usize,
    cell_y: usize,
    stride_x: f64,
    stride_y: f64,
    anchor: (f64, f64),
) -> (f64, f64, f64, f64) {
    (
        (sigmoid(tx) + cell_x as f64) * stride_x,
        (sigmoid(ty) + cell_y as f64) * stride_y,
        anchor.0 * tw.exp(),
        anchor.1 * th.exp(),
    )
}

/// Pixel IoU of two corner-form boxes.
pub fn box_iou(a: &Detection, b: &Detection) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-class greedy suppression: boxes ordered by descending confidence
/// (ties by larger area, then smaller x1), each survivor suppressing
/// same-class boxes with IoU strictly above the threshold. The result keeps
/// that global order.
pub fn nms(dets: &[Detection], nms_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&dets[i], &dets[j]);
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(b.area().partial_cmp(&a.area()).unwrap())
            .then(a.x1.partial_cmp(&b.x1).unwrap())
            .then(a.class_id.cmp(&b.class_id))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&j| {
            dets[j].class_id == dets[i].class_id && box_iou(&dets[j], &dets[i]) > nms_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

//! Dataset-level evaluation report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ap::average_precision;
use crate::boxes::{Det, Gt};
use crate::matching::match_greedy;
use crate::{Error, Result};

/// IoU thresholds behind the headline mAP figure.
pub const MAP_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Precision/recall/F1 at IoU 0.5 over detections at or above the
    /// confidence cut.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// AP at IoU 0.5 per class present in the ground truth.
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Mean AP over IoU 0.50:0.05:0.95.
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "precision,recall,f1,map,map50,map75,true_positives,false_positives,false_negatives"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.precision,
            self.recall,
            self.f1,
            self.map,
            self.map50,
            self.map75,
            self.true_positives,
            self.false_positives,
            self.false_negatives
        )
    }
}

fn mean_ap_at(
    dets: &[Vec<Det>],
    gts: &[Vec<Gt>],
    classes: &BTreeSet<usize>,
    iou_thresh: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for &class_id in classes {
        total += average_precision(dets, gts, class_id, iou_thresh)?
            .expect("classes drawn from the ground truth always score");
    }
    Ok(total / classes.len() as f64)
}

/// Evaluates detections against ground truth, image by image.
/// Precision, recall, and F1 use IoU 0.5 and keep only detections with
/// confidence at or above `conf_thresh`; the AP family uses every
/// detection. Classes that never occur in the ground truth are excluded
/// from the per-class means.
pub fn evaluate(
    dets_per_image: &[Vec<Det>],
    gts_per_image: &[Vec<Gt>],
    num_class: usize,
    conf_thresh: f64,
) -> Result<EvalReport> {
    if dets_per_image.len() != gts_per_image.len() {
        return Err(Error::ImageCountMismatch {
            dets: dets_per_image.len(),
            gts: gts_per_image.len(),
        });
    }
    let mut total_gts = 0usize;
    for gts in gts_per_image {
        for g in gts {
            if g.class_id >= num_class {
                return Err(Error::ClassOutOfRange { class_id: g.class_id, num_class });
            }
            if !(g.x2 > g.x1 && g.y2 > g.y1) {
                return Err(Error::DegenerateBox(g.corners()));
            }
            total_gts += 1;
        }
    }
    for dets in dets_per_image {
        for d in dets {
            if d.class_id >= num_class {
                return Err(Error::ClassOutOfRange { class_id: d.class_id, num_class });
            }
            if !(d.x2 > d.x1 && d.y2 > d.y1) {
                return Err(Error::DegenerateBox(d.corners()));
            }
        }
    }
    if total_gts == 0 {
        return Err(Error::EmptyGroundTruth);
    }

    let classes: BTreeSet<usize> = gts_per_image
        .iter()
        .flat_map(|gts| gts.iter().map(|g| g.class_id))
        .collect();

    let mut per_class_ap = BTreeMap::new();
    for &class_id in &classes {
        let ap = average_precision(dets_per_image, gts_per_image, class_id, 0.5)?
            .expect("class taken from the ground truth");
        per_class_ap.insert(class_id, ap);
    }
    let map50 = per_class_ap.values().sum::<f64>() / classes.len() as f64;
    let map75 = mean_ap_at(dets_per_image, gts_per_image, &classes, 0.75)?;
    let mut map = 0.0;
    for thresh in MAP_THRESHOLDS {
        map += mean_ap_at(dets_per_image, gts_per_image, &classes, thresh)?;
    }
    map /= MAP_THRESHOLDS.len() as f64;

    let (mut tp, mut fp, mut matched) = (0usize, 0usize, 0usize);
    for (dets, gts) in dets_per_image.iter().zip(gts_per_image) {
        let mut kept: Vec<Det> =
            dets.iter().filter(|d| d.confidence >= conf_thresh).copied().collect();
        kept.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        let (flags, gt_flags) = match_greedy(&kept, gts, 0.5)?;
        tp += flags.iter().filter(|f| **f).count();
        fp += flags.iter().filter(|f| !**f).count();
        matched += gt_flags.iter().filter(|f| **f).count();
    }
    let fn_count = total_gts - matched;
    // No detections at all leaves precision undefined; report 0.
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / total_gts as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };

    Ok(EvalReport {
        precision,
        recall,
        f1,
        per_class_ap,
        map,
        map50,
        map75,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_count,
    })
}

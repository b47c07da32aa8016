//! Average precision for one class over a set of images.

use crate::boxes::{Det, Gt};
use crate::matching::match_greedy;
use crate::{Error, Result};

/// AP for `class_id` at one IoU threshold, computed as the exact area
/// under the monotone envelope of the precision-recall curve (all-point
/// interpolation). Returns `None` when the class never appears in the
/// ground truth, so callers can exclude it from means instead of scoring
/// zero.
pub fn average_precision(
    dets_per_image: &[Vec<Det>],
    gts_per_image: &[Vec<Gt>],
    class_id: usize,
    iou_thresh: f64,
) -> Result<Option<f64>> {
    if dets_per_image.len() != gts_per_image.len() {
        return Err(Error::ImageCountMismatch {
            dets: dets_per_image.len(),
            gts: gts_per_image.len(),
        });
    }
    let npos: usize = gts_per_image
        .iter()
        .map(|gts| gts.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    if npos == 0 {
        return Ok(None);
    }

    // Match per image, then merge the flags into one confidence-ranked
    // list. Matching never crosses images, so per-image greedy order and
    // global greedy order agree.
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, dets) in dets_per_image.iter().enumerate() {
        let mut dets_c: Vec<Det> =
            dets.iter().filter(|d| d.class_id == class_id).copied().collect();
        dets_c.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        let gts_c: Vec<Gt> =
            gts_per_image[img].iter().filter(|g| g.class_id == class_id).copied().collect();
        let (tp, _) = match_greedy(&dets_c, &gts_c, iou_thresh)?;
        for (pos, (det, flag)) in dets_c.iter().zip(tp).enumerate() {
            ranked.push((det.confidence, img, pos, flag));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });

    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp_cum, mut fp_cum) = (0usize, 0usize);
    for &(_, _, _, flag) in &ranked {
        if flag {
            tp_cum += 1;
        } else {
            fp_cum += 1;
        }
        precision.push(tp_cum as f64 / (tp_cum + fp_cum) as f64);
        recall.push(tp_cum as f64 / npos as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(Some(ap))
}

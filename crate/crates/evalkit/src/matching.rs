//! Greedy detection-to-ground-truth matching.

use crate::boxes::{iou, Det, Gt};
use crate::Result;

/// Matches detections against ground truth within one image. `dets` must
/// already be sorted by descending confidence. Each detection takes the
/// unmatched same-class ground truth with the highest IoU, provided that
/// IoU reaches `iou_thresh`; ties go to the earlier ground-truth index.
/// Returns a true-positive flag per detection and a matched flag per
/// ground truth.
pub fn match_greedy(
    dets: &[Det],
    gts: &[Gt],
    iou_thresh: f64,
) -> Result<(Vec<bool>, Vec<bool>)> {
    assert!(
        dets.windows(2).all(|w| w[0].confidence >= w[1].confidence),
        "match_greedy needs confidence-sorted detections"
    );
    let mut tp = vec![false; dets.len()];
    let mut matched = vec![false; gts.len()];
    for (d_idx, det) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g_idx, gt) in gts.iter().enumerate() {
            if matched[g_idx] || gt.class_id != det.class_id {
                continue;
            }
            let overlap = iou(det.corners(), gt.corners())?;
            if overlap >= iou_thresh && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((g_idx, overlap));
            }
        }
        if let Some((g_idx, _)) = best {
            tp[d_idx] = true;
            matched[g_idx] = true;
        }
    }
    Ok((tp, matched))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, confidence: f64, x1: f64, x2: f64) -> Det {
        Det { class_id, confidence, x1, y1: 0.0, x2, y2: 10.0 }
    }

    fn gt(class_id: usize, x1: f64, x2: f64) -> Gt {
        Gt { class_id, x1, y1: 0.0, x2, y2: 10.0 }
    }

    #[test]
    fn overlap_above_threshold_is_a_true_positive() {
        // [0,10] vs [2,12]: intersection 8, union 12, IoU 2/3.
        let (tp, matched) =
            match_greedy(&[det(0, 0.9, 0.0, 10.0)], &[gt(0, 2.0, 12.0)], 0.5).unwrap();
        assert_eq!(tp, vec![true]);
        assert_eq!(matched, vec![true]);
    }

    #[test]
    fn one_gt_feeds_only_the_stronger_detection() {
        let dets = [det(0, 0.9, 0.0, 10.0), det(0, 0.8, 0.5, 10.5)];
        let (tp, matched) = match_greedy(&dets, &[gt(0, 0.0, 10.0)], 0.5).unwrap();
        assert_eq!(tp, vec![true, false]);
        assert_eq!(matched, vec![true]);
    }

    #[test]
    fn class_mismatch_never_matches() {
        let (tp, matched) =
            match_greedy(&[det(1, 0.9, 0.0, 10.0)], &[gt(0, 0.0, 10.0)], 0.1).unwrap();
        assert_eq!(tp, vec![false]);
        assert_eq!(matched, vec![false]);
    }

    #[test]
    fn detection_prefers_the_highest_iou_gt() {
        let gts = [gt(0, 4.0, 14.0), gt(0, 1.0, 11.0)];
        let (tp, matched) = match_greedy(&[det(0, 0.9, 0.0, 10.0)], &gts, 0.3).unwrap();
        assert_eq!(tp, vec![true]);
        assert_eq!(matched, vec![false, true]);
    }
}

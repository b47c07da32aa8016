//! Checkpoint evaluation: run inference over a split and score it.

use evalkit::{evaluate, Det, EvalReport, Gt};
use fusedet::detect::{Detection, GroundTruth};
use fusedet::model::{Model, Sample};

use crate::{CliError, Result};

pub fn to_eval_det(d: &Detection) -> Det {
    Det {
        class_id: d.class_id,
        confidence: d.confidence,
        x1: d.x1,
        y1: d.y1,
        x2: d.x2,
        y2: d.y2,
    }
}

pub fn to_eval_gt(g: &GroundTruth) -> Gt {
    Gt { class_id: g.class_id, x1: g.x1, y1: g.y1, x2: g.x2, y2: g.y2 }
}

/// Runs decode + NMS per sample at the model's configured thresholds and
/// scores the result. Fails when the dataset names classes the
/// checkpoint was not built for.
pub fn evaluate_model(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(CliError::Data("evaluation split is empty".to_string()));
    }
    let num_class = model.cfg.num_class;
    for s in samples {
        if let Some(bad) = s.gts.iter().find(|g| g.class_id >= num_class) {
            return Err(CliError::Data(format!(
                "ground-truth class {} exceeds the checkpoint's {} classes",
                bad.class_id, num_class
            )));
        }
    }
    let mut dets_per_image = Vec::with_capacity(samples.len());
    let mut gts_per_image = Vec::with_capacity(samples.len());
    for sample in samples {
        let dets = model.forward_detections(sample)?;
        dets_per_image.push(dets.iter().map(to_eval_det).collect::<Vec<_>>());
        gts_per_image.push(sample.gts.iter().map(to_eval_gt).collect::<Vec<_>>());
    }
    Ok(evaluate(&dets_per_image, &gts_per_image, num_class, model.cfg.conf_thresh)?)
}

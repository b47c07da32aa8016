//! Detector tail properties: suppression against an order-free reference,
//! head widths, gradient connectivity across the neck, and the box codec.

use fusedet::detect::{box_iou, decode_box, encode_box, nms, AnchorSet, Detect, DetectConfig, Detection};
use fusedet::init;
use numcore::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference suppression: repeatedly scan every remaining detection for the
/// highest-priority one, keep it, and drop same-class overlaps. No sorting,
/// no shared code with the production routine.
fn nms_reference(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let beats = |a: &Detection, b: &Detection| {
        if a.confidence != b.confidence {
            return a.confidence > b.confidence;
        }
        if a.area() != b.area() {
            return a.area() > b.area();
        }
        if a.x1 != b.x1 {
            return a.x1 < b.x1;
        }
        a.class_id < b.class_id
    };
    let mut alive: Vec<bool> = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| beats(&dets[i], &dets[b])) {
                best = Some(i);
            }
        }
        let Some(best) = best else { break };
        alive[best] = false;
        kept.push(dets[best].clone());
        for i in 0..dets.len() {
            if alive[i]
                && dets[i].class_id == dets[best].class_id
                && box_iou(&dets[best], &dets[i]) > thresh
            {
                alive[i] = false;
            }
        }
    }
    kept
}

#[test]
fn suppression_matches_the_reference_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..200 {
        let n = rng.gen_range(0..25);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let cx = rng.gen_range(5.0..95.0);
                let cy = rng.gen_range(5.0..95.0);
                let w = rng.gen_range(2.0..30.0);
                let h = rng.gen_range(2.0..30.0);
                Detection {
                    class_id: rng.gen_range(0..3),
                    // Quantized so confidence ties actually occur.
                    confidence: (rng.gen_range(0.0_f64..1.0) * 10.0).round() / 10.0,
                    x1: cx - w / 2.0,
                    y1: cy - h / 2.0,
                    x2: cx + w / 2.0,
                    y2: cy + h / 2.0,
                }
            })
            .collect();
        let thresh = rng.gen_range(0.1..0.7);
        let got = nms(&dets, thresh);
        let want = nms_reference(&dets, thresh);
        assert_eq!(got.len(), want.len(), "case {}", case);
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g, w, "case {}", case);
        }
    }
}

#[test]
fn head_width_scales_with_the_class_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DetectConfig {
        num_class: 102,
        neck_channels: 8,
        spp_kernels: [3, 5, 7],
        anchors: AnchorSet::defaults(256, 256),
        image_w: 256,
        image_h: 256,
        objectness_in_loss: true,
    };
    let det = Detect::new(&mut rng, "d", cfg, [10, 6, 4]).unwrap();
    let mut tape = Tape::new();
    let features = [
        tape.constant(&init::uniform(vec![10, 8, 8], 1.0, &mut rng)),
        tape.constant(&init::uniform(vec![6, 16, 16], 1.0, &mut rng)),
        tape.constant(&init::uniform(vec![4, 32, 32], 1.0, &mut rng)),
    ];
    let raws = det.forward(&mut tape, &features).unwrap();
    assert_eq!(tape.shape(raws[0]), [321, 8, 8]);
    assert_eq!(tape.shape(raws[1]), [321, 16, 16]);
    assert_eq!(tape.shape(raws[2]), [321, 32, 32]);
}

#[test]
fn every_output_scale_sees_every_input_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = DetectConfig {
        num_class: 2,
        neck_channels: 6,
        spp_kernels: [3, 5, 7],
        anchors: AnchorSet::defaults(128, 128),
        image_w: 128,
        image_h: 128,
        objectness_in_loss: true,
    };
    let det = Detect::new(&mut rng, "d", cfg, [8, 6, 4]).unwrap();
    for out_scale in 0..3 {
        let mut tape = Tape::new();
        let features = [
            tape.leaf(&init::uniform(vec![8, 4, 4], 1.0, &mut rng).with_requires_grad(true)),
            tape.leaf(&init::uniform(vec![6, 8, 8], 1.0, &mut rng).with_requires_grad(true)),
            tape.leaf(&init::uniform(vec![4, 16, 16], 1.0, &mut rng).with_requires_grad(true)),
        ];
        let raws = det.forward(&mut tape, &features).unwrap();
        let total = tape.sum(raws[out_scale]).unwrap();
        tape.backward(total).unwrap();
        for (in_scale, f) in features.iter().enumerate() {
            let g = tape.grad(*f).expect("input gradient exists");
            assert!(
                g.iter().any(|&v| v.abs() > 1e-10),
                "output scale {} is blind to input scale {}",
                out_scale,
                in_scale
            );
        }
    }
}

#[test]
fn box_codec_round_trips_random_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let stride = 16.0;
        let (gx, gy) = (8usize, 8usize);
        let cell_x = rng.gen_range(0..gx);
        let cell_y = rng.gen_range(0..gy);
        // Center strictly inside the chosen cell, off the cell border.
        let cx = (cell_x as f64 + rng.gen_range(0.05..0.95)) * stride;
        let cy = (cell_y as f64 + rng.gen_range(0.05..0.95)) * stride;
        let bw = rng.gen_range(4.0..60.0);
        let bh = rng.gen_range(4.0..60.0);
        let anchor = (rng.gen_range(8.0..40.0), rng.gen_range(8.0..40.0));

        let (ox, oy, lw, lh) = encode_box(cx, cy, bw, bh, stride, stride, cell_x, cell_y, anchor);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let (dcx, dcy, dbw, dbh) =
            decode_box(logit(ox), logit(oy), lw, lh, cell_x, cell_y, stride, stride, anchor);
        assert!((dcx - cx).abs() < 1e-9);
        assert!((dcy - cy).abs() < 1e-9);
        assert!((dbw - bw).abs() < 1e-9);
        assert!((dbh - bh).abs() < 1e-9);
    }
}

//! Box types and intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One detection in pixel coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Det {
    pub class_id: usize,
    pub confidence: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// One ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gt {
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Det {
    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl Gt {
    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union of two corner-form boxes. Disjoint boxes give
/// 0; a box without positive area is an error.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    for r in [a, b] {
        if !(r[2] > r[0] && r[3] > r[1]) {
            return Err(Error::DegenerateBox(r));
        }
    }
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    Ok(inter / (area(a) + area(b) - inter))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_values() {
        assert_eq!(iou([0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(iou([0.0, 0.0, 2.0, 2.0], [5.0, 5.0, 7.0, 7.0]).unwrap(), 0.0);
        let v = iou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]).unwrap();
        assert!((v - 1.0 / 7.0).abs() < 1e-12, "{}", v);
    }

    #[test]
    fn edge_touching_boxes_do_not_intersect() {
        assert_eq!(iou([0.0, 0.0, 2.0, 2.0], [2.0, 0.0, 4.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_area_box_is_an_error() {
        assert!(iou([0.0, 0.0, 0.0, 2.0], [0.0, 0.0, 2.0, 2.0]).is_err());
        assert!(iou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 1.0, 1.0]).is_err());
    }
}

//! Detection metrics: IoU, PASCAL-style greedy matching, average
//! precision over the monotone precision-recall envelope, and the report
//! aggregating precision/recall/F1 with the mAP family.

pub mod ap;
pub mod boxes;
pub mod matching;
pub mod report;

pub use ap::average_precision;
pub use boxes::{iou, Det, Gt};
pub use matching::match_greedy;
pub use report::{evaluate, EvalReport};

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A box with zero or negative extent, for which IoU is undefined.
    DegenerateBox([f64; 4]),
    /// Metrics over a dataset with no ground truth at all are undefined.
    EmptyGroundTruth,
    /// Detections and ground truth disagree on how many images exist.
    ImageCountMismatch { dets: usize, gts: usize },
    ClassOutOfRange { class_id: usize, num_class: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DegenerateBox(b) => {
                write!(f, "degenerate box [{}, {}, {}, {}]", b[0], b[1], b[2], b[3])
            }
            Error::EmptyGroundTruth => write!(f, "no ground truth boxes in the dataset"),
            Error::ImageCountMismatch { dets, gts } => {
                write!(f, "{} detection images vs {} ground-truth images", dets, gts)
            }
            Error::ClassOutOfRange { class_id, num_class } => {
                write!(f, "class {} out of range for {} classes", class_id, num_class)
            }
        }
    }
}

impl std::error::Error for Error {}

//! Synthetic dataset composition: paste target crops onto backgrounds with
//! non-overlap rejection sampling, emitting images, annotation files, and a
//! JSONL manifest. Generation is parallel per image and byte-reproducible
//! from the seed.

pub mod compose;
pub mod files;
pub mod generate;
pub mod place;
pub mod toy;

pub use compose::TargetCrop;
pub use files::{read_annotations, read_manifest, write_annotations, write_manifest, ManifestRow};
pub use generate::{generate, AcieConfig};
pub use place::{place_target, rect_overlap, BoxAnnotation};

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A configuration or pool that cannot produce the requested dataset.
    Config(String),
    /// One placement gave up after the given number of attempts.
    Placement { attempts: usize },
    /// One output image failed every re-roll of its background and targets.
    ImageRetries { image: usize, rolls: usize },
    Io(PathBuf, std::io::Error),
    Image(String),
    /// A malformed annotation or manifest line.
    Parse { file: PathBuf, line: usize, detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config: {}", msg),
            Error::Placement { attempts } => {
                write!(f, "placement failed after {} attempts", attempts)
            }
            Error::ImageRetries { image, rolls } => {
                write!(f, "image {} failed after {} re-rolls", image, rolls)
            }
            Error::Io(path, e) => write!(f, "{}: {}", path.display(), e),
            Error::Image(msg) => write!(f, "image: {}", msg),
            Error::Parse { file, line, detail } => {
                write!(f, "{}:{}: {}", file.display(), line, detail)
            }
        }
    }
}

impl std::error::Error for Error {}

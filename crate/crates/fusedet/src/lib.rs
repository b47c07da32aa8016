//! Two-stream multi-scale detector with text fusion.
//!
//! The model takes an image twice (the original and a super-resolved
//! version), runs both through one shared convolutional backbone, compresses
//! the three pyramid scales into fixed 5x5 token grids, fuses those 150
//! visual tokens with hashed text tokens in a transformer encoder, expands
//! the fused tokens back into feature maps, and decodes boxes from a small
//! three-scale detection neck and head.

pub mod backbone;
pub mod bridge;
pub mod detect;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod init;
pub mod model;
pub mod pngio;
pub mod srproxy;
pub mod textenc;

pub use error::{Error, Result};

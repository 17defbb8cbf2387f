//! Joint anchor-based object detection and semantic segmentation on the CPU.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`geom`]: boxes, IoU, the anchor lattice and R-CNN box deltas
//! - [`assign`]: per-anchor training targets (inactive / don't care / active)
//! - [`loss`]: focal, cross-entropy, smooth L1 and contrastive losses,
//!   uncertainty-based multi-task weighting and the polynomial LR schedule
//! - [`net`]: a small from-scratch network core (tensors, layers with
//!   reverse-mode gradients, the backbone + two-head model, Adam, training)
//! - [`post`]: decoding raw head outputs into detections and greedy NMS
//! - [`eval`]: segmentation IoU/iIoU and KITTI-style detection AP
//! - [`pipeline`]: annotations, synthetic scenes, image I/O, run configs and the CLI
//!
//! [`selftest`] bundles the brute-force oracles and finite-difference checks
//! used by the test suites and the `nnad selftest` command.

pub mod assign;
pub mod error;
pub mod eval;
pub mod geom;
pub mod loss;
pub mod net;
pub mod pipeline;
pub mod post;
pub mod selftest;

pub use error::{Error, Result};

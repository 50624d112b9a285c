//! Group-oriented consistency training for "many-to-one" multi-view
//! segmentation: several pixel-aligned views of one physical sample share a
//! single ground-truth mask, and the trainer cross-references views within a
//! group to build and correct pseudo-labels.
//!
//! The crate is organized around the training pipeline:
//!
//! * [`group_data`] — the group data model, on-disk dataset format and a
//!   procedural synthetic multi-view generator.
//! * [`augment`] — weak geometric / strong intensity transforms and CutMix.
//! * [`tensor`] / [`nn`] — a small reverse-mode autodiff tape over `ndarray`
//!   plus the layers, parameter store, optimizer and checkpoint format.
//! * [`segnet`] — the configurable encoder–decoder segmentation network.
//! * [`pcn`] — the pseudo-label correction network (view augmentation via
//!   weight generation, view correction via spatial gating).
//! * [`objective`] — pseudo-labels, masked cross-entropy and the loss stack.
//! * [`engine`] — intra-group view sampling, the training step and loop.
//! * [`evalviz`] — mIoU evaluation and pseudo-label panel export.
//! * [`cli`] — the `icaf` command-line entry points.

pub mod augment;
pub mod cli;
pub mod engine;
pub mod error;
pub mod evalviz;
pub mod group_data;
pub mod nn;
pub mod objective;
pub mod pcn;
pub mod segnet;
pub mod tensor;

pub use error::{Error, Result};

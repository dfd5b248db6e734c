//! Knowledge-distilled nuclei segmentation.
//!
//! A U-Net student is trained on binary pseudo-labels derived from a
//! teacher's instance maps, with a BCE + Tversky objective that penalizes
//! missed foreground harder than spurious foreground, plus a split-and-flip
//! consistency penalty.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

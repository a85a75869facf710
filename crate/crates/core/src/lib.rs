//! Local/global gated self-attention for multi-label video classification.
//!
//! Two Transformer encoder towers (visual and audio frame features) feed a
//! temporal-average classifier. Each tower's self-attention can mix global
//! attention maps with local, mask-restricted ones in four ways: plain
//! (`Baseline`), head sharing (`ShareAtt`), gated maps (`GateAtt`) and gated
//! outputs (`GateOp`).

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod masks;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

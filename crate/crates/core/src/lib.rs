//! Memory-space adaptation for segmentation.
//!
//! A small attention segmenter is pretrained once and then frozen. All later
//! adaptation happens in its memory space: learned static memory built from
//! optimised pseudo-observations, few-shot memory encoded from support pairs,
//! and a gated working-memory buffer filled at test time. A routing
//! controller picks the conditioning per query, and a federated simulator
//! averages pseudo-observations across clients.

pub mod autodiff;
pub mod backbone;
pub mod controller;
pub mod fedsim;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod optim;
pub mod synthdata;

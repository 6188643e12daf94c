//! Transformer sequential recommender with hierarchical, per-layer attention
//! masks: intra-item attention in shallow layers, unrestricted attention in
//! the middle, and last-token cross-item attention in deep layers.

pub mod ablation;
pub mod analysis;
pub mod cli;
pub mod data;
pub mod evaluation;
pub mod mask;
pub mod model;
pub mod numerics;
pub mod segmentation;
pub mod training;

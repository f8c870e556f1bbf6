//! Desk-scale sequential recommender with attention calibration.
//!
//! The backbone is a causal self-attention next-item predictor. Two
//! calibrators adjust its attention maps: a spatial calibrator injects
//! order/distance penalties into the pre-softmax logits (replacing position
//! embeddings), and an adversarial calibrator learns a perturbation mask
//! whose complement highlights decisive history entries. Training couples a
//! calibrated objective with an adversarial perturbation objective, routing
//! gradients so each parameter group only learns from its own loss.

pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod report;
pub mod spatial;
pub mod synth;
pub mod training;

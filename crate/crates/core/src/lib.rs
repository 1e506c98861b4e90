//! Two-stage dataset pruning for MNIST digit classification.
//!
//! Stage 1 trains the canonical CNN under contiguous k-fold cross-validation
//! and records every fold model's prediction for every pool image. Images that
//! every fold model either misclassifies or classifies with low confidence
//! are flagged, optionally reviewed by a human, and removed. Stage 2 retrains
//! on the cleaned pool.

pub mod dataset;
pub mod nn;
pub mod pruning;
pub mod training;
pub mod report;

//! Feedforward-designed convolutional classifiers and their ensembles.
//!
//! Every parameter is derived statistically in a single forward pass: conv
//! layers come from the Saab transform (a PCA variant with a constant DC
//! kernel and a nonnegativity-preserving bias), spatial redundancy is removed
//! by channel-wise PCA, and the fully-connected layers are least-squares
//! regressions onto per-class cluster pseudo-labels. Base classifiers built
//! this way are fused by PCA + an RBF SVM, and samples are routed to a second
//! ensemble when the first one is not confident.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod fc;
pub mod ffcnn;
pub mod forms;
pub mod numerics;
pub mod saab;
pub mod svm;

pub use error::{Error, Result};

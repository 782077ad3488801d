//! Desk-scale simulator for federated multimodal cardiovascular-risk models.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense tensors, a per-forward-pass reverse-mode tape and a
//!   finite-difference gradient checker.
//! - [`synthcohort`]: synthetic multimodal cohorts with a known generative
//!   process, PRS, non-IID site partitions and patient-similarity graphs.
//! - [`xmt`]: per-modality encoders and the cross-modal transformer fusion.
//! - [`gat`]: graph attention over the patient graph with rarity reweighting.
//! - [`model`]: the full network (fusion, graph attention, prediction and
//!   auxiliary heads) over a flat parameter vector.
//! - [`objective`]: task, mutual-information and causal-alignment losses.
//! - [`fedsim`]: local updates, FedAvg, DP-SGD and privacy accounting.
//! - [`evalkit`]: discrimination, calibration, fairness, uncertainty and
//!   attribution metrics.
//! - [`experiment`]: configuration, validation protocols and artifact export.

pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod fedsim;
pub mod gat;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod synthcohort;
pub mod xmt;

pub use error::{Error, Result};

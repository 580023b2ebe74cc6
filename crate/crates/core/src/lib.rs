//! Error-vector-spectrum (EVS) localization toolkit.
//!
//! The crate covers the whole path from a frequency-domain OFDM packet to a
//! location label:
//!
//! * [`ofdm`]: subcarrier grid, constellations, frame layout, packets.
//! * [`channel`]: geometric indoor multipath simulator with carrier offset and noise.
//! * [`baseband`]: LTF channel estimation, pilot phase tracking, zero-forcing equalization.
//! * [`evs`]: modulation classification, hard decisions, raw and calibrated EVS, feature views.
//! * [`classifier`]: SeLU multilayer perceptron trained by backpropagation, plus a KNN baseline.
//! * [`io`]: capture, feature, model and results file formats.
//! * [`experiment`]: the gamma sweep and feature comparison runs.

pub mod baseband;
pub mod channel;
pub mod classifier;
pub mod error;
pub mod evs;
pub mod experiment;
pub mod io;
pub mod ofdm;

pub use error::{Error, Result};

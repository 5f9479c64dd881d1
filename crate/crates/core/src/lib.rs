//! Acoustic echo mapping with a loudspeaker and a uniform circular microphone
//! array.
//!
//! The crate covers the whole chain: shoebox room simulation with the
//! image-source method, a frequency-domain nonlinear least-squares echo delay
//! estimator, an MPDR steered-response-power direction finder, an RBF support
//! vector classifier that rejects spurious echoes, 2-D map assembly and a
//! Monte-Carlo evaluation harness with an RIR peak-picking baseline.

pub mod baseline;
pub mod classifier;
pub mod config;
pub mod doa;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod mapper;
pub mod room;
pub mod seed;
pub mod toa;

pub use error::{Error, Result};
pub use geometry::{ArrayGeometry, Point3, Pose, ProbeSignal};

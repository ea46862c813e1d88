//! Simulation, training, and evaluation toolkit for optical-path-length
//! demodulation in four-band wavelength-shifting interferometry.
//!
//! The toolkit models a camera observing a two-beam interference signal at
//! four wavenumbers, demodulates the optical path length per observation
//! with either the analytic four-sample estimator or small dense neural
//! networks trained on constraint boxes, and measures every estimator's
//! shot-noise sensitivity against the Cramer-Rao bound hierarchy, both at
//! single points and across synthetic interferogram image stacks.
//!
//! Modules, roughly bottom-up:
//!
//! - [`signal`]: wavenumber grid, scene parameters, mean intensities, and
//!   the Poisson/gain/quantization camera model.
//! - [`estimators`]: the analytic four-sample estimator and the estimator
//!   interface, including OPL wrapping.
//! - [`fisher`]: Fisher information, the unconstrained bound, and the
//!   single-parameter bound.
//! - [`net`]: from-scratch dense networks with sigmoid activations,
//!   inverted dropout, exact backpropagation, and ADAM.
//! - [`training`]: constraint-box training sets, early-stopped training,
//!   and banks of window-specialized networks.
//! - [`evaluate`]: Monte Carlo sensitivity, sensitivity curves, and the
//!   ordering (hierarchy) checks.
//! - [`imaging`]: synthetic interferogram stacks, per-pixel demodulation
//!   into OPL and sensitivity maps, histograms, and file formats.
//! - [`config`]: run configuration, presets, and reproducibility sidecars
//!   for the `wsi` command-line tool.
//! - [`rng`]: the seed tree giving every sample its own random stream, so
//!   results never depend on worker count.

pub mod config;
pub mod error;
pub mod estimators;
pub mod evaluate;
pub mod fisher;
pub mod imaging;
pub mod net;
pub mod rng;
pub mod signal;
pub mod training;

pub use error::{Error, Result};

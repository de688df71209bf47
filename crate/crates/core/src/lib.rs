//! Core library for desk-scale probabilistic-shaping studies on unrepeated
//! coherent fiber links.
//!
//! The crate is organised around the workflow of comparing shaping strategies
//! for dual-polarization QAM:
//!
//! * [`constellation`] — square-QAM geometry, probability mass functions, and
//!   the Maxwell-Boltzmann family with its unit-energy self-consistency.
//! * [`metrics`] — effective-SNR and mismatched-decoding AIR estimators for
//!   simulated symbol records, plus quadrature AWGN mutual information and the
//!   shaping-gap figure of merit.
//! * [`egn`] — a closed-form enhanced-Gaussian-noise (EGN) link model whose
//!   modulation-dependent coefficients are calibrated against simulation.
//! * [`ssfm`] — a WDM split-step Fourier simulator (RRC pulses, attenuation,
//!   chromatic dispersion, Kerr nonlinearity, lumped EDFA/ASE) with a matched
//!   receiver.
//! * [`optimize`] — the four input-distribution optimizers compared by the
//!   toolkit: linear-AWGN Maxwell-Boltzmann, EGN-aware Maxwell-Boltzmann,
//!   unconstrained EGN gradient shaping, and simulation-in-the-loop
//!   Blahut-Arimoto.
//!
//! All randomness is reproducible: every stochastic routine takes an explicit
//! seed and derives per-stream generators from it (see [`rng`]), and every
//! reduction over Monte-Carlo records uses a fixed summation order, so equal
//! seeds give bit-identical results regardless of thread count.

pub mod constellation;
pub mod egn;
pub mod metrics;
pub mod optimize;
pub mod rng;
pub mod ssfm;
pub mod sums;
pub mod units;

pub use num_complex::Complex64;

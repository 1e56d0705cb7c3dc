//! Casimir forces between a sphere and a layered plate from the
//! finite-temperature Lifshitz theory, together with the experiment-side
//! machinery needed to compare them against AFM force-distance data.
//!
//! The crate is organised bottom-up:
//!
//! * [`material`]: closed-form permittivity models on the real and imaginary
//!   frequency axes.
//! * [`kramers_kronig`]: ε(iξ) from tabulated Im ε(ω) plus extrapolations,
//!   with the free-carrier on/off decomposition.
//! * [`lifshitz`]: Matsubara sums, layered Fresnel coefficients, plane-plane
//!   free energy and the proximity-force sphere-plate force.
//! * [`roughness`]: geometrical averaging over measured height histograms.
//! * [`electrostatics`] and [`calibration`]: sphere-plane electrostatics,
//!   calibration fits, Casimir extraction and the error budget.
//!
//! Frequencies are carried in eV throughout, lengths in nm, and forces are
//! reported in pN with attraction negative.

// `!(x > 0.0)` is deliberate: NaN has to fail every validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod electrostatics;
pub mod error;
pub mod interp;
pub mod kramers_kronig;
pub mod lifshitz;
pub mod material;
pub mod quadrature;
pub mod reference;
pub mod roughness;
pub mod stats;
pub mod units;

pub use error::{Error, Result};

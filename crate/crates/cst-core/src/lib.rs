//! Compton scatter tomography on a circular detector ring.
//!
//! A fixed source illuminates an object held inside a ring of energy-resolved
//! detectors. Each recorded energy corresponds to one scattering angle, and the
//! locus of points scattering into a given detector at that angle is a pair of
//! mirrored circular arcs through source and detector. The crate builds the
//! resulting linear forward operator on a pixel grid, inverts it with classical
//! solvers, and trains an unrolled gradient-descent network whose learned
//! regularizer acts on the wavelet approximation band.

pub mod autodiff;
pub mod geometry;
pub mod operator;
pub mod parallel;
pub mod scalar;
pub mod simulate;
pub mod solvers;
pub mod transforms;
pub mod unwavenet;

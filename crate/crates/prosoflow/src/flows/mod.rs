//! Conditional normalizing flows over scalar variance sequences.

pub mod spline;

pub use spline::{spline_forward, spline_inverse, ConstrainedSpline, SplineConfig};

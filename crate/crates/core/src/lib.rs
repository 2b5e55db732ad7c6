//! Resonance tracking by phase feedback and amplitude feedforward, the
//! analytic single-mode model it relies on, and a virtual nonlinear
//! resonator to run it against.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dsp;
pub mod modane;
pub mod plant;
pub mod protocols;
pub mod tracker;

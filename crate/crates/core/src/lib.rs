//! Reduced-order modeling of parameterized PDEs through autoencoder latent
//! spaces with linear latent dynamics, trained with reconstruction,
//! latent-dynamics and rollout losses.

// Domain checks are written `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod findiff;
pub mod fom;
pub mod formats;
pub mod gp;
pub mod interp;
pub mod metrics;
pub mod rom;
pub mod tape;
pub mod train;

pub use error::{Error, Result};

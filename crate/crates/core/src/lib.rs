//! Camera relocalization against a shadow-normalized hash-grid radiance field.
//!
//! The crate is split along the two stages of the pipeline:
//!
//! * map construction ([`mapper`]): posed images are passed through a shadow
//!   [`normalizer`] and a multi-resolution hash-grid field ([`hash_field`] +
//!   [`decoder`]) is fitted to them by volume rendering ([`renderer`]);
//! * pose recovery ([`localizer`]): the camera pose of a normalized test image
//!   is refined on SE(3) ([`geometry`]) by photometric descent, with level
//!   weighting that opens finer grid levels as the run progresses and
//!   central-difference encoder gradients.
//!
//! [`scenegen`] provides a synthetic analytic world and dataset writer.

pub mod decoder;
pub mod error;
pub mod field;
pub mod geometry;
pub mod hash_field;
pub mod image;
pub mod localizer;
pub mod mapper;
pub mod normalizer;
pub mod real;
pub mod renderer;
pub mod scenegen;

pub use error::{Error, Result};
pub use real::Real;

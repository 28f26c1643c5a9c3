//! Few-shot classification in a fixed feature space with prototype restoration.
//!
//! The pipeline: a binary feature bank ([`featstore`]) is optionally passed through a learned
//! embedding ([`embedtrain`]); one-shot prototypes ([`protocore`]) are then moved toward
//! their class centers by a small regressor ([`restorenet`]) and/or refined with nearby
//! unlabeled vectors ([`selftrain`]). [`evalharness`] runs paired episodic evaluations.

pub mod embedtrain;
pub mod error;
pub mod evalharness;
pub mod featstore;
pub mod neural;
pub mod numerics;
pub mod protocore;
pub mod restorenet;
pub mod selftrain;
pub mod synthgen;

pub use error::{Error, Result};

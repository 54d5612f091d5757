//! Corneal-reflection gaze estimation engine with a synthetic eye simulator.
//!
//! The crate forward-models glint/pupil observations from a spherical eye
//! model, inverts them to recover the cornea position and gaze direction,
//! and evaluates the whole pipeline under a fixed data-collection protocol.

pub mod config;
pub mod cornea;
pub mod ellipse;
pub mod geometry;
pub mod mapper;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod sim;

pub use geometry::{PinholeCamera, Point2, Point3, Ray3, Sphere, UnitVec3};

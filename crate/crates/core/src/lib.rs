//! Camera relocalization against geo-registered reference images and point clouds.

pub mod direct;
pub mod estimate;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod imaging;
pub mod pipelines;
pub mod pnp;
pub mod retrieval;
pub mod scene;

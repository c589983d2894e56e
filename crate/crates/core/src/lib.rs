//! Synthetic in-air sonar landmark pipeline: chirp synthesis, array
//! simulation, beamformed acoustic imaging, echo detection, gammatone
//! cochleograms and a small CNN for landmark identity and orientation.

pub mod beamform;
pub mod cochleo;
pub mod dataset;
pub mod geometry;
pub mod imaging;
pub mod net;
pub mod pipeline;
pub mod reports;
pub mod signals;
pub mod simulator;

//! Optimal pacing for trail running: a generalised Keller model with
//! gravity, nutrition and fatigue, direct-transcription solvers for the
//! maximum-distance and minimum-time problems, and a Pontryagin
//! maximum-principle verifier.

pub mod model;
pub mod nutrition;
pub mod ocp;
pub mod physiology;
pub mod pmp;
pub mod race;
pub mod terrain;

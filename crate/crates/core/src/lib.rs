//! Periodic bounce orbits of billiard-type systems with a potential, computed
//! as limits of smooth penalized orbits.

pub mod action;
pub mod bounds;
pub mod continuation;
pub mod dynamics;
pub mod geometry;
pub mod orbit;
pub mod runner;

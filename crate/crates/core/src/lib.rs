//! Revised simplified verifiable re-encryption mix-net and an incoercible
//! voting protocol built on it.

pub mod audit;
pub mod board;
pub mod classic;
pub mod credentials;
pub mod election;
pub mod group;
pub mod hex;
pub mod mixnet;
pub mod parallel;
pub mod prime;
pub mod revised;
pub mod rng;
pub mod scenario;
pub mod verify;

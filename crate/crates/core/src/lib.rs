//! Simulator for personalized decentralized learning: agents share the
//! front layers of a network by gossip averaging and fuse their last layer
//! from neighbors' heads through a learned graph attention.

pub mod attention;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod netsim;
pub mod nn;
pub mod protocols;
pub mod rng;
pub mod theory;
pub mod topology;

pub use error::{Error, Result};

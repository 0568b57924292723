pub mod coordinator;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod models;
pub mod swarm;
pub mod verify;
pub mod worker;

pub use error::{Error, Result};

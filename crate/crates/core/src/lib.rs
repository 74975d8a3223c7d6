pub mod bench;
pub mod chaos;
pub mod chord;
pub mod client;
pub mod cluster;
pub mod config;
pub mod consensus;
pub mod edge;
pub mod error;
pub mod gateway;
pub mod linearizability;
pub mod ring;
pub mod storage;
pub mod transport;
pub mod wire;

pub use error::{Error, Result};

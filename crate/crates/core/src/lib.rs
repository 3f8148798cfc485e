pub mod accountant;
pub mod checkpoint;
pub mod client;
pub mod server;
pub mod session;
pub mod transport;
pub mod data;
pub mod dp;
pub mod error;
pub mod experiment;
pub mod iot;
pub mod nn;
pub mod seed;
pub mod train;
pub mod wire;

pub use error::{Error, Result};

pub mod bench;
pub mod config;
pub mod error;
pub mod io;
pub mod lowering;
pub mod masks;
pub mod network;
pub mod perfconv;
pub mod rate;
pub mod search;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};

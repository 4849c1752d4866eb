pub mod attrnet;
pub mod blocks;
pub mod checkpoint;
pub mod editops;
pub mod encoders;
pub mod error;
pub mod evalharness;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod optim;
pub mod shapesdata;
pub mod stylegen;
pub mod trainer;

pub use error::{Error, Result};

pub mod autograd;
pub mod bitconv;
pub mod bitpack;
pub mod bundle;
pub mod checkpoint;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod layers;
pub mod quantize;
pub mod run;
pub mod tensor;
mod wire;

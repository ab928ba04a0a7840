pub mod columnar;
pub mod comm;
pub mod distops;
pub mod error;
pub mod io;
pub mod localops;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use columnar::{Column, DataType, Schema, Table, Value};
pub use error::{Error, Result};

pub type Matrix = tensor::DenseMatrix<f64>;
pub type Matrix32 = tensor::DenseMatrix<f32>;
pub type ResponseNet = tensor::ResponseNetwork<f64>;
pub type ResponseNet32 = tensor::ResponseNetwork<f32>;

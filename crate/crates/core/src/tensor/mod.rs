//! Dense matrices, the residual response network and data-parallel training.

mod ddp;
mod matrix;
mod net;

pub use ddp::{ddp_allreduce_grads, ddp_broadcast_params, train, train_with, Batch, TrainConfig};
pub use matrix::{matrix_to_table, split, table_to_matrix, DenseMatrix, Scalar, Split};
pub use net::{mse_loss, Cache, Dense, Mode, NetConfig, ResponseNetwork};

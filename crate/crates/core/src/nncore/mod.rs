//! Tape-based reverse-mode autodiff over dense `f64` tensors, with the
//! layers, optimizer and schedules needed for training.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use graph::{Graph, Var};
pub use layers::{
    fc, gru_cell, lstm_cell, receptive_field, Activation, CausalConv1d, GruLayer, Linear, LstmLayer, TemporalBlock,
    Tcn, GRU_CONVENTION,
};
pub use optim::{cosine_lr, ema_decay, ema_update, Adam, EarlyStopping, OptimState};
pub use tensor::{ParameterStore, Tensor};

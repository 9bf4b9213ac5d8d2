//! Small dense/LSTM toolkit with manual backpropagation.

pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod ops;
pub mod param;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Dense, LstmLayer, LstmTrace};
pub use param::{Adadelta, Param, Parameterized};
pub use tensor::Tensor2;

//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The crate provides just the operations the multi-view fusion network
//! needs: matrix products, elementwise maps with restricted broadcasting,
//! softmax, layer and batch normalization, a stop-gradient edge, a small
//! valid-mode convolution, plus Adam and a cosine learning-rate schedule.
//!
//! ```
//! use bmr_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
//! let sq = tape.square(x);
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod kernels;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use ops::{elu, sigmoid, softmax_in_place, Mode, RunningStats, BATCHNORM_EPS, BATCHNORM_MOMENTUM, LAYERNORM_EPS};
pub use optim::{cosine_anneal, Adam, AdamConfig};
pub use params::{ParamEntry, ParamId, ParamStore, Session, StatsId};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

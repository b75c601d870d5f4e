//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The engine covers what a small fully convolutional segmentation network
//! needs: strided/dilated convolution, transposed convolution, bilinear
//! upsampling, batch normalization, ReLU, channel softmax, a gathered
//! negative-log-likelihood, and SGD with momentum.
//!
//! ```
//! use hseg_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::from_fn(&[3], |i| i as f64));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 2.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod ops;
mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::conv::{ConvGeometry, Padding};
pub use ops::norm::{BatchMoments, NormMode, RunningStats, BN_EPSILON};
pub use optim::{DecayPolicy, ParamId, ParamStore, Parameter, Sgd, SgdConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

//! Mesoscale eddy segmentation with a symmetric encoder/decoder network.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: NCHW tensors and a reverse-mode tape with
//!   the convolution, pooling, normalisation and activation ops the network
//!   needs.
//! * [`net`]: the symmetric network with additive lateral connections and
//!   rate-4 dilated convolutions on the upsampling path.
//! * [`loss`]: cross-entropy, soft dice and their combination, plus pixel
//!   metrics.
//! * [`data`] and [`synth`]: the `.eddy` sample format, dataset manifests,
//!   patch extraction, and a generator of labelled synthetic eddy fields.
//! * [`checkpoint`] and [`train`]: weight files, Adam, the plateau schedule,
//!   and the training/evaluation loop.
//! * [`gradsuite`]: the finite-difference suite covering every op.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod loss;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{ConvSpec, Mode, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Dims, Scalar, Tensor4};

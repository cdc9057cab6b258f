//! Minimal layer zoo with explicit forward traces and hand-written
//! backward passes.
//!
//! Layers return a trace object from `forward`; `backward` consumes the
//! trace, accumulates parameter gradients in place (unless the caller asks
//! for input gradients only, as with frozen teachers) and returns the
//! gradient w.r.t. the layer input.

pub mod conv;
pub mod init;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod param;

pub use conv::{Conv2d, PadMode};
pub use norm::{BatchNorm2d, BnObservation, ConditionalBn};
pub use optim::{Adam, Nag};
pub use param::{
    checksum, clip_grad_norm, global_grad_norm, set_trainable, zero_grads, Param, ParamVisit,
};

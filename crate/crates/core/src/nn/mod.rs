//! Parameters, forward contexts and layer primitives.

mod ctx;
mod layers;
mod store;

pub use ctx::{Backward, BnUpdate, Ctx, Mode};
pub use layers::{he_normal, BatchNorm, Conv2d, Linear, LstmCell, BN_EPS, BN_MOMENTUM};
pub use store::{Buffer, BufferId, ParamId, ParamStore, Parameter};

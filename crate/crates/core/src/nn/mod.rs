//! Small neural-network toolkit on top of candle tensors.

mod layers;
mod lstm;
mod params;
mod softmax;

pub use layers::{log_softmax_last, Ctx, LayerNorm, Linear};
pub use lstm::Blstm;
pub use params::{Init, ParamStore};
pub use softmax::softmax_last;

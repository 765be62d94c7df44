pub mod backward;
pub mod forward;
pub mod params;

pub use forward::{encoder_forward, ForwardOutput};
pub use params::{LayerParams, ParamGroup, VitParams};

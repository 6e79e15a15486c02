//! Model assembly: declarative specs, shape checking, and the instantiated
//! network with unified forward/backward passes and parameter registry.

pub mod model;
pub mod spec;

pub use model::{build_model, ForwardCache, GradientSet, Head, Layer, Model};
pub(crate) use model::{head_forward_batch, maxpool2_forward_batch};
pub use spec::{
    count_retained_fraction, retained_params, LayerShapes, LayerSpec, ModelSpec, RetainedParams,
};

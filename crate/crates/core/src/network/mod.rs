//! Declarative network specs, the PlainNet / ResNet builders, and the runtime model.

mod builders;
mod model;
mod spec;

pub use builders::{
    build_detrame_plainnet, build_plainnet, build_plainnet_with, build_resnet, PlainNetOptions,
    PLAINNET_DEPTHS,
};
pub use model::{Network, NetTape, ParamKind, ParamSlot};
pub use spec::{Activation, LayerSpec, NetworkSpec, Shape};

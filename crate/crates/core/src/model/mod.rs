//! Network description, character sets and the executable model.

mod charset;
mod net;
mod spec;

pub use charset::{CharSet, SymbolClass, DIGITS, LETTERS, PROVINCES};
pub use net::{
    global_context_forward, ForwardCache, ForwardOptions, Gradients, Model, ParamSlot, ParamView,
};
pub use spec::{
    CharSetSource, LayerKind, LayerSpec, ModelConfig, NetworkSpec, ResolvedLayer, Variant,
    INPUT_DIMS,
};

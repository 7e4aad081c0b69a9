//! View-aware attention: window schemes, restricted attention and the
//! stacked transformer producing the BEV representation.

pub mod attention;
pub mod model;
pub mod scheme;

pub use attention::{AttentionStack, Routing, TokenLayout, WindowTrace};
pub use model::{CftModel, CftOutput, ForwardOptions, ModelConfig};
pub use scheme::{build_scheme, SchemeKind, View, WindowScheme};

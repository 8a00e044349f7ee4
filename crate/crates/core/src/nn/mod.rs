//! Minimal neural-network stack: a reverse-mode tape, parameter storage,
//! recurrent and dense layers, the forecaster and proposal networks, and Adam.

pub mod adam;
pub mod layers;
pub mod models;
pub mod params;
pub mod tape;

pub use adam::{adam_step, Adam, AdamConfig};
pub use layers::{Dense, GruCell, LayerNorm, Mlp};
pub use models::{Forecaster, ForecasterSpec, ProposalNet, ProposalSpec};
pub use params::{Bound, ParamId, ParameterStore};
pub use tape::{Grads, Tape, Var};

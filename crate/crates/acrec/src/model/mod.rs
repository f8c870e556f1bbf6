//! Transformer backbone with calibrated attention: parameters, forward pass
//! and prediction head.

pub mod forward;
pub mod params;
pub mod trace;

pub use forward::{
    cross_entropy, embed, encode, erase_entry, erase_max_entries, forward, predict_scores,
    BatchMasks, Branch, EraseMax, ForwardOptions, ForwardOutput, HeadSelection,
};
pub use params::{BoundParams, ParamGroup, ParameterStore};
pub use trace::{LayerArtifacts, LayerTrace};

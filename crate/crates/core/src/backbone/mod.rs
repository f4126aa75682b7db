//! Transformer-in-Transformer backbones.
//!
//! An inner encoder stack turns each observation's patches into a class
//! feature; an outer causal stack relates the class features of the last
//! `K` observations. The wirings differ in how the two stacks are
//! interleaved and what the heads read.

pub mod config;
pub mod dt;
pub mod flows;
pub mod input;
pub mod model;
pub mod patch;


pub use config::{ActionSpec, ObsShape, TitConfig, Variant};
pub use dt::{dt_token_count, one_hot, DtBatch, DtModel, DtOutput};
pub use flows::{count_information_flows, FlowCounts};
pub use input::{ObsWindow, WindowBatch};
pub use model::{
    assemble_outer_input, embed_and_tokenize, inner_forward, AttentionMaps, EmbedParams,
    ForwardOptions, HeadParams, InnerOutput, PolicyOutput, TitModel,
};
pub use patch::{patchify, PatchSequence};

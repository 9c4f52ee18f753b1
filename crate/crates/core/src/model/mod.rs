//! The recurrent graph generator: per-kind embeddings, stacked
//! context-aware attention layers, per-kind GRU cells and output heads in an
//! encoder-decoder rollout.

pub mod batch;
pub mod chat;
pub mod generator;
pub mod gru;

pub use batch::{GraphBatch, RelationEdges};
pub use chat::{
    chat_layer, gconv, init_chat_layer, relation_attention, relation_scores, AttentionSnapshot,
    AttnVars, ChatLayerVars,
};
pub use generator::{
    init_generator, predictive_loss, AttentionLog, GenVars, Generator, GeneratorConfig, HeadVars,
    ModelState, Snapshot, TeacherForcing,
};
pub use gru::{gru_step, init_gru, GruVars};

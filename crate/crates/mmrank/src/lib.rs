//! End-to-end ranking pipeline: raw-token content encoders for queries and
//! docs trained jointly with a CTR ranker, aligned by a session-masked
//! contrastive loss, fed through an embedding memory bank and cross-attention
//! history decoders, under a simulated multi-worker sampling and dedup
//! protocol.
//!
//! Everything runs on [`mmrank_core`]'s gradient tape at desk scale; the
//! production-scale geometry exists only as a validated config profile.

pub mod bind;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distsim;
pub mod encoder;
pub mod memory_bank;
pub mod metrics;
pub mod model;
pub mod ranker;
pub mod seqmodel;
pub mod sqdc;
pub mod trainer;

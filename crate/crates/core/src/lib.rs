//! Distillation, consolidation and retrieval of cultural commonsense
//! knowledge assertions.
//!
//! Phase one prompts a chat-completion provider from concept and culture
//! entry points ([`generation`]), the raw assertions are filtered
//! ([`filtering`]), then consolidated by Ward-linkage clustering over
//! sentence embeddings with generated representatives ([`consolidate`]).
//! The resulting knowledge base feeds dense retrieval ([`retrieval`]) and an
//! intercultural dialogue harness ([`dialogue`]). [`pipeline`] wires the
//! stages together with file-based hand-off.

pub mod config;
pub mod consolidate;
pub mod dialogue;
pub mod embedding;
pub mod filtering;
pub mod gateway;
pub mod generation;
pub mod kb;
pub mod pipeline;
pub mod retrieval;

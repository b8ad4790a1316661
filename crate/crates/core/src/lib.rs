//! Hybrid parameter-server / ring-collective training runtime.
//!
//! Workers are organised into client groups. Inside a group, gradients are
//! combined with ring collectives over lane-grouped tensors; group masters
//! exchange the aggregate with key-value servers. Synchronous, asynchronous
//! and elastic-averaging SGD drivers sit on top.

pub mod collectives;
pub mod engine;
pub mod kvstore;
pub mod launcher;
pub mod optimizers;
pub mod trainer;
pub mod transport;
pub mod wire;

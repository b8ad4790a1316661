//! Message tag registry. Every frame on the wire carries one of these.

// rendezvous
pub const REGISTER: u8 = 0x01;
pub const ADDRESS_BOOK: u8 = 0x02;
pub const HELLO: u8 = 0x03;
pub const REJECT: u8 = 0x04;

// key-value store
pub const KV_INIT: u8 = 0x10;
pub const KV_PUSH: u8 = 0x11;
pub const KV_PULL: u8 = 0x12;
pub const KV_PULL_RESP: u8 = 0x13;
pub const KV_SET_OPTIMIZER: u8 = 0x14;
pub const KV_SHUTDOWN: u8 = 0x15;
pub const KV_SHUTDOWN_ACK: u8 = 0x16;

// collectives
pub const REDUCE_SCATTER_CHUNK: u8 = 0x20;
pub const ALLGATHER_CHUNK: u8 = 0x21;
pub const BROADCAST_CHUNK: u8 = 0x22;
pub const GATHER_CHUNK: u8 = 0x23;

// run supervision
pub const WORKER_REPORT: u8 = 0x30;

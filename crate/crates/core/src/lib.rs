//! tungate: a user-space transparent traffic gateway.
//!
//! The gateway bridges raw IP packets from a TUN device onto ordinary
//! sockets, mirrors every flow to an off-path traffic analyzer for protocol
//! and privacy analysis, and optionally intercepts TLS under a local CA. A
//! bundled benchmark harness measures the latency/CPU trade-offs of the
//! polling forwarder.

pub mod analyzer;
pub mod bench;
pub mod config;
pub mod control;
pub mod daemon;
pub mod engine;
pub mod flow;
pub mod forwarder;
pub mod harness;
pub mod packet;
pub mod tls;
pub mod tun;

//! A node on a real network.
//!
//! Peers talk length-prefixed envelopes over TCP ([`transport`], [`server`]);
//! the local user reaches the node through a loopback HTTP API ([`api`]).
//! [`runtime`] wires both to one [`RelayNode`](decoy_core::RelayNode) built
//! from a [`NodeConfig`](decoy_core::config::NodeConfig) and keeps the view
//! fresh in the background.

pub mod api;
pub mod runtime;
pub mod server;
pub mod transport;

pub use api::router;
pub use runtime::{NodeHandle, NodeRuntime};
pub use transport::TcpTransport;

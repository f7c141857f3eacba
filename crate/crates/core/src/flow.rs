//! Flow identity: the 5-tuple key shared by both directions of a conversation.

use crate::packet::{IpPacket, Transport};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::net::{IpAddr, SocketAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportProto {
    Tcp,
    Udp,
}

impl fmt::Display for TransportProto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportProto::Tcp => write!(f, "tcp"),
            TransportProto::Udp => write!(f, "udp"),
        }
    }
}

/// Which way a packet travels relative to the gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// App (TUN side) toward the remote.
    Outbound,
    /// Remote (socket side) toward the app.
    Inbound,
}

impl Direction {
    pub fn flip(self) -> Direction {
        match self {
            Direction::Outbound => Direction::Inbound,
            Direction::Inbound => Direction::Outbound,
        }
    }
}

/// Direction-normalized flow identity. `app` is always the TUN-side endpoint,
/// so a packet and its reply map to the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub proto: TransportProto,
    pub app: SocketAddr,
    pub remote: SocketAddr,
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} <-> {}", self.proto, self.app, self.remote)
    }
}

impl FlowKey {
    /// Key for a packet known to travel app→remote (read off the TUN device).
    pub fn from_outbound(p: &IpPacket) -> FlowKey {
        FlowKey {
            proto: proto_of(p),
            app: SocketAddr::new(p.src_addr(), p.src_port()),
            remote: SocketAddr::new(p.dst_addr(), p.dst_port()),
        }
    }
}

fn proto_of(p: &IpPacket) -> TransportProto {
    match p.transport {
        Transport::Tcp(_) => TransportProto::Tcp,
        Transport::Udp(_) => TransportProto::Udp,
    }
}

/// Normalize a packet to its flow key plus travel direction, given the
/// TUN-side (app) address. Both directions of one conversation yield an
/// identical key. When neither endpoint matches the app address (replayed
/// foreign captures), the source is assumed to be the app side.
pub fn flow_key_of(p: &IpPacket, app_addr: IpAddr) -> (FlowKey, Direction) {
    let src = SocketAddr::new(p.src_addr(), p.src_port());
    let dst = SocketAddr::new(p.dst_addr(), p.dst_port());
    let proto = proto_of(p);
    if p.dst_addr() == app_addr && p.src_addr() != app_addr {
        (
            FlowKey {
                proto,
                app: dst,
                remote: src,
            },
            Direction::Inbound,
        )
    } else {
        (
            FlowKey {
                proto,
                app: src,
                remote: dst,
            },
            Direction::Outbound,
        )
    }
}

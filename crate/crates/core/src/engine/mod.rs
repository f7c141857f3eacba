//! The shadow layer-3/4 stack.
//!
//! Maps TUN-side packets to socket-side byte streams and back, tracking
//! per-flow TCP state and sequence/acknowledgment numbers. The engine is a
//! pure state machine: operations return [`EngineAction`] descriptions and
//! the caller (the forwarder loop) performs all I/O. That split keeps every
//! transition unit-testable against action traces.

pub mod seq;

use crate::flow::{Direction, FlowKey, TransportProto};
use crate::packet::{
    self, IpHeader, IpPacket, Ipv4Header, Ipv6Header, TcpFlags, TcpSegment, Transport,
    UdpDatagram,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use seq::{seq_diff, seq_le, seq_lt};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::IpAddr;
use std::time::{Duration, Instant};

/// Fixed window advertised toward the app; flow control toward the remote is
/// delegated to the real socket.
pub const ADVERTISED_WINDOW: u16 = 65535;
/// Out-of-order buffering cap per flow for TUN-side segments.
pub const REORDER_CAP: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub mtu: usize,
    pub tcp_idle_ttl: Duration,
    pub udp_idle_ttl: Duration,
    /// Single-transaction heuristic for DNS-port UDP flows.
    pub dns_idle_ttl: Duration,
    pub max_flows: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mtu: 1500,
            tcp_idle_ttl: Duration::from_secs(300),
            udp_idle_ttl: Duration::from_secs(60),
            dns_idle_ttl: Duration::from_secs(10),
            max_flows: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TcpPhase {
    SynReceived,
    Connecting,
    Established,
    AppFinSent,
    RemoteClosed,
    Closed,
}

#[derive(Debug)]
pub struct TcpShadowState {
    pub phase: TcpPhase,
    /// Next sequence number we send toward the app (mod 2^32).
    pub local_seq: u32,
    /// Next byte expected from the app (mod 2^32).
    pub local_ack: u32,
    pub app_isn: u32,
    pub local_isn: u32,
    pub app_window: u16,
    pub mss: u16,
    /// Highest ack the app has sent us; paces downlink against its window.
    app_acked: u32,
    /// Out-of-order TUN-side segments awaiting the gap fill, keyed by seq.
    reorder: BTreeMap<u32, Vec<u8>>,
    reorder_bytes: usize,
    /// Socket bytes not yet segmented toward the app (window pacing).
    pending_down: VecDeque<u8>,
    /// Remote EOF seen; FIN goes out once `pending_down` drains.
    pending_fin: bool,
    fin_sent: bool,
}

#[derive(Debug)]
pub struct UdpMapping;

#[derive(Debug)]
pub enum TransportState {
    Tcp(TcpShadowState),
    Udp(UdpMapping),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TlsStatus {
    NotTls,
    Intercepted,
    Whitelisted,
}

#[derive(Debug)]
pub struct FlowRecord {
    pub key: FlowKey,
    pub transport: TransportState,
    /// Opaque handle assigned by the I/O layer; valid only while the flow is
    /// past SynReceived and not Closed.
    pub socket_handle: Option<u64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub flow_id: u64,
    pub tls_status: TlsStatus,
    pub created_at: Instant,
    pub last_activity: Instant,
}

impl FlowRecord {
    fn tcp_mut(&mut self) -> Option<&mut TcpShadowState> {
        match &mut self.transport {
            TransportState::Tcp(t) => Some(t),
            TransportState::Udp(_) => None,
        }
    }

    pub fn tcp(&self) -> Option<&TcpShadowState> {
        match &self.transport {
            TransportState::Tcp(t) => Some(t),
            TransportState::Udp(_) => None,
        }
    }
}

/// How a socket should be closed by the I/O layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseMode {
    /// Shut down the write half only (app sent FIN, reads continue).
    WriteHalf,
    /// Tear the socket down entirely.
    Full,
}

/// Side-effect descriptions returned by engine operations. The engine itself
/// performs no I/O.
#[derive(Debug)]
pub enum EngineAction {
    OpenSocket {
        key: FlowKey,
    },
    WriteSocket {
        key: FlowKey,
        bytes: Vec<u8>,
    },
    WriteTun(IpPacket),
    CloseSocket {
        key: FlowKey,
        mode: CloseMode,
    },
    Drop {
        reason: DropReason,
    },
    MirrorToAnalyzer {
        flow_id: u64,
        direction: Direction,
        bytes: Vec<u8>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropReason {
    PureAck,
    DuplicateSyn,
    Retransmission,
    UnknownFlowNonSyn,
    TableFull,
    OutOfOrderBuffered,
    ReorderOverflow,
    PhaseMismatch,
    Malformed,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::PureAck => "pure-ack",
            DropReason::DuplicateSyn => "dup-syn",
            DropReason::Retransmission => "retransmit",
            DropReason::UnknownFlowNonSyn => "unknown-flow",
            DropReason::TableFull => "table-full",
            DropReason::OutOfOrderBuffered => "out-of-order",
            DropReason::ReorderOverflow => "reorder-overflow",
            DropReason::PhaseMismatch => "phase-mismatch",
            DropReason::Malformed => "malformed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SocketErrorKind {
    Refused,
    Reset,
    Timeout,
}

/// Record of a flow that finished, drained by the caller for analyzer
/// bookkeeping after executing the action batch.
#[derive(Debug, Clone)]
pub struct ClosedFlow {
    pub key: FlowKey,
    pub flow_id: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Default, Clone)]
pub struct EngineStats {
    pub pure_acks_discarded: u64,
    pub retransmissions: u64,
    pub unknown_flow_rst: u64,
    pub table_full_drops: u64,
    pub reorder_overflows: u64,
    pub flows_opened: u64,
    pub flows_closed: u64,
}

pub struct FlowEngine {
    cfg: EngineConfig,
    flows: HashMap<FlowKey, FlowRecord>,
    next_flow_id: u64,
    rng: StdRng,
    stats: EngineStats,
    closed: Vec<ClosedFlow>,
}

impl FlowEngine {
    pub fn new(cfg: EngineConfig) -> Self {
        FlowEngine {
            cfg,
            flows: HashMap::new(),
            next_flow_id: 1,
            rng: StdRng::from_entropy(),
            stats: EngineStats::default(),
            closed: Vec::new(),
        }
    }

    /// Deterministic engine for tests.
    pub fn with_seed(cfg: EngineConfig, seed: u64) -> Self {
        let mut e = Self::new(cfg);
        e.rng = StdRng::seed_from_u64(seed);
        e
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    pub fn flow_count(&self) -> usize {
        self.flows.len()
    }

    pub fn flow(&self, key: &FlowKey) -> Option<&FlowRecord> {
        self.flows.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &FlowKey> {
        self.flows.keys()
    }

    /// Flows that finished since the last drain.
    pub fn take_closed(&mut self) -> Vec<ClosedFlow> {
        std::mem::take(&mut self.closed)
    }

    /// The I/O layer reports the handle it assigned when executing OpenSocket.
    pub fn attach_socket(&mut self, key: &FlowKey, handle: u64) {
        if let Some(rec) = self.flows.get_mut(key) {
            rec.socket_handle = Some(handle);
            if let Some(tcp) = rec.tcp_mut() {
                if tcp.phase == TcpPhase::SynReceived {
                    tcp.phase = TcpPhase::Connecting;
                }
            }
        }
    }

    pub fn set_tls_status(&mut self, key: &FlowKey, status: TlsStatus) {
        if let Some(rec) = self.flows.get_mut(key) {
            rec.tls_status = status;
        }
    }

    /// Bytes queued toward the app but not yet sent (window pacing backlog).
    pub fn downlink_backlog(&self, key: &FlowKey) -> usize {
        self.flows
            .get(key)
            .and_then(|r| r.tcp())
            .map(|t| t.pending_down.len())
            .unwrap_or(0)
    }

    fn mss_for(&self, ip: &IpHeader) -> u16 {
        let overhead = match ip {
            IpHeader::V4(_) => 40,
            IpHeader::V6(_) => 60,
        };
        (self.cfg.mtu.saturating_sub(overhead)).max(536) as u16
    }

    /// Process one packet read from the TUN device.
    pub fn on_tun_packet(&mut self, p: IpPacket, now: Instant) -> Vec<EngineAction> {
        match p.transport {
            Transport::Tcp(_) => self.on_tun_tcp(p, now),
            Transport::Udp(_) => self.on_tun_udp(p, now),
        }
    }

    fn on_tun_udp(&mut self, p: IpPacket, now: Instant) -> Vec<EngineAction> {
        let key = FlowKey::from_outbound(&p);
        let payload = match p.transport {
            Transport::Udp(d) => d.payload,
            Transport::Tcp(_) => unreachable!(),
        };
        let mut actions = Vec::new();
        if !self.flows.contains_key(&key) {
            if self.flows.len() >= self.cfg.max_flows {
                self.stats.table_full_drops += 1;
                return vec![EngineAction::Drop {
                    reason: DropReason::TableFull,
                }];
            }
            let flow_id = self.next_flow_id;
            self.next_flow_id += 1;
            self.stats.flows_opened += 1;
            actions.push(EngineAction::OpenSocket { key });
            self.flows.insert(
                key,
                FlowRecord {
                    key,
                    transport: TransportState::Udp(UdpMapping),
                    socket_handle: None,
                    bytes_up: 0,
                    bytes_down: 0,
                    flow_id,
                    tls_status: TlsStatus::NotTls,
                    created_at: now,
                    last_activity: now,
                },
            );
        }
        let rec = self.flows.get_mut(&key).expect("just ensured");
        rec.last_activity = now;
        rec.bytes_up += payload.len() as u64;
        let flow_id = rec.flow_id;
        actions.push(EngineAction::WriteSocket {
            key,
            bytes: payload.clone(),
        });
        actions.push(EngineAction::MirrorToAnalyzer {
            flow_id,
            direction: Direction::Outbound,
            bytes: payload,
        });
        actions
    }

    fn on_tun_tcp(&mut self, p: IpPacket, now: Instant) -> Vec<EngineAction> {
        let key = FlowKey::from_outbound(&p);
        let flags = p.tcp().expect("tcp").flags;

        if !self.flows.contains_key(&key) {
            if flags.rst() {
                // RST for a flow we do not know: nothing to tear down.
                return vec![EngineAction::Drop {
                    reason: DropReason::UnknownFlowNonSyn,
                }];
            }
            if flags.syn() && !flags.ack() {
                return self.open_tcp_flow(&p, key, now);
            }
            // TCP data or ACK for an absent flow: answer with RST so the app
            // recovers quickly rather than retransmitting into a void.
            self.stats.unknown_flow_rst += 1;
            let rst = rst_for_unknown(&p, &key);
            return vec![
                EngineAction::WriteTun(rst),
                EngineAction::Drop {
                    reason: DropReason::UnknownFlowNonSyn,
                },
            ];
        }

        let seg = match p.transport {
            Transport::Tcp(seg) => seg,
            Transport::Udp(_) => unreachable!(),
        };

        let mut actions = Vec::new();
        let rec = self.flows.get_mut(&key).expect("checked above");
        rec.last_activity = now;

        if flags.rst() {
            let had_socket = rec.socket_handle.is_some();
            finish_flow(&mut self.flows, &mut self.closed, &mut self.stats, &key);
            if had_socket {
                actions.push(EngineAction::CloseSocket {
                    key,
                    mode: CloseMode::Full,
                });
            }
            return actions;
        }

        let tcp = rec.tcp_mut().expect("tcp key carries tcp state");

        // Window/ack bookkeeping happens for every app packet, including pure
        // ACKs that are otherwise discarded.
        tcp.app_window = seg.window;
        if flags.ack() && seq_lt(tcp.app_acked, seg.ack) && seq_le(seg.ack, tcp.local_seq) {
            tcp.app_acked = seg.ack;
        }

        match tcp.phase {
            TcpPhase::SynReceived | TcpPhase::Connecting => {
                if flags.syn() {
                    // SYN retransmit while the connect is in flight.
                    return vec![EngineAction::Drop {
                        reason: DropReason::DuplicateSyn,
                    }];
                }
                // Data before our SYN/ACK: the app retransmits after the
                // handshake completes.
                return vec![EngineAction::Drop {
                    reason: DropReason::PhaseMismatch,
                }];
            }
            TcpPhase::Closed => {
                return vec![EngineAction::Drop {
                    reason: DropReason::PhaseMismatch,
                }];
            }
            _ => {}
        }

        if flags.syn() {
            return vec![EngineAction::Drop {
                reason: DropReason::DuplicateSyn,
            }];
        }

        let payload_len = seg.payload.len();
        let payload = seg.payload;
        let seg_seq = seg.seq;
        let fin = flags.fin();

        if payload.is_empty() && !fin {
            // Pure ACK: its effect is abstracted by the socket interface.
            self.stats.pure_acks_discarded += 1;
            let mut acts = vec![EngineAction::Drop {
                reason: DropReason::PureAck,
            }];
            // A window update may unblock queued downlink data.
            self.flush_downlink(&key, &mut acts);
            return acts;
        }

        let mut deliver: Vec<u8> = Vec::new();
        let mut advanced = false;
        let mut drop_reason: Option<DropReason> = None;
        let mut retransmissions = 0u64;
        let mut reorder_overflows = 0u64;

        if !payload.is_empty() {
            if seg_seq == tcp.local_ack {
                tcp.local_ack = tcp.local_ack.wrapping_add(payload.len() as u32);
                deliver = payload;
                advanced = true;
            } else if seq_lt(seg_seq, tcp.local_ack) {
                let overlap = seq_diff(tcp.local_ack, seg_seq) as usize;
                if overlap >= payload.len() {
                    // Entirely old data: already delivered to the socket,
                    // which guarantees reliability. Re-ack.
                    retransmissions += 1;
                    drop_reason = Some(DropReason::Retransmission);
                } else {
                    deliver.extend_from_slice(&payload[overlap..]);
                    tcp.local_ack = tcp.local_ack.wrapping_add((payload.len() - overlap) as u32);
                    advanced = true;
                }
            } else {
                // Future segment: hold for in-order delivery, bounded.
                if tcp.reorder_bytes + payload.len() <= REORDER_CAP {
                    tcp.reorder_bytes += payload.len();
                    tcp.reorder.entry(seg_seq).or_insert(payload);
                    drop_reason = Some(DropReason::OutOfOrderBuffered);
                } else {
                    reorder_overflows += 1;
                    drop_reason = Some(DropReason::ReorderOverflow);
                }
            }

            if advanced {
                // Drain any buffered segments that are now contiguous.
                loop {
                    let Some((&bseq, _)) = tcp.reorder.iter().next() else {
                        break;
                    };
                    if seq_lt(tcp.local_ack, bseq) {
                        break;
                    }
                    let (bseq, chunk) = tcp.reorder.pop_first().expect("peeked");
                    tcp.reorder_bytes -= chunk.len();
                    let overlap = seq_diff(tcp.local_ack, bseq) as usize;
                    if overlap < chunk.len() {
                        deliver.extend_from_slice(&chunk[overlap..]);
                        tcp.local_ack =
                            tcp.local_ack.wrapping_add((chunk.len() - overlap) as u32);
                    }
                }
            }
        }

        let mut fin_handled = false;
        if fin {
            let fin_seq = seg_seq.wrapping_add(payload_len as u32);
            if fin_seq == tcp.local_ack {
                tcp.local_ack = tcp.local_ack.wrapping_add(1);
                fin_handled = true;
            }
            // An out-of-order or retransmitted FIN is covered by the ACK below.
        }

        let ack_pkt = build_tcp_packet(
            &key,
            TcpFlags::new(TcpFlags::ACK),
            tcp.local_seq,
            tcp.local_ack,
            Vec::new(),
            Vec::new(),
        );

        let flow_id = rec.flow_id;
        let intercepted = rec.tls_status == TlsStatus::Intercepted;
        if !deliver.is_empty() {
            rec.bytes_up += deliver.len() as u64;
        }
        self.stats.retransmissions += retransmissions;
        self.stats.reorder_overflows += reorder_overflows;

        if !deliver.is_empty() {
            actions.push(EngineAction::WriteSocket {
                key,
                bytes: deliver.clone(),
            });
            if !intercepted {
                actions.push(EngineAction::MirrorToAnalyzer {
                    flow_id,
                    direction: Direction::Outbound,
                    bytes: deliver,
                });
            }
        } else if let Some(reason) = drop_reason {
            actions.push(EngineAction::Drop { reason });
        }

        // Acknowledge what we have; also serves as the dup-ack on reordering.
        actions.push(EngineAction::WriteTun(ack_pkt));

        if fin_handled {
            let rec = self.flows.get_mut(&key).expect("still present");
            let tcp = rec.tcp_mut().expect("tcp");
            match tcp.phase {
                TcpPhase::Established => {
                    tcp.phase = TcpPhase::AppFinSent;
                    actions.push(EngineAction::CloseSocket {
                        key,
                        mode: CloseMode::WriteHalf,
                    });
                }
                TcpPhase::RemoteClosed => {
                    // Our FIN is already out; the conversation is over.
                    finish_flow(&mut self.flows, &mut self.closed, &mut self.stats, &key);
                    actions.push(EngineAction::CloseSocket {
                        key,
                        mode: CloseMode::Full,
                    });
                }
                _ => {}
            }
        }

        self.flush_downlink(&key, &mut actions);
        actions
    }

    fn open_tcp_flow(&mut self, p: &IpPacket, key: FlowKey, now: Instant) -> Vec<EngineAction> {
        if self.flows.len() >= self.cfg.max_flows {
            self.stats.table_full_drops += 1;
            return vec![EngineAction::Drop {
                reason: DropReason::TableFull,
            }];
        }
        let seg = p.tcp().expect("tcp");
        let local_isn: u32 = self.rng.gen();
        let device_mss = self.mss_for(&p.ip);
        let mss = packet::tcp_options_mss(&seg.options)
            .map(|m| m.min(device_mss))
            .unwrap_or(device_mss)
            .max(1);
        let flow_id = self.next_flow_id;
        self.next_flow_id += 1;
        self.stats.flows_opened += 1;
        self.flows.insert(
            key,
            FlowRecord {
                key,
                transport: TransportState::Tcp(TcpShadowState {
                    phase: TcpPhase::SynReceived,
                    local_seq: local_isn,
                    local_ack: seg.seq.wrapping_add(1),
                    app_isn: seg.seq,
                    local_isn,
                    app_window: seg.window,
                    mss,
                    app_acked: local_isn,
                    reorder: BTreeMap::new(),
                    reorder_bytes: 0,
                    pending_down: VecDeque::new(),
                    pending_fin: false,
                    fin_sent: false,
                }),
                socket_handle: None,
                bytes_up: 0,
                bytes_down: 0,
                flow_id,
                tls_status: TlsStatus::NotTls,
                created_at: now,
                last_activity: now,
            },
        );
        // The SYN/ACK is deferred until the real connect completes.
        vec![EngineAction::OpenSocket { key }]
    }

    /// The connect initiated by OpenSocket completed.
    pub fn on_socket_connected(&mut self, key: &FlowKey, now: Instant) -> Vec<EngineAction> {
        let Some(rec) = self.flows.get_mut(key) else {
            return Vec::new(); // flow gone (aborted by RST)
        };
        rec.last_activity = now;
        let Some(tcp) = rec.tcp_mut() else {
            return Vec::new(); // UDP mappings have no handshake
        };
        if tcp.phase != TcpPhase::Connecting && tcp.phase != TcpPhase::SynReceived {
            return Vec::new();
        }
        tcp.phase = TcpPhase::Established;
        tcp.local_seq = tcp.local_isn.wrapping_add(1); // SYN consumes one
        tcp.app_acked = tcp.local_seq; // assume lossless TUN delivery
        let syn_ack = build_tcp_packet(
            key,
            TcpFlags::new(TcpFlags::SYN | TcpFlags::ACK),
            tcp.local_isn,
            tcp.local_ack,
            packet::mss_option(tcp.mss),
            Vec::new(),
        );
        vec![EngineAction::WriteTun(syn_ack)]
    }

    /// Bytes arrived from the socket side (empty slice means remote EOF).
    pub fn on_socket_data(
        &mut self,
        key: &FlowKey,
        bytes: &[u8],
        now: Instant,
    ) -> Vec<EngineAction> {
        let Some(rec) = self.flows.get_mut(key) else {
            return Vec::new();
        };
        rec.last_activity = now;
        let flow_id = rec.flow_id;
        let intercepted = rec.tls_status == TlsStatus::Intercepted;

        let is_udp = matches!(rec.transport, TransportState::Udp(_));
        if is_udp {
            if bytes.is_empty() {
                return Vec::new();
            }
            rec.bytes_down += bytes.len() as u64;
            let dgram = build_udp_packet(key, bytes.to_vec());
            let mut actions = vec![EngineAction::WriteTun(dgram)];
            if !intercepted {
                actions.push(EngineAction::MirrorToAnalyzer {
                    flow_id,
                    direction: Direction::Inbound,
                    bytes: bytes.to_vec(),
                });
            }
            return actions;
        }

        let tcp = rec.tcp_mut().expect("tcp");
        if !matches!(tcp.phase, TcpPhase::Established | TcpPhase::AppFinSent) {
            return Vec::new();
        }
        let mut actions = Vec::new();
        if bytes.is_empty() {
            tcp.pending_fin = true;
        } else {
            tcp.pending_down.extend(bytes.iter().copied());
            rec.bytes_down += bytes.len() as u64;
            if !intercepted {
                actions.push(EngineAction::MirrorToAnalyzer {
                    flow_id,
                    direction: Direction::Inbound,
                    bytes: bytes.to_vec(),
                });
            }
        }
        self.flush_downlink(key, &mut actions);
        actions
    }

    /// Segment queued downlink bytes toward the app within its window.
    fn flush_downlink(&mut self, key: &FlowKey, actions: &mut Vec<EngineAction>) {
        let Some(rec) = self.flows.get_mut(key) else {
            return;
        };
        let Some(tcp) = rec.tcp_mut() else { return };
        if !matches!(tcp.phase, TcpPhase::Established | TcpPhase::AppFinSent) {
            return;
        }

        let mut segments: Vec<(u32, Vec<u8>)> = Vec::new();
        loop {
            if tcp.pending_down.is_empty() {
                break;
            }
            let in_flight = seq_diff(tcp.local_seq, tcp.app_acked) as usize;
            let window = tcp.app_window as usize;
            if in_flight >= window {
                break;
            }
            let budget = (window - in_flight).min(tcp.mss as usize);
            let take = budget.min(tcp.pending_down.len());
            if take == 0 {
                break;
            }
            let chunk: Vec<u8> = tcp.pending_down.drain(..take).collect();
            segments.push((tcp.local_seq, chunk));
            tcp.local_seq = tcp.local_seq.wrapping_add(take as u32);
        }

        let mut fin_seq = None;
        if tcp.pending_fin && tcp.pending_down.is_empty() && !tcp.fin_sent {
            tcp.fin_sent = true;
            fin_seq = Some(tcp.local_seq);
            tcp.local_seq = tcp.local_seq.wrapping_add(1); // FIN consumes one
            tcp.phase = match tcp.phase {
                TcpPhase::AppFinSent => TcpPhase::Closed,
                _ => TcpPhase::RemoteClosed,
            };
        }
        let now_closed = tcp.phase == TcpPhase::Closed;
        let local_ack = tcp.local_ack;

        for (seq_no, chunk) in segments {
            actions.push(EngineAction::WriteTun(build_tcp_packet(
                key,
                TcpFlags::new(TcpFlags::ACK | TcpFlags::PSH),
                seq_no,
                local_ack,
                Vec::new(),
                chunk,
            )));
        }
        if let Some(seq_no) = fin_seq {
            actions.push(EngineAction::WriteTun(build_tcp_packet(
                key,
                TcpFlags::new(TcpFlags::FIN | TcpFlags::ACK),
                seq_no,
                local_ack,
                Vec::new(),
                Vec::new(),
            )));
        }
        if now_closed {
            actions.push(EngineAction::CloseSocket {
                key: *key,
                mode: CloseMode::Full,
            });
            finish_flow(&mut self.flows, &mut self.closed, &mut self.stats, key);
        }
    }

    /// Socket-side failure (connect refused, reset, timeout).
    pub fn on_socket_error(
        &mut self,
        key: &FlowKey,
        kind: SocketErrorKind,
        now: Instant,
    ) -> Vec<EngineAction> {
        let _ = kind; // the app sees a reset either way
        let Some(rec) = self.flows.get_mut(key) else {
            return Vec::new(); // idempotent on already-closed flows
        };
        rec.last_activity = now;
        let mut actions = Vec::new();
        match &rec.transport {
            TransportState::Udp(_) => {
                actions.push(EngineAction::CloseSocket {
                    key: *key,
                    mode: CloseMode::Full,
                });
            }
            TransportState::Tcp(tcp) => {
                let (seq_no, ack_no) = match tcp.phase {
                    // Connect refused: RST the handshake, acking the app ISN.
                    TcpPhase::SynReceived | TcpPhase::Connecting => {
                        (0, tcp.app_isn.wrapping_add(1))
                    }
                    _ => (tcp.local_seq, tcp.local_ack),
                };
                actions.push(EngineAction::WriteTun(build_tcp_packet(
                    key,
                    TcpFlags::new(TcpFlags::RST | TcpFlags::ACK),
                    seq_no,
                    ack_no,
                    Vec::new(),
                    Vec::new(),
                )));
                actions.push(EngineAction::CloseSocket {
                    key: *key,
                    mode: CloseMode::Full,
                });
            }
        }
        finish_flow(&mut self.flows, &mut self.closed, &mut self.stats, key);
        actions
    }

    /// Remove flows idle beyond their TTLs.
    pub fn gc(&mut self, now: Instant) -> Vec<EngineAction> {
        let mut expired: Vec<FlowKey> = Vec::new();
        for (key, rec) in &self.flows {
            let ttl = match rec.transport {
                TransportState::Tcp(_) => self.cfg.tcp_idle_ttl,
                TransportState::Udp(_) => {
                    if key.remote.port() == 53 {
                        self.cfg.dns_idle_ttl
                    } else {
                        self.cfg.udp_idle_ttl
                    }
                }
            };
            if now.duration_since(rec.last_activity) >= ttl {
                expired.push(*key);
            }
        }
        let mut actions = Vec::new();
        for key in expired {
            self.teardown(&key, &mut actions);
        }
        actions
    }

    /// Tear down every flow (daemon shutdown): RST live TCP flows toward the
    /// app and close all sockets.
    pub fn drain_all(&mut self, _now: Instant) -> Vec<EngineAction> {
        let keys: Vec<FlowKey> = self.flows.keys().copied().collect();
        let mut actions = Vec::new();
        for key in keys {
            self.teardown(&key, &mut actions);
        }
        actions
    }

    fn teardown(&mut self, key: &FlowKey, actions: &mut Vec<EngineAction>) {
        if key.proto == TransportProto::Tcp {
            if let Some(tcp) = self.flows.get(key).and_then(|r| r.tcp()) {
                if !matches!(tcp.phase, TcpPhase::SynReceived | TcpPhase::Closed) {
                    actions.push(EngineAction::WriteTun(build_tcp_packet(
                        key,
                        TcpFlags::new(TcpFlags::RST | TcpFlags::ACK),
                        tcp.local_seq,
                        tcp.local_ack,
                        Vec::new(),
                        Vec::new(),
                    )));
                }
            }
        }
        actions.push(EngineAction::CloseSocket {
            key: *key,
            mode: CloseMode::Full,
        });
        finish_flow(&mut self.flows, &mut self.closed, &mut self.stats, key);
    }
}

fn finish_flow(
    flows: &mut HashMap<FlowKey, FlowRecord>,
    closed: &mut Vec<ClosedFlow>,
    stats: &mut EngineStats,
    key: &FlowKey,
) {
    if let Some(rec) = flows.remove(key) {
        stats.flows_closed += 1;
        closed.push(ClosedFlow {
            key: rec.key,
            flow_id: rec.flow_id,
            bytes_up: rec.bytes_up,
            bytes_down: rec.bytes_down,
        });
    }
}

/// Build a TCP packet traveling remote→app for a flow.
fn build_tcp_packet(
    key: &FlowKey,
    flags: TcpFlags,
    seq_no: u32,
    ack_no: u32,
    options: Vec<u8>,
    payload: Vec<u8>,
) -> IpPacket {
    IpPacket {
        ip: ip_header_inbound(key),
        transport: Transport::Tcp(TcpSegment {
            src_port: key.remote.port(),
            dst_port: key.app.port(),
            seq: seq_no,
            ack: ack_no,
            flags,
            window: ADVERTISED_WINDOW,
            urgent: 0,
            options,
            payload,
        }),
        ip_checksum_ok: true,
        transport_checksum_ok: Some(true),
    }
}

fn build_udp_packet(key: &FlowKey, payload: Vec<u8>) -> IpPacket {
    IpPacket {
        ip: ip_header_inbound(key),
        transport: Transport::Udp(UdpDatagram {
            src_port: key.remote.port(),
            dst_port: key.app.port(),
            checksum_present: true,
            payload,
        }),
        ip_checksum_ok: true,
        transport_checksum_ok: Some(true),
    }
}

/// IP header for a packet we synthesize toward the app.
fn ip_header_inbound(key: &FlowKey) -> IpHeader {
    match (key.remote.ip(), key.app.ip()) {
        (IpAddr::V4(src), IpAddr::V4(dst)) => IpHeader::V4(Ipv4Header {
            dscp_ecn: 0,
            identification: 0,
            flags_fragment: 0x4000, // DF
            ttl: 64,
            src,
            dst,
            options: vec![],
        }),
        (src, dst) => IpHeader::V6(Ipv6Header {
            traffic_class: 0,
            flow_label: 0,
            hop_limit: 64,
            src: match src {
                IpAddr::V6(a) => a,
                IpAddr::V4(a) => a.to_ipv6_mapped(),
            },
            dst: match dst {
                IpAddr::V6(a) => a,
                IpAddr::V4(a) => a.to_ipv6_mapped(),
            },
        }),
    }
}

/// RST responding to a segment for an unknown flow (mirrors RFC 793 reset
/// generation for a non-existent connection).
fn rst_for_unknown(p: &IpPacket, key: &FlowKey) -> IpPacket {
    let seg = p.tcp().expect("tcp");
    let (seq_no, ack_no, flags) = if seg.flags.ack() {
        (seg.ack, 0, TcpFlags::new(TcpFlags::RST))
    } else {
        let advance =
            seg.payload.len() as u32 + u32::from(seg.flags.syn()) + u32::from(seg.flags.fin());
        (
            0,
            seg.seq.wrapping_add(advance),
            TcpFlags::new(TcpFlags::RST | TcpFlags::ACK),
        )
    };
    build_tcp_packet(key, flags, seq_no, ack_no, Vec::new(), Vec::new())
}

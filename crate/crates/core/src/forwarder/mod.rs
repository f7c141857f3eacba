//! The polling forwarder loop.
//!
//! Alternates bounded read bursts between the TUN device and the socket set,
//! counts consecutive idle cycles, and sleeps `idle_sleep` once
//! `max_idle_cycles` empty iterations accumulate. Sleeping trades latency
//! for CPU; the bench harness measures exactly that trade-off.

mod sockets;

use crate::analyzer::{AnalyzerTx, CopyMsg, MsgTs};
use crate::engine::{CloseMode, DropReason, EngineAction, FlowEngine, SocketErrorKind, TlsStatus};
use crate::flow::{Direction, FlowKey, TransportProto};
use crate::packet::{self, ParseError};
use crate::tls::{self, AppStreamMsg, HelloDetect, ProxyEvent, TlsGate};
use crate::tun::{TunDevice, TunPacket};
use crossbeam_channel::{Receiver, RecvTimeoutError, Sender, TryRecvError};
use sockets::{ReadOutcome, SocketEvent, SocketSet};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Buffered Client Hello bytes beyond this force the direct path.
const TLS_PEEK_CAP: usize = 64 * 1024;
/// Stop reading a socket while this much downlink data is queued unsent.
const DOWNLINK_BACKLOG_CAP: usize = 256 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Performance,
    LowPower,
    Custom,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Performance => write!(f, "performance"),
            Mode::LowPower => write!(f, "lowpower"),
            Mode::Custom => write!(f, "custom"),
        }
    }
}

/// The four paper knobs plus the operational mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwarderConfig {
    pub idle_sleep: Duration,
    pub max_idle_cycles: u32,
    pub c_tun: usize,
    pub c_nio: usize,
    pub mode: Mode,
}

impl ForwarderConfig {
    pub fn performance() -> ForwarderConfig {
        ForwarderConfig {
            idle_sleep: Duration::from_millis(10),
            max_idle_cycles: 100,
            c_tun: 100,
            c_nio: 100,
            mode: Mode::Performance,
        }
    }

    pub fn low_power() -> ForwarderConfig {
        ForwarderConfig {
            idle_sleep: Duration::from_millis(100),
            max_idle_cycles: 100,
            c_tun: 100,
            c_nio: 100,
            mode: Mode::LowPower,
        }
    }

    pub fn custom(idle_sleep: Duration, max_idle_cycles: u32) -> ForwarderConfig {
        ForwarderConfig {
            idle_sleep,
            max_idle_cycles,
            c_tun: 100,
            c_nio: 100,
            mode: Mode::Custom,
        }
    }

    pub fn for_mode(mode: Mode) -> ForwarderConfig {
        match mode {
            Mode::Performance => Self::performance(),
            Mode::LowPower => Self::low_power(),
            Mode::Custom => Self::performance(),
        }
    }
}

impl Default for ForwarderConfig {
    fn default() -> Self {
        Self::performance()
    }
}

/// Shared, atomically swappable configuration: mode changes take effect at
/// the next loop cycle.
pub struct ConfigCell {
    inner: Mutex<ForwarderConfig>,
}

impl ConfigCell {
    pub fn new(cfg: ForwarderConfig) -> ConfigCell {
        ConfigCell {
            inner: Mutex::new(cfg),
        }
    }

    pub fn get(&self) -> ForwarderConfig {
        *self.inner.lock().unwrap()
    }

    pub fn set(&self, cfg: ForwarderConfig) {
        *self.inner.lock().unwrap() = cfg;
    }

    pub fn set_mode(&self, mode: Mode) -> ForwarderConfig {
        let cfg = ForwarderConfig::for_mode(mode);
        self.set(cfg);
        cfg
    }
}

/// One forwarded packet's accounting: processing time plus, where the
/// device double can observe it, time spent waiting to be picked up.
#[derive(Debug, Clone, Copy)]
pub struct LatencySample {
    pub t_proc: Duration,
    pub t_buff: Option<Duration>,
    pub direction: Direction,
    pub proto: TransportProto,
    pub new_flow: bool,
}

/// Per-cycle trace record (enabled on demand; acceptance checks use it).
#[derive(Debug, Clone, Copy)]
pub struct CycleRecord {
    pub tun_reads: u32,
    pub socket_reads: u32,
    pub idle_count_after: u32,
    pub slept: bool,
}

#[derive(Debug, Default)]
pub struct LoopStats {
    pub cycles: u64,
    pub tun_reads: u64,
    /// Socket-side reads in synthesized-packet equivalents.
    pub socket_reads: u64,
    pub sleeps: u64,
    pub tun_writes: u64,
    pub parse_errors: u64,
    pub malformed_drops: u64,
    pub drops: HashMap<&'static str, u64>,
    pub samples: Vec<LatencySample>,
    pub cycle_trace: Vec<CycleRecord>,
    pub config_echo: Option<ForwarderConfig>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ProbeStats {
    pub count: usize,
    pub mean: Duration,
    pub min: Duration,
    pub max: Duration,
}

impl ProbeStats {
    fn from_durations(values: impl Iterator<Item = Duration>) -> ProbeStats {
        let mut count = 0usize;
        let mut total = Duration::ZERO;
        let mut min = Duration::MAX;
        let mut max = Duration::ZERO;
        for v in values {
            count += 1;
            total += v;
            min = min.min(v);
            max = max.max(v);
        }
        if count == 0 {
            return ProbeStats::default();
        }
        ProbeStats {
            count,
            mean: total / count as u32,
            min,
            max,
        }
    }
}

impl LoopStats {
    /// Per-direction processing-time distribution, with new-flow first
    /// packets reported separately.
    pub fn latency_probe(&self) -> HashMap<(TransportProto, Direction, bool), ProbeStats> {
        let mut out = HashMap::new();
        for proto in [TransportProto::Tcp, TransportProto::Udp] {
            for direction in [Direction::Outbound, Direction::Inbound] {
                for new_flow in [false, true] {
                    let stats = ProbeStats::from_durations(
                        self.samples
                            .iter()
                            .filter(|s| {
                                s.proto == proto
                                    && s.direction == direction
                                    && s.new_flow == new_flow
                            })
                            .map(|s| s.t_proc),
                    );
                    if stats.count > 0 {
                        out.insert((proto, direction, new_flow), stats);
                    }
                }
            }
        }
        out
    }
}

/// Live counters the control plane reads while the loop runs.
#[derive(Debug, Default)]
pub struct SharedStatus {
    pub cycles: AtomicU64,
    pub sleeps: AtomicU64,
    pub tun_reads: AtomicU64,
    pub socket_reads: AtomicU64,
    pub flows: AtomicU64,
    pub tun_writes: AtomicU64,
    pub intercepted_flows: AtomicU64,
}

pub struct ForwarderOptions {
    /// Keep at most this many latency samples (oldest win; probes run within
    /// the cap).
    pub sample_cap: usize,
    pub trace_cycles: bool,
    /// Mirror-to-analyzer sampling rate in [0, 1], stored as f64 bits so the
    /// control plane can swap it live.
    pub sampling_rate: Arc<AtomicU64>,
    pub gc_interval: Duration,
}

impl Default for ForwarderOptions {
    fn default() -> Self {
        ForwarderOptions {
            sample_cap: 1 << 18,
            trace_cycles: false,
            sampling_rate: Arc::new(AtomicU64::new(1.0f64.to_bits())),
            gc_interval: Duration::from_secs(1),
        }
    }
}

pub fn sampling_rate_of(cell: &AtomicU64) -> f64 {
    f64::from_bits(cell.load(Ordering::Relaxed))
}

pub fn set_sampling_rate(cell: &AtomicU64, rate: f64) {
    cell.store(rate.clamp(0.0, 1.0).to_bits(), Ordering::Relaxed);
}

/// Per-flow forwarder-side state beyond what the engine tracks.
struct FlowMeta {
    flow_id: u64,
    mirrored: bool,
    tls: FlowTlsState,
}

enum FlowTlsState {
    /// TLS gate disabled or flow already classified as plain traffic.
    Direct,
    /// First app bytes are accumulating until classification.
    Pending {
        buf: Vec<u8>,
        held_mirrors: Vec<CopyMsg>,
    },
    /// Handed to a relay worker; app-bound bytes go through its channel.
    Proxied { app_tx: Sender<AppStreamMsg> },
}

pub struct Forwarder<T: TunDevice> {
    tun: T,
    engine: FlowEngine,
    cfg: Arc<ConfigCell>,
    analyzer: AnalyzerTx,
    gate: Option<Arc<TlsGate>>,
    stop: Receiver<()>,
    shared: Arc<SharedStatus>,
    opts: ForwarderOptions,

    sockets: SocketSet,
    flow_meta: HashMap<FlowKey, FlowMeta>,
    flow_keys_by_id: HashMap<u64, FlowKey>,
    proxy_evt_tx: Sender<ProxyEvent>,
    proxy_evt_rx: Receiver<ProxyEvent>,
    pending_tun_writes: std::collections::VecDeque<Vec<u8>>,
    stats: LoopStats,
    mss_estimate: usize,
    rng_state: u64,
}

impl<T: TunDevice> Forwarder<T> {
    pub fn new(
        tun: T,
        engine: FlowEngine,
        cfg: Arc<ConfigCell>,
        analyzer: AnalyzerTx,
        gate: Option<Arc<TlsGate>>,
        stop: Receiver<()>,
        shared: Arc<SharedStatus>,
        opts: ForwarderOptions,
    ) -> std::io::Result<Forwarder<T>> {
        let (proxy_evt_tx, proxy_evt_rx) = crossbeam_channel::unbounded();
        let mss_estimate = engine.config().mtu.saturating_sub(40).max(536);
        Ok(Forwarder {
            tun,
            engine,
            cfg,
            analyzer,
            gate,
            stop,
            shared,
            opts,
            sockets: SocketSet::new()?,
            flow_meta: HashMap::new(),
            flow_keys_by_id: HashMap::new(),
            proxy_evt_tx,
            proxy_evt_rx,
            pending_tun_writes: Default::default(),
            stats: LoopStats::default(),
            mss_estimate,
            rng_state: 0x853c49e6748fea9b ^ u64::from(std::process::id()),
        })
    }

    fn next_rand_unit(&mut self) -> f64 {
        // xorshift is plenty for per-flow sampling decisions.
        self.rng_state ^= self.rng_state << 13;
        self.rng_state ^= self.rng_state >> 7;
        self.rng_state ^= self.rng_state << 17;
        (self.rng_state >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Run the loop until the stop channel fires or the device closes.
    pub fn run(mut self) -> LoopStats {
        let mut idle_count: u32 = 0;
        let mut last_gc = Instant::now();

        loop {
            let cfg = self.cfg.get();

            // TUN phase: up to c_tun packets, then switch regardless.
            let packets = match self.tun.read_packets(cfg.c_tun) {
                Ok(p) => p,
                Err(e) => {
                    log::error!("tun read failed: {e}");
                    break;
                }
            };
            let cycle_tun_reads = packets.len() as u32;
            for pkt in packets {
                self.process_tun_packet(pkt);
            }
            if self.tun.is_closed() {
                log::info!("tun device closed; shutting down");
                break;
            }

            // Socket phase: up to c_nio packet-equivalents across ready
            // sockets and proxy channels.
            let cycle_socket_reads = self.socket_phase(cfg.c_nio);

            // Retry TUN writes the device refused earlier.
            self.flush_pending_tun();

            // The idle count advances only when both sides yielded nothing.
            if cycle_tun_reads == 0 && cycle_socket_reads == 0 {
                idle_count += 1;
            } else {
                idle_count = 0;
            }

            self.stats.cycles += 1;
            self.stats.tun_reads += u64::from(cycle_tun_reads);
            self.stats.socket_reads += u64::from(cycle_socket_reads);

            let mut slept = false;
            if idle_count >= cfg.max_idle_cycles {
                slept = true;
                self.stats.sleeps += 1;
                idle_count = 0;
                // Interruptible by shutdown only; packets arriving during the
                // sleep wait it out (that is the measured t_buff penalty).
                match self.stop.recv_timeout(cfg.idle_sleep) {
                    Ok(()) | Err(RecvTimeoutError::Disconnected) => {
                        self.trace_cycle(cycle_tun_reads, cycle_socket_reads, idle_count, true);
                        break;
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                }
            } else {
                match self.stop.try_recv() {
                    Ok(()) | Err(TryRecvError::Disconnected) => break,
                    Err(TryRecvError::Empty) => {}
                }
            }
            self.trace_cycle(cycle_tun_reads, cycle_socket_reads, idle_count, slept);

            if last_gc.elapsed() >= self.opts.gc_interval {
                last_gc = Instant::now();
                let now = Instant::now();
                let actions = self.engine.gc(now);
                self.execute(actions, now);
                self.finish_closed_flows();
            }

            if self.stats.cycles % 64 == 0 {
                self.publish_status();
            }
        }

        // Drain: reset live flows toward the app, close sockets, flush events.
        let now = Instant::now();
        let actions = self.engine.drain_all(now);
        self.execute(actions, now);
        self.finish_closed_flows();
        self.flush_pending_tun();
        self.publish_status();
        self.stats.config_echo = Some(self.cfg.get());
        self.stats
    }

    fn trace_cycle(&mut self, tun_reads: u32, socket_reads: u32, idle_after: u32, slept: bool) {
        if !self.opts.trace_cycles || self.stats.cycle_trace.len() >= 4_000_000 {
            return;
        }
        self.stats.cycle_trace.push(CycleRecord {
            tun_reads,
            socket_reads,
            idle_count_after: idle_after,
            slept,
        });
    }

    fn publish_status(&self) {
        let s = &self.shared;
        s.cycles.store(self.stats.cycles, Ordering::Relaxed);
        s.sleeps.store(self.stats.sleeps, Ordering::Relaxed);
        s.tun_reads.store(self.stats.tun_reads, Ordering::Relaxed);
        s.socket_reads
            .store(self.stats.socket_reads, Ordering::Relaxed);
        s.tun_writes.store(self.stats.tun_writes, Ordering::Relaxed);
        s.flows
            .store(self.engine.flow_count() as u64, Ordering::Relaxed);
    }

    fn record_sample(&mut self, sample: LatencySample) {
        if self.stats.samples.len() < self.opts.sample_cap {
            self.stats.samples.push(sample);
        }
    }

    fn process_tun_packet(&mut self, pkt: TunPacket) {
        let t0 = Instant::now();
        let parsed = match packet::parse_packet(&pkt.bytes) {
            Ok(p) => p,
            Err(ParseError::UnsupportedProtocol(_))
            | Err(ParseError::Ipv6ExtensionHeader(_))
            | Err(ParseError::UnsupportedVersion(_)) => {
                // Not forwardable over plain sockets: count and drop.
                self.stats.malformed_drops += 1;
                return;
            }
            Err(_) => {
                self.stats.parse_errors += 1;
                return;
            }
        };
        let proto = match parsed.transport {
            packet::Transport::Tcp(_) => TransportProto::Tcp,
            packet::Transport::Udp(_) => TransportProto::Udp,
        };
        let actions = self.engine.on_tun_packet(parsed, t0);
        let new_flow = actions
            .iter()
            .any(|a| matches!(a, EngineAction::OpenSocket { .. }));
        self.execute(actions, t0);
        self.finish_closed_flows();
        self.record_sample(LatencySample {
            t_proc: t0.elapsed(),
            t_buff: pkt.arrived.map(|a| t0.saturating_duration_since(a)),
            direction: Direction::Outbound,
            proto,
            new_flow,
        });
    }

    /// One socket-phase pass. Returns packet-equivalents read.
    fn socket_phase(&mut self, budget_cap: usize) -> u32 {
        let mut budget = budget_cap;
        let mut equivalents: u32 = 0;

        for ev in self.sockets.poll_events() {
            match ev {
                SocketEvent::Connected(key) => {
                    let now = Instant::now();
                    let actions = self.engine.on_socket_connected(&key, now);
                    self.execute(actions, now);
                }
                SocketEvent::ConnectFailed(key) => {
                    let now = Instant::now();
                    let actions =
                        self.engine
                            .on_socket_error(&key, SocketErrorKind::Refused, now);
                    self.execute(actions, now);
                    self.finish_closed_flows();
                }
                SocketEvent::Writable(key) => {
                    self.sockets.flush_writes(&key);
                }
            }
        }

        // Read from ready sockets within the budget. The chunk size is
        // capped so one read cannot blow the packet-equivalent bound.
        while budget > 0 {
            let max_bytes = (budget * self.mss_estimate).min(64 * 1024);
            let Some(read) = self.sockets.read_next_ready(max_bytes) else {
                break;
            };
            let now = Instant::now();
            match read {
                ReadOutcome::Data { key, bytes } => {
                    let used = bytes.len().div_ceil(self.mss_estimate).max(1);
                    budget = budget.saturating_sub(used);
                    equivalents += used as u32;
                    let proto = key.proto;
                    let actions = self.engine.on_socket_data(&key, &bytes, now);
                    self.execute(actions, now);
                    self.pause_reads_if_backlogged(&key);
                    self.record_sample(LatencySample {
                        t_proc: now.elapsed(),
                        t_buff: None,
                        direction: Direction::Inbound,
                        proto,
                        new_flow: false,
                    });
                }
                ReadOutcome::Eof { key } => {
                    let actions = self.engine.on_socket_data(&key, &[], now);
                    self.execute(actions, now);
                    self.finish_closed_flows();
                }
                ReadOutcome::Error { key } => {
                    let actions = self
                        .engine
                        .on_socket_error(&key, SocketErrorKind::Reset, now);
                    self.execute(actions, now);
                    self.finish_closed_flows();
                }
            }
        }

        // Proxy workers' output counts toward the same budget.
        while budget > 0 {
            let evt = match self.proxy_evt_rx.try_recv() {
                Ok(e) => e,
                Err(_) => break,
            };
            let now = Instant::now();
            match evt {
                ProxyEvent::Connected { .. } => {}
                ProxyEvent::ConnectFailed { key } => {
                    let actions =
                        self.engine
                            .on_socket_error(&key, SocketErrorKind::Refused, now);
                    self.execute(actions, now);
                    self.finish_closed_flows();
                }
                ProxyEvent::Data { key, bytes } => {
                    let used = bytes.len().div_ceil(self.mss_estimate).max(1);
                    budget = budget.saturating_sub(used);
                    equivalents += used as u32;
                    let actions = self.engine.on_socket_data(&key, &bytes, now);
                    self.execute(actions, now);
                    self.record_sample(LatencySample {
                        t_proc: now.elapsed(),
                        t_buff: None,
                        direction: Direction::Inbound,
                        proto: TransportProto::Tcp,
                        new_flow: false,
                    });
                }
                ProxyEvent::Eof { key } => {
                    let actions = self.engine.on_socket_data(&key, &[], now);
                    self.execute(actions, now);
                    self.finish_closed_flows();
                }
                ProxyEvent::Error { key } => {
                    let actions = self
                        .engine
                        .on_socket_error(&key, SocketErrorKind::Reset, now);
                    self.execute(actions, now);
                    self.finish_closed_flows();
                }
            }
        }

        equivalents
    }

    fn pause_reads_if_backlogged(&mut self, key: &FlowKey) {
        let paused = self.engine.downlink_backlog(key) > DOWNLINK_BACKLOG_CAP;
        self.sockets.set_read_paused(key, paused);
    }

    fn execute(&mut self, actions: Vec<EngineAction>, now: Instant) {
        for action in actions {
            match action {
                EngineAction::OpenSocket { key } => self.open_socket(key),
                EngineAction::WriteSocket { key, bytes } => self.write_socket(key, bytes, now),
                EngineAction::WriteTun(pkt) => self.write_tun(pkt),
                EngineAction::CloseSocket { key, mode } => self.close_socket(key, mode),
                EngineAction::Drop { reason } => {
                    *self.stats.drops.entry(reason.as_str()).or_insert(0) += 1;
                    if reason == DropReason::TableFull {
                        log::warn!("flow table full; dropping new flow");
                    }
                }
                EngineAction::MirrorToAnalyzer {
                    flow_id,
                    direction,
                    bytes,
                } => self.mirror(flow_id, direction, bytes),
            }
        }
    }

    fn open_socket(&mut self, key: FlowKey) {
        let Some(rec) = self.engine.flow(&key) else {
            return;
        };
        let flow_id = rec.flow_id;
        let rate = sampling_rate_of(&self.opts.sampling_rate);
        let mirrored = rate >= 1.0 || (rate > 0.0 && self.next_rand_unit() < rate);
        let tls_state = if self.gate.is_some() && key.proto == TransportProto::Tcp {
            FlowTlsState::Pending {
                buf: Vec::new(),
                held_mirrors: Vec::new(),
            }
        } else {
            FlowTlsState::Direct
        };
        self.flow_meta.insert(
            key,
            FlowMeta {
                flow_id,
                mirrored,
                tls: tls_state,
            },
        );
        self.flow_keys_by_id.insert(flow_id, key);

        match self.sockets.open(&key) {
            Ok(token) => {
                self.engine.attach_socket(&key, token);
            }
            Err(e) => {
                log::debug!("socket open failed for {key}: {e}");
                let now = Instant::now();
                let actions = self
                    .engine
                    .on_socket_error(&key, SocketErrorKind::Refused, now);
                self.execute(actions, now);
                self.finish_closed_flows();
                return;
            }
        }

        if mirrored {
            let _ = self.analyzer.enqueue(CopyMsg::FlowOpened {
                flow_id,
                key,
                ts: MsgTs::now(),
            });
        }
    }

    fn write_socket(&mut self, key: FlowKey, bytes: Vec<u8>, now: Instant) {
        match self.flow_meta.get_mut(&key) {
            Some(FlowMeta {
                tls: FlowTlsState::Proxied { app_tx },
                ..
            }) => {
                let _ = app_tx.send(AppStreamMsg::Bytes(bytes));
            }
            Some(FlowMeta {
                tls: FlowTlsState::Pending { buf, .. },
                ..
            }) => {
                buf.extend_from_slice(&bytes);
                self.classify_pending(&key, now);
            }
            _ => {
                self.sockets.write(&key, &bytes);
            }
        }
    }

    /// Decide what to do with a flow whose first app bytes are buffered.
    fn classify_pending(&mut self, key: &FlowKey, now: Instant) {
        let Some(gate) = self.gate.clone() else {
            self.flush_pending_direct(key);
            return;
        };
        let Some(FlowMeta {
            tls: FlowTlsState::Pending { buf, .. },
            flow_id,
            ..
        }) = self.flow_meta.get(key)
        else {
            return;
        };
        let flow_id = *flow_id;
        match tls::detect_client_hello(buf) {
            HelloDetect::Truncated if buf.len() <= TLS_PEEK_CAP => {} // keep buffering
            HelloDetect::Hello(meta) if gate.should_intercept(&meta, key.remote, now) => {
                // Hand off: the proxy owns the upstream side from here on.
                let Some(m) = self.flow_meta.get_mut(key) else {
                    return;
                };
                let FlowTlsState::Pending { buf, .. } =
                    std::mem::replace(&mut m.tls, FlowTlsState::Direct)
                else {
                    return;
                };
                self.sockets.close(key, CloseMode::Full);
                self.engine.set_tls_status(key, TlsStatus::Intercepted);
                self.shared
                    .intercepted_flows
                    .fetch_add(1, Ordering::Relaxed);
                let app_tx = gate.spawn_flow(*key, flow_id, meta, buf, self.proxy_evt_tx.clone());
                if let Some(m) = self.flow_meta.get_mut(key) {
                    m.tls = FlowTlsState::Proxied { app_tx };
                }
            }
            HelloDetect::Hello(_) => {
                // Whitelisted host: relay unmodified.
                self.engine.set_tls_status(key, TlsStatus::Whitelisted);
                gate.stats.lock().unwrap().bypassed += 1;
                self.flush_pending_direct(key);
            }
            _ => {
                // Not TLS (or hopelessly large): direct path.
                self.flush_pending_direct(key);
            }
        }
    }

    fn flush_pending_direct(&mut self, key: &FlowKey) {
        let Some(meta) = self.flow_meta.get_mut(key) else {
            return;
        };
        let FlowTlsState::Pending { buf, held_mirrors } =
            std::mem::replace(&mut meta.tls, FlowTlsState::Direct)
        else {
            return;
        };
        let mirrored = meta.mirrored;
        if !buf.is_empty() {
            self.sockets.write(key, &buf);
        }
        if mirrored {
            for msg in held_mirrors {
                let _ = self.analyzer.enqueue(msg);
            }
        }
    }

    fn write_tun(&mut self, pkt: packet::IpPacket) {
        let bytes = match packet::serialize_packet(&pkt, self.tun.mtu()) {
            Ok(b) => b,
            Err(e) => {
                log::error!("packet serialization failed: {e}");
                return;
            }
        };
        if !self.pending_tun_writes.is_empty() {
            self.pending_tun_writes.push_back(bytes);
            return;
        }
        match self.tun.write_packet(&bytes) {
            Ok(()) => self.stats.tun_writes += 1,
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                self.pending_tun_writes.push_back(bytes);
            }
            Err(e) => {
                log::debug!("tun write failed: {e}");
            }
        }
    }

    fn flush_pending_tun(&mut self) {
        while let Some(bytes) = self.pending_tun_writes.front() {
            match self.tun.write_packet(bytes) {
                Ok(()) => {
                    self.stats.tun_writes += 1;
                    self.pending_tun_writes.pop_front();
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                Err(_) => {
                    self.pending_tun_writes.pop_front();
                }
            }
        }
    }

    fn close_socket(&mut self, key: FlowKey, mode: CloseMode) {
        if let Some(FlowMeta {
            tls: FlowTlsState::Proxied { app_tx },
            ..
        }) = self.flow_meta.get(&key)
        {
            let _ = app_tx.send(AppStreamMsg::Shutdown);
            if mode == CloseMode::Full {
                if let Some(m) = self.flow_meta.get_mut(&key) {
                    m.tls = FlowTlsState::Direct;
                }
            }
            return;
        }
        self.sockets.close(&key, mode);
    }

    fn mirror(&mut self, flow_id: u64, direction: Direction, bytes: Vec<u8>) {
        let Some(key) = self.flow_keys_by_id.get(&flow_id).copied() else {
            return;
        };
        let Some(meta) = self.flow_meta.get_mut(&key) else {
            return;
        };
        if !meta.mirrored {
            return;
        }
        let msg = CopyMsg::Data {
            flow_id,
            direction,
            bytes,
            ts: MsgTs::now(),
        };
        match &mut meta.tls {
            FlowTlsState::Pending { held_mirrors, .. } => {
                held_mirrors.push(msg);
                if direction == Direction::Inbound {
                    // Server spoke first: this cannot be a client hello flow.
                    self.flush_pending_direct(&key);
                }
            }
            FlowTlsState::Proxied { .. } => {
                // Cleartext copies come from the relay worker instead.
            }
            FlowTlsState::Direct => {
                let _ = self.analyzer.enqueue(msg);
            }
        }
    }

    /// After engine calls, clean up state for flows the engine removed and
    /// emit their FlowClosed events.
    fn finish_closed_flows(&mut self) {
        for closed in self.engine.take_closed() {
            if let Some(meta) = self.flow_meta.remove(&closed.key) {
                if let FlowTlsState::Proxied { app_tx } = meta.tls {
                    let _ = app_tx.send(AppStreamMsg::Shutdown);
                }
                if meta.mirrored {
                    let _ = self.analyzer.enqueue(CopyMsg::FlowClosed {
                        flow_id: closed.flow_id,
                        bytes_up: closed.bytes_up,
                        bytes_down: closed.bytes_down,
                        ts: MsgTs::now(),
                    });
                }
            }
            self.flow_keys_by_id.remove(&closed.flow_id);
            self.sockets.close(&closed.key, CloseMode::Full);
        }
    }
}

#[cfg(test)]
mod tests;

//! The off-path traffic analyzer.
//!
//! Consumes mirrored flow data from a bounded queue (so the forwarding path
//! never blocks on analysis), parses DNS/HTTP/TLS, decompresses bodies,
//! scans for sensitive-value leaks, attributes flows to processes and
//! hostnames, and emits JSONL events.

pub mod attribution;
pub mod dns;
pub mod events;
pub mod http;
pub mod patterns;
pub mod pcap;
pub mod replay;

use crate::flow::{Direction, FlowKey, TransportProto};
use crate::tls::{self, HelloDetect, TlsFlowMeta};
use attribution::{ProcAttribution, ProcessInfo};
use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TrySendError};
use dns::{DnsCache, DnsTracker};
use events::{AnalyzerEvent, EventSink, EventTs, LeakLocation};
use http::HttpStreamParser;
use patterns::{LeakEncoding, PatternSet};
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

/// Default bounded-queue capacity, in packet copies.
pub const DEFAULT_QUEUE_CAPACITY: usize = 1000;
/// Scan at most this many body bytes per message.
pub const DEFAULT_BODY_CAP: usize = 1 << 20;
/// Protocol classification gives up after this many stream bytes.
const CLASSIFY_LIMIT: usize = 64 * 1024;

/// Timestamps captured where the copy was taken (in the forwarding path),
/// so analyzer latency does not skew transaction timing.
#[derive(Debug, Clone, Copy)]
pub struct MsgTs {
    pub mono: Instant,
    pub wall: SystemTime,
}

impl MsgTs {
    pub fn now() -> MsgTs {
        MsgTs {
            mono: Instant::now(),
            wall: SystemTime::now(),
        }
    }
}

/// Copies crossing the forwarder→analyzer queue.
#[derive(Debug)]
pub enum CopyMsg {
    FlowOpened {
        flow_id: u64,
        key: FlowKey,
        ts: MsgTs,
    },
    Data {
        flow_id: u64,
        direction: Direction,
        bytes: Vec<u8>,
        ts: MsgTs,
    },
    TlsMeta {
        flow_id: u64,
        meta: TlsFlowMeta,
        ts: MsgTs,
    },
    FlowClosed {
        flow_id: u64,
        bytes_up: u64,
        bytes_down: u64,
        ts: MsgTs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueResult {
    Accepted,
    Dropped,
}

/// Producer handle: never blocks; a full queue drops the copy and counts it.
#[derive(Clone)]
pub struct AnalyzerTx {
    tx: Sender<CopyMsg>,
    drops: Arc<AtomicU64>,
}

impl AnalyzerTx {
    pub fn enqueue(&self, msg: CopyMsg) -> EnqueueResult {
        match self.tx.try_send(msg) {
            Ok(()) => EnqueueResult::Accepted,
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                self.drops.fetch_add(1, Ordering::Relaxed);
                EnqueueResult::Dropped
            }
        }
    }

    pub fn dropped(&self) -> u64 {
        self.drops.load(Ordering::Relaxed)
    }

    /// A disconnected sender that counts every enqueue as a drop (used when
    /// the analyzer is disabled entirely).
    pub fn disabled() -> AnalyzerTx {
        let (tx, _rx) = bounded(0);
        AnalyzerTx {
            tx,
            drops: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Assemble from raw parts (test plumbing).
    pub fn from_parts(tx: Sender<CopyMsg>, drops: Arc<AtomicU64>) -> AnalyzerTx {
        AnalyzerTx { tx, drops }
    }
}

pub struct AnalyzerConfig {
    pub queue_capacity: usize,
    pub patterns: PatternSet,
    pub body_cap: usize,
    /// Resolve flow→process via proc tables (live gateway only).
    pub attribution: bool,
    /// When non-empty, only flows from these process names produce events.
    pub target_processes: Vec<String>,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        AnalyzerConfig {
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            patterns: PatternSet::empty(),
            body_cap: DEFAULT_BODY_CAP,
            attribution: false,
            target_processes: Vec::new(),
        }
    }
}

/// Consumer-side handle for the daemon: worker thread control and counters.
pub struct AnalyzerHandle {
    pub tx: AnalyzerTx,
    join: Option<std::thread::JoinHandle<AnalyzerReport>>,
    pause: Arc<AtomicBool>,
    events_written: Arc<AtomicU64>,
    queue_len: Arc<AtomicU64>,
}

impl AnalyzerHandle {
    /// Test hook: stall the consumer so the queue backs up.
    pub fn set_paused(&self, paused: bool) {
        self.pause.store(paused, Ordering::SeqCst);
    }

    pub fn events_written(&self) -> u64 {
        self.events_written.load(Ordering::Relaxed)
    }

    pub fn queue_len(&self) -> u64 {
        self.queue_len.load(Ordering::Relaxed)
    }

    pub fn dropped(&self) -> u64 {
        self.tx.dropped()
    }

    /// Disconnect producers and wait for the worker to drain and finish.
    pub fn shutdown(mut self) -> AnalyzerReport {
        let AnalyzerHandle { tx, join, .. } = &mut self;
        drop(std::mem::replace(tx, AnalyzerTx::disabled()));
        join.take()
            .map(|j| j.join().unwrap_or_default())
            .unwrap_or_default()
    }
}

#[derive(Debug, Default, Clone)]
pub struct AnalyzerReport {
    pub events: u64,
    pub leaks: u64,
    pub dns_transactions: u64,
    pub http_transactions: u64,
    pub processed_msgs: u64,
}

/// Spawn the analyzer worker thread feeding `sink`.
pub fn spawn(cfg: AnalyzerConfig, sink: EventSink) -> AnalyzerHandle {
    let (tx, rx) = bounded(cfg.queue_capacity);
    let drops = Arc::new(AtomicU64::new(0));
    let pause = Arc::new(AtomicBool::new(false));
    let events_written = Arc::new(AtomicU64::new(0));
    let queue_len = Arc::new(AtomicU64::new(0));

    let worker_pause = pause.clone();
    let worker_events = events_written.clone();
    let worker_queue = queue_len.clone();
    let join = std::thread::Builder::new()
        .name("analyzer".into())
        .spawn(move || {
            let mut worker = Worker::new(cfg, sink);
            worker.run(rx, worker_pause, worker_events, worker_queue)
        })
        .expect("spawn analyzer");

    AnalyzerHandle {
        tx: AnalyzerTx { tx, drops },
        join: Some(join),
        pause,
        events_written,
        queue_len,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProtoClass {
    Unclassified,
    Dns,
    Http,
    Tls,
    Opaque,
}

struct FlowState {
    key: FlowKey,
    class: ProtoClass,
    /// Uplink prefix kept until the flow is classified.
    peek: Vec<u8>,
    http_req: HttpStreamParser,
    http_resp: HttpStreamParser,
    /// Pending request fields awaiting their response for pairing.
    open_requests: std::collections::VecDeque<(String, Option<String>, String)>,
    hostname: Option<String>,
    process: Option<ProcessInfo>,
    /// Suppress events when a process target filter excludes this flow.
    reportable: bool,
    tls_meta_seen: bool,
    /// Tail bytes carried across chunks so patterns straddling a boundary
    /// still match (per direction).
    carry_up: Vec<u8>,
    carry_down: Vec<u8>,
}

/// The analyzer worker: single consumer of the copy queue.
pub struct Worker {
    cfg: AnalyzerConfig,
    sink: EventSink,
    flows: HashMap<u64, FlowState>,
    dns_cache: DnsCache,
    dns_tracker: DnsTracker,
    attribution: ProcAttribution,
    epoch: Instant,
    report: AnalyzerReport,
}

impl Worker {
    pub fn new(cfg: AnalyzerConfig, sink: EventSink) -> Worker {
        Worker {
            cfg,
            sink,
            flows: HashMap::new(),
            dns_cache: DnsCache::new(),
            dns_tracker: DnsTracker::new(),
            attribution: ProcAttribution::new(Duration::from_secs(30)),
            epoch: Instant::now(),
            report: AnalyzerReport::default(),
        }
    }

    /// Override the monotonic epoch (replay uses the capture start).
    pub fn set_epoch(&mut self, epoch: Instant) {
        self.epoch = epoch;
    }

    fn run(
        &mut self,
        rx: Receiver<CopyMsg>,
        pause: Arc<AtomicBool>,
        events_out: Arc<AtomicU64>,
        queue_len: Arc<AtomicU64>,
    ) -> AnalyzerReport {
        loop {
            if pause.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(2));
                queue_len.store(rx.len() as u64, Ordering::Relaxed);
                continue;
            }
            match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(msg) => {
                    self.process_msg(msg);
                    events_out.store(self.sink.events_written, Ordering::Relaxed);
                    queue_len.store(rx.len() as u64, Ordering::Relaxed);
                }
                Err(RecvTimeoutError::Timeout) => {
                    let _ = self.sink.flush();
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        // Producers are gone: flush what remains.
        let flow_ids: Vec<u64> = self.flows.keys().copied().collect();
        for id in flow_ids {
            self.flush_http(id);
        }
        let _ = self.sink.flush();
        events_out.store(self.sink.events_written, Ordering::Relaxed);
        self.report.events = self.sink.events_written;
        self.report.clone()
    }

    fn ts(&self, msg_ts: &MsgTs) -> EventTs {
        EventTs {
            mono_us: msg_ts
                .mono
                .saturating_duration_since(self.epoch)
                .as_micros() as u64,
            wall_unix_ms: events::wall_unix_ms(msg_ts.wall),
        }
    }

    fn emit(&mut self, flow_id: u64, event: AnalyzerEvent) {
        let reportable = self
            .flows
            .get(&flow_id)
            .map(|f| f.reportable)
            .unwrap_or(true);
        if !reportable {
            return;
        }
        if self.sink.write_event(&event).is_err() {
            log::warn!("analyzer sink write failed");
        }
    }

    /// Process one queue message (public so the replay path can drive the
    /// worker synchronously).
    pub fn process_msg(&mut self, msg: CopyMsg) {
        self.report.processed_msgs += 1;
        match msg {
            CopyMsg::FlowOpened { flow_id, key, ts } => self.on_flow_opened(flow_id, key, ts),
            CopyMsg::Data {
                flow_id,
                direction,
                bytes,
                ts,
            } => self.on_data(flow_id, direction, &bytes, ts),
            CopyMsg::TlsMeta { flow_id, meta, ts } => {
                if let Some(f) = self.flows.get_mut(&flow_id) {
                    f.tls_meta_seen = true;
                    if f.class == ProtoClass::Unclassified {
                        f.class = ProtoClass::Tls;
                    }
                }
                let ets = self.ts(&ts);
                self.emit(flow_id, AnalyzerEvent::TlsMetadata { flow_id, meta, ts: ets });
            }
            CopyMsg::FlowClosed {
                flow_id,
                bytes_up,
                bytes_down,
                ts,
            } => {
                self.flush_http(flow_id);
                let ets = self.ts(&ts);
                self.emit(
                    flow_id,
                    AnalyzerEvent::FlowClosed {
                        flow_id,
                        bytes_up,
                        bytes_down,
                        ts: ets,
                    },
                );
                self.flows.remove(&flow_id);
            }
        }
    }

    fn on_flow_opened(&mut self, flow_id: u64, key: FlowKey, ts: MsgTs) {
        let hostname = self
            .dns_cache
            .lookup(key.remote.ip(), ts.mono)
            .map(str::to_string);
        let process = if self.cfg.attribution {
            self.attribution.attribute(&key, ts.mono)
        } else {
            None
        };
        let reportable = if self.cfg.target_processes.is_empty() {
            true
        } else {
            process
                .as_ref()
                .map(|p| self.cfg.target_processes.iter().any(|t| t == &p.name))
                .unwrap_or(false)
        };

        let state = FlowState {
            key,
            class: if key.proto == TransportProto::Udp
                && (key.remote.port() == 53 || key.app.port() == 53)
            {
                ProtoClass::Dns
            } else {
                ProtoClass::Unclassified
            },
            peek: Vec::new(),
            http_req: HttpStreamParser::request(self.cfg.body_cap),
            http_resp: HttpStreamParser::response(self.cfg.body_cap),
            open_requests: Default::default(),
            hostname: hostname.clone(),
            process: process.clone(),
            reportable,
            tls_meta_seen: false,
            carry_up: Vec::new(),
            carry_down: Vec::new(),
        };
        self.flows.insert(flow_id, state);

        let (app, remote) = events::key_endpoints(&key);
        let ets = self.ts(&ts);
        self.emit(
            flow_id,
            AnalyzerEvent::FlowOpened {
                flow_id,
                proto: key.proto,
                app,
                remote,
                process,
                hostname,
                ts: ets,
            },
        );
    }

    fn on_data(&mut self, flow_id: u64, direction: Direction, bytes: &[u8], ts: MsgTs) {
        let Some(flow) = self.flows.get_mut(&flow_id) else {
            return;
        };
        let class = flow.class;
        match class {
            ProtoClass::Dns => self.on_dns_data(flow_id, direction, bytes, ts),
            ProtoClass::Http => self.on_http_data(flow_id, direction, bytes, ts),
            ProtoClass::Tls => {} // encrypted; metadata already reported
            ProtoClass::Opaque => self.scan_raw(flow_id, direction, bytes, ts),
            ProtoClass::Unclassified => {
                if flow.key.proto == TransportProto::Udp {
                    flow.class = ProtoClass::Opaque;
                    self.scan_raw(flow_id, direction, bytes, ts);
                    return;
                }
                match direction {
                    Direction::Outbound => {
                        flow.peek.extend_from_slice(bytes);
                        let decided = match tls::detect_client_hello(&flow.peek) {
                            HelloDetect::Hello(meta) => {
                                flow.class = ProtoClass::Tls;
                                let seen = flow.tls_meta_seen;
                                flow.peek = Vec::new();
                                if !seen {
                                    let ets = self.ts(&ts);
                                    self.emit(
                                        flow_id,
                                        AnalyzerEvent::TlsMetadata { flow_id, meta, ts: ets },
                                    );
                                }
                                true
                            }
                            HelloDetect::Truncated if flow.peek.len() < CLASSIFY_LIMIT => false,
                            _ => {
                                if http::looks_like_http_request(&flow.peek) {
                                    flow.class = ProtoClass::Http;
                                } else {
                                    flow.class = ProtoClass::Opaque;
                                }
                                true
                            }
                        };
                        if decided {
                            let flow = self.flows.get_mut(&flow_id).expect("present");
                            let peek = std::mem::take(&mut flow.peek);
                            match flow.class {
                                ProtoClass::Http => self.on_http_data(flow_id, direction, &peek, ts),
                                ProtoClass::Opaque => self.scan_raw(flow_id, direction, &peek, ts),
                                _ => {}
                            }
                        }
                    }
                    Direction::Inbound => {
                        // Server spoke first: not TLS (clients open TLS), and
                        // requests must precede responses for HTTP pairing.
                        flow.class = ProtoClass::Opaque;
                        let peek = std::mem::take(&mut flow.peek);
                        if !peek.is_empty() {
                            self.scan_raw(flow_id, Direction::Outbound, &peek, ts);
                        }
                        self.scan_raw(flow_id, direction, bytes, ts);
                    }
                }
            }
        }
    }

    fn on_dns_data(&mut self, flow_id: u64, direction: Direction, bytes: &[u8], ts: MsgTs) {
        let msg = match dns::parse_dns(bytes) {
            Ok(m) => m,
            Err(_) => return,
        };
        if !msg.is_response {
            self.dns_tracker.on_query(flow_id, msg.id, ts.mono);
            return;
        }
        let rtt_ms = self
            .dns_tracker
            .on_response(flow_id, msg.id, ts.mono)
            .map(|d| d.as_secs_f64() * 1e3);
        self.dns_cache.insert_answers(&msg, ts.mono);
        self.report.dns_transactions += 1;
        let ets = self.ts(&ts);
        let _ = direction;
        self.emit(
            flow_id,
            AnalyzerEvent::DnsTransaction {
                flow_id,
                qname: msg.qname,
                qtype: msg.qtype,
                answers: msg.answers,
                rtt_ms,
                ts: ets,
            },
        );
    }

    fn on_http_data(&mut self, flow_id: u64, direction: Direction, bytes: &[u8], ts: MsgTs) {
        let Some(flow) = self.flows.get_mut(&flow_id) else {
            return;
        };
        let messages = match direction {
            Direction::Outbound => flow.http_req.push(bytes),
            Direction::Inbound => flow.http_resp.push(bytes),
        };
        for msg in messages {
            self.handle_http_message(flow_id, direction, msg, ts);
        }
        // A stream that stops parsing as HTTP degrades to raw scanning.
        let Some(flow) = self.flows.get_mut(&flow_id) else {
            return;
        };
        if flow.http_req.is_opaque() {
            flow.class = ProtoClass::Opaque;
        }
    }

    fn handle_http_message(
        &mut self,
        flow_id: u64,
        direction: Direction,
        msg: http::HttpMessage,
        ts: MsgTs,
    ) {
        // Leak scanning over the message pieces.
        let mut findings: Vec<(LeakLocation, patterns::LeakMatch)> = Vec::new();
        if direction == Direction::Outbound {
            let (path_only, query) = match msg.path.split_once('?') {
                Some((p, q)) => (p, Some(q)),
                None => (msg.path.as_str(), None),
            };
            for m in patterns::scan_for_leaks(path_only.as_bytes(), &self.cfg.patterns, LeakEncoding::Plain)
            {
                findings.push((LeakLocation::Url, m));
            }
            if let Some(q) = query {
                for m in patterns::scan_for_leaks(q.as_bytes(), &self.cfg.patterns, LeakEncoding::Plain) {
                    findings.push((LeakLocation::Query, m));
                }
            }
            let mut header_blob = Vec::new();
            for (k, v) in &msg.headers {
                header_blob.extend_from_slice(k.as_bytes());
                header_blob.extend_from_slice(b": ");
                header_blob.extend_from_slice(v.as_bytes());
                header_blob.push(b'\n');
            }
            for m in patterns::scan_for_leaks(&header_blob, &self.cfg.patterns, LeakEncoding::Plain) {
                findings.push((LeakLocation::Header, m));
            }
        }
        // Body: inflate compressed encodings before scanning.
        let body_cap = self.cfg.body_cap;
        match msg.decoded_body(body_cap) {
            Some(inflated) => {
                for m in patterns::scan_for_leaks(&inflated, &self.cfg.patterns, LeakEncoding::Gzip) {
                    findings.push((LeakLocation::Body, m));
                }
            }
            None => {
                for m in patterns::scan_for_leaks(&msg.body, &self.cfg.patterns, LeakEncoding::Plain) {
                    findings.push((LeakLocation::Body, m));
                }
            }
        }

        let ets = self.ts(&ts);
        for (location, m) in findings {
            self.report.leaks += 1;
            let pattern_name = self.cfg.patterns.name(m.pattern_index).to_string();
            self.emit(
                flow_id,
                AnalyzerEvent::LeakDetected {
                    flow_id,
                    pattern_name,
                    location,
                    encoding: m.encoding,
                    offset: m.offset,
                    ts: ets,
                },
            );
        }

        // Transaction pairing.
        let Some(flow) = self.flows.get_mut(&flow_id) else {
            return;
        };
        match direction {
            Direction::Outbound => {
                let host = msg
                    .host()
                    .map(str::to_string)
                    .or_else(|| flow.hostname.clone());
                flow.open_requests
                    .push_back((msg.method.clone(), host, msg.path.clone()));
            }
            Direction::Inbound => {
                let (method, host, path) = flow
                    .open_requests
                    .pop_front()
                    .unwrap_or(("".into(), flow.hostname.clone(), "".into()));
                self.report.http_transactions += 1;
                self.emit(
                    flow_id,
                    AnalyzerEvent::HttpTransaction {
                        flow_id,
                        method,
                        host,
                        path,
                        status: msg.status,
                        content_encoding: msg.content_encoding.clone(),
                        ts: ets,
                    },
                );
            }
        }
    }

    /// Emit any unanswered HTTP requests (close-delimited responses flush
    /// through the parser's finish()).
    fn flush_http(&mut self, flow_id: u64) {
        let Some(flow) = self.flows.get_mut(&flow_id) else {
            return;
        };
        if flow.class != ProtoClass::Http {
            return;
        }
        let ts = MsgTs::now();
        let tail = flow.http_resp.finish();
        for msg in tail {
            self.handle_http_message(flow_id, Direction::Inbound, msg, ts);
        }
        let Some(flow) = self.flows.get_mut(&flow_id) else {
            return;
        };
        let leftovers: Vec<_> = flow.open_requests.drain(..).collect();
        let ets = self.ts(&ts);
        for (method, host, path) in leftovers {
            self.report.http_transactions += 1;
            self.emit(
                flow_id,
                AnalyzerEvent::HttpTransaction {
                    flow_id,
                    method,
                    host,
                    path,
                    status: None,
                    content_encoding: None,
                    ts: ets,
                },
            );
        }
    }

    /// Pattern-scan an unstructured stream chunk, carrying a tail across
    /// chunk boundaries so straddling values still match.
    fn scan_raw(&mut self, flow_id: u64, direction: Direction, bytes: &[u8], ts: MsgTs) {
        if self.cfg.patterns.is_empty() {
            return;
        }
        let Some(flow) = self.flows.get_mut(&flow_id) else {
            return;
        };
        let carry = match direction {
            Direction::Outbound => &mut flow.carry_up,
            Direction::Inbound => &mut flow.carry_down,
        };
        let mut view = std::mem::take(carry);
        let carried = view.len();
        view.extend_from_slice(bytes);

        let keep = self.cfg.patterns.max_pattern_len().saturating_sub(1);
        let tail_start = view.len().saturating_sub(keep);
        let new_carry = view[tail_start..].to_vec();
        match direction {
            Direction::Outbound => flow.carry_up = new_carry,
            Direction::Inbound => flow.carry_down = new_carry,
        }

        let ets = self.ts(&ts);
        for m in patterns::scan_for_leaks(&view, &self.cfg.patterns, LeakEncoding::Plain) {
            // Matches entirely inside the carried prefix were reported with
            // the previous chunk.
            if m.encoding == LeakEncoding::Plain
                && m.offset + self.cfg.patterns.pattern_len(m.pattern_index) <= carried
            {
                continue;
            }
            self.report.leaks += 1;
            let pattern_name = self.cfg.patterns.name(m.pattern_index).to_string();
            self.emit(
                flow_id,
                AnalyzerEvent::LeakDetected {
                    flow_id,
                    pattern_name,
                    location: LeakLocation::Body,
                    encoding: m.encoding,
                    offset: m.offset,
                    ts: ets,
                },
            );
        }
    }

    pub fn report(&self) -> &AnalyzerReport {
        &self.report
    }

    pub fn sink_mut(&mut self) -> &mut EventSink {
        &mut self.sink
    }

    pub fn dns_cache(&self) -> &DnsCache {
        &self.dns_cache
    }
}

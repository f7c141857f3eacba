//! Transparent TLS interception.
//!
//! When enabled (strictly opt-in), TCP flows whose first app bytes form a
//! TLS Client Hello are handed to a per-flow relay worker. The worker
//! connects to the real server first, terminates TLS toward the app under a
//! leaf minted from the per-installation CA, and relays cleartext copies to
//! the analyzer. Flows that cannot be proxied (pinning, bundled trust
//! stores, unsupported extensions) land on a whitelist that bypasses
//! interception for five minutes.

pub mod hello;

pub use hello::{detect_client_hello, HelloDetect, TlsFlowMeta, TlsOutcome};

use crate::analyzer::{AnalyzerTx, CopyMsg, MsgTs};
use crate::flow::{Direction, FlowKey};
use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use rustls::pki_types::{CertificateDer, PrivateKeyDer, ServerName};
use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Whitelist entries expire exactly this long after insertion.
pub const WHITELIST_TTL: Duration = Duration::from_secs(300);
/// Minted leaves stay valid well under the 90-day ceiling.
const LEAF_VALIDITY_DAYS: i64 = 60;

#[derive(Debug, thiserror::Error)]
pub enum TlsGateError {
    #[error("CA unavailable: {0}")]
    CaUnavailable(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Per-installation CA: generated on first run, private key kept with
/// owner-only permissions, certificate exported as PEM for the operator to
/// install into a client trust store.
pub struct CaIdentity {
    cert_der: CertificateDer<'static>,
    cert_pem: String,
    key: rcgen::KeyPair,
    issuer_params: rcgen::CertificateParams,
}

impl CaIdentity {
    /// Load the CA from `dir`, generating a fresh identity on first run.
    pub fn load_or_create(dir: &Path) -> Result<CaIdentity, TlsGateError> {
        std::fs::create_dir_all(dir)?;
        let cert_path = dir.join("ca.pem");
        let key_path = dir.join("ca.key.pem");
        if cert_path.exists() && key_path.exists() {
            let cert_pem = std::fs::read_to_string(&cert_path)?;
            let key_pem = std::fs::read_to_string(&key_path)?;
            return Self::from_pem(&cert_pem, &key_pem);
        }

        let mut params = rcgen::CertificateParams::default();
        params
            .distinguished_name
            .push(rcgen::DnType::CommonName, "tungate local CA");
        params
            .distinguished_name
            .push(rcgen::DnType::OrganizationName, "tungate");
        params.is_ca = rcgen::IsCa::Ca(rcgen::BasicConstraints::Unconstrained);
        params.key_usages = vec![
            rcgen::KeyUsagePurpose::KeyCertSign,
            rcgen::KeyUsagePurpose::CrlSign,
            rcgen::KeyUsagePurpose::DigitalSignature,
        ];
        let key = rcgen::KeyPair::generate().map_err(|e| TlsGateError::CaUnavailable(e.to_string()))?;
        let cert = params
            .clone()
            .self_signed(&key)
            .map_err(|e| TlsGateError::CaUnavailable(e.to_string()))?;

        let cert_pem = cert.pem();
        std::fs::write(&cert_path, &cert_pem)?;
        write_private(&key_path, key.serialize_pem().as_bytes())?;

        Ok(CaIdentity {
            cert_der: cert.der().clone().into_owned(),
            cert_pem,
            key,
            issuer_params: params,
        })
    }

    pub fn from_pem(cert_pem: &str, key_pem: &str) -> Result<CaIdentity, TlsGateError> {
        let key = rcgen::KeyPair::from_pem(key_pem)
            .map_err(|e| TlsGateError::CaUnavailable(format!("bad CA key: {e}")))?;
        let issuer_params = rcgen::CertificateParams::from_ca_cert_pem(cert_pem)
            .map_err(|e| TlsGateError::CaUnavailable(format!("bad CA cert: {e}")))?;
        let der = pem_to_der(cert_pem)
            .ok_or_else(|| TlsGateError::CaUnavailable("bad CA PEM".into()))?;
        Ok(CaIdentity {
            cert_der: CertificateDer::from(der).into_owned(),
            cert_pem: cert_pem.to_string(),
            key,
            issuer_params,
        })
    }

    pub fn cert_pem(&self) -> &str {
        &self.cert_pem
    }

    pub fn cert_der(&self) -> &CertificateDer<'static> {
        &self.cert_der
    }
}

fn write_private(path: &Path, bytes: &[u8]) -> io::Result<()> {
    use std::os::unix::fs::OpenOptionsExt;
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .mode(0o600)
        .open(path)?;
    f.write_all(bytes)
}

fn pem_to_der(pem: &str) -> Option<Vec<u8>> {
    let mut reader = io::BufReader::new(pem.as_bytes());
    for item in rustls_pemfile::certs(&mut reader) {
        if let Ok(der) = item {
            return Some(der.to_vec());
        }
    }
    None
}

/// A leaf certificate chain plus key, cached per host.
pub struct MintedLeaf {
    pub chain: Vec<CertificateDer<'static>>,
    pub key_der: Vec<u8>,
}

impl MintedLeaf {
    pub fn key(&self) -> PrivateKeyDer<'static> {
        PrivateKeyDer::Pkcs8(self.key_der.clone().into())
    }
}

/// Mint (or fetch from cache) a leaf for `host` (DNS name or literal IP),
/// signed by the CA, valid for [`LEAF_VALIDITY_DAYS`].
pub fn mint_leaf(
    ca: &CaIdentity,
    cache: &Mutex<HashMap<String, Arc<MintedLeaf>>>,
    host: &str,
) -> Result<Arc<MintedLeaf>, TlsGateError> {
    if host.is_empty() {
        return Err(TlsGateError::CaUnavailable("empty host".into()));
    }
    if let Some(leaf) = cache.lock().unwrap().get(host) {
        return Ok(leaf.clone());
    }
    let mut params = rcgen::CertificateParams::new(vec![host.to_string()])
        .map_err(|e| TlsGateError::CaUnavailable(e.to_string()))?;
    params
        .distinguished_name
        .push(rcgen::DnType::CommonName, host);
    let now = time::OffsetDateTime::now_utc();
    params.not_before = now - time::Duration::hours(1);
    params.not_after = now + time::Duration::days(LEAF_VALIDITY_DAYS);

    let leaf_key =
        rcgen::KeyPair::generate().map_err(|e| TlsGateError::CaUnavailable(e.to_string()))?;
    // Re-sign the stored CA params to get an issuer handle; the leaf verifies
    // against the original exported certificate because subject and key match.
    let issuer = self_signed_issuer(ca)?;
    let cert = params
        .signed_by(&leaf_key, &issuer, &ca.key)
        .map_err(|e| TlsGateError::CaUnavailable(e.to_string()))?;

    let leaf = Arc::new(MintedLeaf {
        chain: vec![cert.der().clone().into_owned(), ca.cert_der.clone()],
        key_der: leaf_key.serialize_der(),
    });
    cache
        .lock()
        .unwrap()
        .insert(host.to_string(), leaf.clone());
    Ok(leaf)
}

fn self_signed_issuer(ca: &CaIdentity) -> Result<rcgen::Certificate, TlsGateError> {
    ca.issuer_params
        .clone()
        .self_signed(&ca.key)
        .map_err(|e| TlsGateError::CaUnavailable(e.to_string()))
}

/// Host identities exempted from interception. Keyed by SNI when present,
/// else the remote `addr:port`; entries expire exactly [`WHITELIST_TTL`]
/// after insertion. All operations take an injectable `now`.
#[derive(Debug, Default)]
pub struct Whitelist {
    entries: HashMap<String, Instant>,
}

impl Whitelist {
    pub fn new() -> Whitelist {
        Whitelist::default()
    }

    pub fn host_key(meta: &TlsFlowMeta, remote: SocketAddr) -> String {
        meta.sni.clone().unwrap_or_else(|| remote.to_string())
    }

    pub fn insert(&mut self, key: String, now: Instant) {
        self.entries.insert(key, now + WHITELIST_TTL);
    }

    pub fn contains(&self, key: &str, now: Instant) -> bool {
        match self.entries.get(key) {
            Some(expires) => now < *expires,
            None => false,
        }
    }

    pub fn purge(&mut self, now: Instant) {
        self.entries.retain(|_, expires| now < *expires);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Forwarder → proxy worker messages (the app-side byte stream).
#[derive(Debug)]
pub enum AppStreamMsg {
    Bytes(Vec<u8>),
    /// App half-closed (FIN): no more app bytes will come.
    Shutdown,
}

/// Proxy worker → forwarder events, consumed in the loop's socket phase.
#[derive(Debug)]
pub enum ProxyEvent {
    Connected { key: FlowKey },
    ConnectFailed { key: FlowKey },
    /// Payload for the app (the engine segments it toward the TUN device).
    Data { key: FlowKey, bytes: Vec<u8> },
    /// Remote side finished cleanly.
    Eof { key: FlowKey },
    /// Unrecoverable relay error: reset the app flow.
    Error { key: FlowKey },
}

#[derive(Debug, Default)]
pub struct TlsGateStats {
    pub intercepted: u64,
    pub handshake_failures: u64,
    pub bypassed: u64,
}

/// Shared interception state handed to the forwarder.
pub struct TlsGate {
    ca: Arc<CaIdentity>,
    leaf_cache: Mutex<HashMap<String, Arc<MintedLeaf>>>,
    pub whitelist: Mutex<Whitelist>,
    upstream_roots: Arc<rustls::RootCertStore>,
    analyzer: AnalyzerTx,
    pub stats: Mutex<TlsGateStats>,
}

impl TlsGate {
    pub fn new(
        ca: Arc<CaIdentity>,
        upstream_roots: rustls::RootCertStore,
        analyzer: AnalyzerTx,
    ) -> TlsGate {
        TlsGate {
            ca,
            leaf_cache: Mutex::new(HashMap::new()),
            whitelist: Mutex::new(Whitelist::new()),
            upstream_roots: Arc::new(upstream_roots),
            analyzer,
            stats: Mutex::new(TlsGateStats::default()),
        }
    }

    pub fn ca(&self) -> &CaIdentity {
        &self.ca
    }

    /// Should this Client Hello flow be intercepted right now?
    pub fn should_intercept(&self, meta: &TlsFlowMeta, remote: SocketAddr, now: Instant) -> bool {
        let key = Whitelist::host_key(meta, remote);
        !self.whitelist.lock().unwrap().contains(&key, now)
    }

    pub fn mint(&self, host: &str) -> Result<Arc<MintedLeaf>, TlsGateError> {
        mint_leaf(&self.ca, &self.leaf_cache, host)
    }

    /// Spawn a relay worker for an intercepted flow. Returns the sender for
    /// app-side bytes; events come back on `evt_tx`.
    pub fn spawn_flow(
        self: &Arc<Self>,
        key: FlowKey,
        flow_id: u64,
        meta: TlsFlowMeta,
        client_hello: Vec<u8>,
        evt_tx: Sender<ProxyEvent>,
    ) -> Sender<AppStreamMsg> {
        let (app_tx, app_rx) = crossbeam_channel::unbounded();
        let gate = Arc::clone(self);
        std::thread::Builder::new()
            .name(format!("tls-flow-{flow_id}"))
            .spawn(move || {
                run_proxy_flow(gate, key, flow_id, meta, client_hello, app_rx, evt_tx);
            })
            .expect("spawn tls worker");
        app_tx
    }
}

/// Blocking `Read`/`Write` view of the app-side byte stream, fed by the
/// forwarder through a channel. The buffered Client Hello is replayed first.
struct ChannelStream {
    rx: Receiver<AppStreamMsg>,
    evt_tx: Sender<ProxyEvent>,
    key: FlowKey,
    pending: Vec<u8>,
    pos: usize,
    eof: bool,
    read_timeout: Option<Duration>,
}

impl Read for ChannelStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        loop {
            if self.pos < self.pending.len() {
                let n = (self.pending.len() - self.pos).min(buf.len());
                buf[..n].copy_from_slice(&self.pending[self.pos..self.pos + n]);
                self.pos += n;
                if self.pos == self.pending.len() {
                    self.pending.clear();
                    self.pos = 0;
                }
                return Ok(n);
            }
            if self.eof {
                return Ok(0);
            }
            let msg = match self.read_timeout {
                Some(t) => match self.rx.recv_timeout(t) {
                    Ok(m) => m,
                    Err(RecvTimeoutError::Timeout) => {
                        return Err(io::Error::from(io::ErrorKind::WouldBlock))
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        self.eof = true;
                        return Ok(0);
                    }
                },
                None => match self.rx.recv() {
                    Ok(m) => m,
                    Err(_) => {
                        self.eof = true;
                        return Ok(0);
                    }
                },
            };
            match msg {
                AppStreamMsg::Bytes(b) => {
                    self.pending = b;
                    self.pos = 0;
                }
                AppStreamMsg::Shutdown => {
                    self.eof = true;
                    return Ok(0);
                }
            }
        }
    }
}

impl Write for ChannelStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.evt_tx
            .send(ProxyEvent::Data {
                key: self.key,
                bytes: buf.to_vec(),
            })
            .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn now_ts() -> MsgTs {
    MsgTs::now()
}

fn run_proxy_flow(
    gate: Arc<TlsGate>,
    key: FlowKey,
    flow_id: u64,
    meta: TlsFlowMeta,
    client_hello: Vec<u8>,
    app_rx: Receiver<AppStreamMsg>,
    evt_tx: Sender<ProxyEvent>,
) {
    // Connect upstream first and report the outcome back to the forwarder.
    let upstream = match TcpStream::connect_timeout(&key.remote, Duration::from_secs(10)) {
        Ok(s) => s,
        Err(e) => {
            log::debug!("tls flow {flow_id}: upstream connect failed: {e}");
            let _ = evt_tx.send(ProxyEvent::ConnectFailed { key });
            return;
        }
    };
    let _ = evt_tx.send(ProxyEvent::Connected { key });
    let _ = upstream.set_nodelay(true);

    let host_key = Whitelist::host_key(&meta, key.remote);
    let server_name: ServerName<'static> = match &meta.sni {
        Some(sni) => match ServerName::try_from(sni.clone()) {
            Ok(n) => n,
            Err(_) => ServerName::IpAddress(key.remote.ip().into()),
        },
        None => ServerName::IpAddress(key.remote.ip().into()),
    };

    // Upstream TLS handshake. A failure here is recoverable: the app has not
    // seen a byte yet, so fall back to relaying the raw stream.
    let mut client_config = rustls::ClientConfig::builder_with_provider(Arc::new(
        rustls::crypto::ring::default_provider(),
    ))
    .with_protocol_versions(&[&rustls::version::TLS13, &rustls::version::TLS12])
    .expect("ring supports tls12+13")
    .with_root_certificates((*gate.upstream_roots).clone())
    .with_no_client_auth();
    client_config.alpn_protocols = meta.alpn.iter().map(|p| p.as_bytes().to_vec()).collect();

    let client_conn =
        match rustls::ClientConnection::new(Arc::new(client_config), server_name.clone()) {
            Ok(c) => c,
            Err(e) => {
                whitelist_and_report(&gate, &host_key, flow_id, &meta, &e.to_string());
                raw_fallback(&gate, key, flow_id, client_hello, app_rx, evt_tx);
                return;
            }
        };
    let mut up_tls = rustls::StreamOwned::new(client_conn, upstream);
    up_tls
        .sock
        .set_read_timeout(Some(Duration::from_secs(10)))
        .ok();
    if let Err(e) = complete_handshake_client(&mut up_tls) {
        log::debug!("tls flow {flow_id}: upstream handshake failed: {e}");
        whitelist_and_report(&gate, &host_key, flow_id, &meta, &format!("upstream: {e}"));
        raw_fallback(&gate, key, flow_id, client_hello, app_rx, evt_tx);
        return;
    }
    let negotiated_alpn = up_tls.conn.alpn_protocol().map(|p| p.to_vec());

    // App-side TLS under a minted leaf.
    let leaf_host = meta
        .sni
        .clone()
        .unwrap_or_else(|| key.remote.ip().to_string());
    let leaf = match gate.mint(&leaf_host) {
        Ok(l) => l,
        Err(e) => {
            whitelist_and_report(&gate, &host_key, flow_id, &meta, &e.to_string());
            let _ = evt_tx.send(ProxyEvent::Error { key });
            return;
        }
    };
    let mut server_config = match rustls::ServerConfig::builder_with_provider(Arc::new(
        rustls::crypto::ring::default_provider(),
    ))
    .with_protocol_versions(&[&rustls::version::TLS13, &rustls::version::TLS12])
    .expect("ring supports tls12+13")
    .with_no_client_auth()
    .with_single_cert(leaf.chain.clone(), leaf.key())
    {
        Ok(c) => c,
        Err(e) => {
            whitelist_and_report(&gate, &host_key, flow_id, &meta, &e.to_string());
            let _ = evt_tx.send(ProxyEvent::Error { key });
            return;
        }
    };
    if let Some(proto) = &negotiated_alpn {
        server_config.alpn_protocols = vec![proto.clone()];
    }

    let server_conn = match rustls::ServerConnection::new(Arc::new(server_config)) {
        Ok(c) => c,
        Err(e) => {
            whitelist_and_report(&gate, &host_key, flow_id, &meta, &e.to_string());
            let _ = evt_tx.send(ProxyEvent::Error { key });
            return;
        }
    };
    let channel = ChannelStream {
        rx: app_rx,
        evt_tx: evt_tx.clone(),
        key,
        pending: client_hello,
        pos: 0,
        eof: false,
        read_timeout: Some(Duration::from_secs(10)),
    };
    let mut app_tls = rustls::StreamOwned::new(server_conn, channel);
    if let Err(e) = complete_handshake_server(&mut app_tls) {
        // Pinning or a bundled trust store: the app rejected our leaf. The
        // connection is unsalvageable; the whitelist makes the retry bypass.
        log::debug!("tls flow {flow_id}: app-side handshake failed: {e}");
        whitelist_and_report(&gate, &host_key, flow_id, &meta, &format!("app: {e}"));
        let _ = evt_tx.send(ProxyEvent::Error { key });
        return;
    }

    gate.stats.lock().unwrap().intercepted += 1;
    let mut ok_meta = meta.clone();
    ok_meta.outcome = TlsOutcome::Intercepted;
    let _ = gate.analyzer.enqueue(CopyMsg::TlsMeta {
        flow_id,
        meta: ok_meta,
        ts: now_ts(),
    });

    relay_decrypted(&gate, key, flow_id, app_tls, up_tls, evt_tx);
}

fn whitelist_and_report(
    gate: &TlsGate,
    host_key: &str,
    flow_id: u64,
    meta: &TlsFlowMeta,
    reason: &str,
) {
    gate.whitelist
        .lock()
        .unwrap()
        .insert(host_key.to_string(), Instant::now());
    gate.stats.lock().unwrap().handshake_failures += 1;
    let mut failed = meta.clone();
    failed.outcome = TlsOutcome::HandshakeFailed;
    failed.failure_reason = Some(reason.to_string());
    let _ = gate.analyzer.enqueue(CopyMsg::TlsMeta {
        flow_id,
        meta: failed,
        ts: now_ts(),
    });
}

fn complete_handshake_client(
    tls: &mut rustls::StreamOwned<rustls::ClientConnection, TcpStream>,
) -> io::Result<()> {
    while tls.conn.is_handshaking() {
        tls.conn.complete_io(&mut tls.sock)?;
    }
    Ok(())
}

fn complete_handshake_server(
    tls: &mut rustls::StreamOwned<rustls::ServerConnection, ChannelStream>,
) -> io::Result<()> {
    while tls.conn.is_handshaking() {
        tls.conn.complete_io(&mut tls.sock)?;
    }
    Ok(())
}

/// Bypass path: the flow could not be proxied, so relay raw bytes untouched
/// (starting with the buffered Client Hello) over a fresh upstream
/// connection. Ciphertext copies still go to the analyzer.
fn raw_fallback(
    gate: &TlsGate,
    key: FlowKey,
    flow_id: u64,
    client_hello: Vec<u8>,
    app_rx: Receiver<AppStreamMsg>,
    evt_tx: Sender<ProxyEvent>,
) {
    gate.stats.lock().unwrap().bypassed += 1;
    let mut upstream = match TcpStream::connect_timeout(&key.remote, Duration::from_secs(10)) {
        Ok(s) => s,
        Err(_) => {
            let _ = evt_tx.send(ProxyEvent::Error { key });
            return;
        }
    };
    let _ = upstream.set_nodelay(true);
    if upstream.write_all(&client_hello).is_err() {
        let _ = evt_tx.send(ProxyEvent::Error { key });
        return;
    }
    let _ = gate.analyzer.enqueue(CopyMsg::Data {
        flow_id,
        direction: Direction::Outbound,
        bytes: client_hello,
        ts: now_ts(),
    });

    upstream
        .set_read_timeout(Some(Duration::from_millis(5)))
        .ok();
    let mut buf = vec![0u8; 32 * 1024];
    let mut app_open = true;
    let mut up_open = true;
    while app_open || up_open {
        let mut idle = true;
        if app_open {
            match app_rx.recv_timeout(Duration::from_millis(5)) {
                Ok(AppStreamMsg::Bytes(bytes)) => {
                    idle = false;
                    if upstream.write_all(&bytes).is_err() {
                        let _ = evt_tx.send(ProxyEvent::Error { key });
                        return;
                    }
                    let _ = gate.analyzer.enqueue(CopyMsg::Data {
                        flow_id,
                        direction: Direction::Outbound,
                        bytes,
                        ts: now_ts(),
                    });
                }
                Ok(AppStreamMsg::Shutdown) | Err(RecvTimeoutError::Disconnected) => {
                    app_open = false;
                    let _ = upstream.shutdown(std::net::Shutdown::Write);
                }
                Err(RecvTimeoutError::Timeout) => {}
            }
        }
        if up_open {
            match upstream.read(&mut buf) {
                Ok(0) => {
                    up_open = false;
                    let _ = evt_tx.send(ProxyEvent::Eof { key });
                }
                Ok(n) => {
                    idle = false;
                    let bytes = buf[..n].to_vec();
                    let _ = gate.analyzer.enqueue(CopyMsg::Data {
                        flow_id,
                        direction: Direction::Inbound,
                        bytes: bytes.clone(),
                        ts: now_ts(),
                    });
                    if evt_tx.send(ProxyEvent::Data { key, bytes }).is_err() {
                        return;
                    }
                }
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut => {}
                Err(_) => {
                    up_open = false;
                    let _ = evt_tx.send(ProxyEvent::Error { key });
                }
            }
        }
        if !app_open && !up_open {
            break;
        }
        if idle {
            std::thread::sleep(Duration::from_micros(200));
        }
    }
}

/// Full-duplex decrypted relay with cleartext mirrors per direction.
fn relay_decrypted(
    gate: &TlsGate,
    key: FlowKey,
    flow_id: u64,
    mut app_tls: rustls::StreamOwned<rustls::ServerConnection, ChannelStream>,
    mut up_tls: rustls::StreamOwned<rustls::ClientConnection, TcpStream>,
    evt_tx: Sender<ProxyEvent>,
) {
    app_tls.sock.read_timeout = Some(Duration::from_millis(5));
    up_tls
        .sock
        .set_read_timeout(Some(Duration::from_millis(5)))
        .ok();

    let mut buf = vec![0u8; 32 * 1024];
    let mut app_open = true;
    let mut up_open = true;
    while app_open || up_open {
        let mut moved = false;

        if app_open {
            match app_tls.read(&mut buf) {
                Ok(0) => {
                    app_open = false;
                    up_tls.conn.send_close_notify();
                    let _ = up_tls.flush();
                    let _ = up_tls.sock.shutdown(std::net::Shutdown::Write);
                }
                Ok(n) => {
                    moved = true;
                    let bytes = buf[..n].to_vec();
                    let _ = gate.analyzer.enqueue(CopyMsg::Data {
                        flow_id,
                        direction: Direction::Outbound,
                        bytes: bytes.clone(),
                        ts: now_ts(),
                    });
                    if up_tls.write_all(&bytes).is_err() {
                        let _ = evt_tx.send(ProxyEvent::Error { key });
                        return;
                    }
                }
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut => {}
                Err(_) => {
                    // App side reset mid-stream.
                    app_open = false;
                    up_open = false;
                }
            }
        }

        if up_open {
            match up_tls.read(&mut buf) {
                Ok(0) => {
                    up_open = false;
                    let _ = evt_tx.send(ProxyEvent::Eof { key });
                }
                Ok(n) => {
                    moved = true;
                    let bytes = buf[..n].to_vec();
                    let _ = gate.analyzer.enqueue(CopyMsg::Data {
                        flow_id,
                        direction: Direction::Inbound,
                        bytes: bytes.clone(),
                        ts: now_ts(),
                    });
                    if app_tls.write_all(&bytes).is_err() {
                        let _ = evt_tx.send(ProxyEvent::Error { key });
                        return;
                    }
                    let _ = app_tls.flush();
                }
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut => {}
                Err(e) => {
                    up_open = false;
                    // close_notify shows up as UnexpectedEof from some peers.
                    if e.kind() == io::ErrorKind::UnexpectedEof {
                        let _ = evt_tx.send(ProxyEvent::Eof { key });
                    } else {
                        let _ = evt_tx.send(ProxyEvent::Error { key });
                        return;
                    }
                }
            }
        }

        if !moved {
            if !app_open && !up_open {
                break;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
    }
}

#[cfg(test)]
mod tests;

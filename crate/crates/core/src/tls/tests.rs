use super::*;
use crate::analyzer::CopyMsg;
use crate::flow::TransportProto;
use std::io::{Read as _, Write as _};
use std::net::TcpListener;

fn test_ca(dir: &Path) -> Arc<CaIdentity> {
    Arc::new(CaIdentity::load_or_create(dir).unwrap())
}

/// Self-signed identity for an upstream test server.
fn server_identity(host: &str) -> (CertificateDer<'static>, PrivateKeyDer<'static>) {
    let key = rcgen::KeyPair::generate().unwrap();
    let mut params = rcgen::CertificateParams::new(vec![host.to_string()]).unwrap();
    params
        .distinguished_name
        .push(rcgen::DnType::CommonName, host);
    let cert = params.self_signed(&key).unwrap();
    (
        cert.der().clone().into_owned(),
        PrivateKeyDer::Pkcs8(key.serialize_der().into()),
    )
}

fn client_config_trusting(der: &CertificateDer<'static>) -> rustls::ClientConfig {
    let mut roots = rustls::RootCertStore::empty();
    roots.add(der.clone()).unwrap();
    rustls::ClientConfig::builder_with_provider(Arc::new(rustls::crypto::ring::default_provider()))
        .with_protocol_versions(&[&rustls::version::TLS13, &rustls::version::TLS12])
        .unwrap()
        .with_root_certificates(roots)
        .with_no_client_auth()
}

#[test]
fn ca_persists_across_loads() {
    let dir = tempfile::tempdir().unwrap();
    let ca1 = CaIdentity::load_or_create(dir.path()).unwrap();
    let ca2 = CaIdentity::load_or_create(dir.path()).unwrap();
    assert_eq!(ca1.cert_pem(), ca2.cert_pem());
    assert_eq!(ca1.cert_der(), ca2.cert_der());

    // Owner-only permissions on the private key.
    use std::os::unix::fs::MetadataExt;
    let mode = std::fs::metadata(dir.path().join("ca.key.pem"))
        .unwrap()
        .mode();
    assert_eq!(mode & 0o777, 0o600);
}

#[test]
fn leaf_cache_returns_identical_chain() {
    let dir = tempfile::tempdir().unwrap();
    let ca = test_ca(dir.path());
    let cache = Mutex::new(HashMap::new());
    let a = mint_leaf(&ca, &cache, "example.com").unwrap();
    let b = mint_leaf(&ca, &cache, "example.com").unwrap();
    assert!(Arc::ptr_eq(&a, &b));
    let c = mint_leaf(&ca, &cache, "other.com").unwrap();
    assert!(!Arc::ptr_eq(&a, &c));
    assert!(mint_leaf(&ca, &cache, "").is_err());
}

/// Oracle: a rustls client that trusts the CA completes a handshake against
/// a server presenting the minted chain; a mismatched SAN does not.
#[test]
fn minted_chain_verifies_for_host() {
    let dir = tempfile::tempdir().unwrap();
    let ca = test_ca(dir.path());
    let cache = Mutex::new(HashMap::new());
    let leaf = mint_leaf(&ca, &cache, "example.com").unwrap();

    let server_config = rustls::ServerConfig::builder_with_provider(Arc::new(
        rustls::crypto::ring::default_provider(),
    ))
    .with_protocol_versions(&[&rustls::version::TLS13])
    .unwrap()
    .with_no_client_auth()
    .with_single_cert(leaf.chain.clone(), leaf.key())
    .unwrap();

    let handshake_for = |name: &'static str| -> Result<(), String> {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server_config = server_config.clone();
        let srv = std::thread::spawn(move || {
            let (sock, _) = listener.accept().unwrap();
            let conn = rustls::ServerConnection::new(Arc::new(server_config)).unwrap();
            let mut tls = rustls::StreamOwned::new(conn, sock);
            // Drive the handshake; client verification failures surface here.
            let mut buf = [0u8; 1];
            let _ = tls.read(&mut buf);
        });

        let config = client_config_trusting(ca.cert_der());
        let conn = rustls::ClientConnection::new(
            Arc::new(config),
            ServerName::try_from(name).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        let sock = TcpStream::connect(addr).unwrap();
        let mut tls = rustls::StreamOwned::new(conn, sock);
        let result = (|| {
            while tls.conn.is_handshaking() {
                tls.conn.complete_io(&mut tls.sock).map_err(|e| e.to_string())?;
            }
            Ok(())
        })();
        let _ = tls.write_all(b"x");
        drop(tls);
        let _ = srv.join();
        result
    };

    handshake_for("example.com").expect("chain must verify for its SAN");
    let err = handshake_for("other.com").expect_err("SAN mismatch must fail");
    assert!(err.to_lowercase().contains("invalid") || err.to_lowercase().contains("notvalid"),
        "unexpected error: {err}");
}

#[test]
fn whitelist_ttl_is_exact() {
    let mut wl = Whitelist::new();
    let t0 = Instant::now();
    wl.insert("pinned.example".into(), t0);
    assert!(wl.contains("pinned.example", t0));
    assert!(wl.contains("pinned.example", t0 + WHITELIST_TTL - Duration::from_nanos(1)));
    assert!(!wl.contains("pinned.example", t0 + WHITELIST_TTL));
    assert!(!wl.contains("pinned.example", t0 + WHITELIST_TTL + Duration::from_secs(1)));
    assert!(!wl.contains("never-added", t0));

    wl.purge(t0 + WHITELIST_TTL);
    assert!(wl.is_empty());
}

#[test]
fn whitelist_keyed_by_sni_else_addr() {
    let meta_with_sni = TlsFlowMeta {
        sni: Some("a.example".into()),
        client_version: 0x0303,
        cipher_suites: vec![],
        alpn: vec![],
        outcome: TlsOutcome::Bypassed,
        failure_reason: None,
    };
    let remote: SocketAddr = "1.2.3.4:443".parse().unwrap();
    assert_eq!(Whitelist::host_key(&meta_with_sni, remote), "a.example");
    let mut no_sni = meta_with_sni.clone();
    no_sni.sni = None;
    assert_eq!(Whitelist::host_key(&no_sni, remote), "1.2.3.4:443");
}

/// App-side transport adapter: plays the forwarder's role for one flow.
struct AppTransport {
    tx: Sender<AppStreamMsg>,
    rx: Receiver<ProxyEvent>,
    pending: Vec<u8>,
    pos: usize,
    eof: bool,
}

impl std::io::Read for AppTransport {
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
            match self.rx.recv_timeout(Duration::from_secs(10)) {
                Ok(ProxyEvent::Data { bytes, .. }) => {
                    self.pending = bytes;
                    self.pos = 0;
                }
                Ok(ProxyEvent::Eof { .. }) | Ok(ProxyEvent::Error { .. }) => {
                    self.eof = true;
                    return Ok(0);
                }
                Ok(_) => continue,
                Err(_) => return Err(io::Error::from(io::ErrorKind::TimedOut)),
            }
        }
    }
}

impl std::io::Write for AppTransport {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tx
            .send(AppStreamMsg::Bytes(buf.to_vec()))
            .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Upstream echo server speaking TLS with a self-signed cert.
fn spawn_tls_echo_server(
    host: &str,
) -> (SocketAddr, CertificateDer<'static>, std::thread::JoinHandle<()>) {
    let (cert, key) = server_identity(host);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let config = rustls::ServerConfig::builder_with_provider(Arc::new(
        rustls::crypto::ring::default_provider(),
    ))
    .with_protocol_versions(&[&rustls::version::TLS13, &rustls::version::TLS12])
    .unwrap()
    .with_no_client_auth()
    .with_single_cert(vec![cert.clone()], key)
    .unwrap();
    let join = std::thread::spawn(move || {
        if let Ok((sock, _)) = listener.accept() {
            let conn = rustls::ServerConnection::new(Arc::new(config)).unwrap();
            let mut tls = rustls::StreamOwned::new(conn, sock);
            let mut buf = [0u8; 4096];
            loop {
                match tls.read(&mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => {
                        if tls.write_all(&buf[..n]).is_err() {
                            break;
                        }
                        let _ = tls.flush();
                    }
                }
            }
        }
    });
    (addr, cert, join)
}

fn drain_copies(rx: &Receiver<CopyMsg>) -> (Vec<u8>, Vec<u8>, Vec<TlsFlowMeta>) {
    let mut up = Vec::new();
    let mut down = Vec::new();
    let mut metas = Vec::new();
    while let Ok(msg) = rx.try_recv() {
        match msg {
            CopyMsg::Data {
                direction, bytes, ..
            } => match direction {
                Direction::Outbound => up.extend_from_slice(&bytes),
                Direction::Inbound => down.extend_from_slice(&bytes),
            },
            CopyMsg::TlsMeta { meta, .. } => metas.push(meta),
            _ => {}
        }
    }
    (up, down, metas)
}

/// Full interception path: CA-trusting client ↔ proxy ↔ TLS echo server.
/// Bytes survive both ways and the cleartext mirror matches the payload.
#[test]
fn proxy_flow_end_to_end_with_cleartext_mirror() {
    let dir = tempfile::tempdir().unwrap();
    let ca = test_ca(dir.path());
    let (srv_addr, srv_cert, srv_join) = spawn_tls_echo_server("upstream.test");

    let mut roots = rustls::RootCertStore::empty();
    roots.add(srv_cert).unwrap();
    let (copy_tx, copy_rx) = crossbeam_channel::bounded(1000);
    let analyzer = analyzer_tx_for_test(copy_tx);
    let gate = Arc::new(TlsGate::new(ca.clone(), roots, analyzer));

    let key = FlowKey {
        proto: TransportProto::Tcp,
        app: "10.0.0.2:5000".parse().unwrap(),
        remote: srv_addr,
    };
    let meta = TlsFlowMeta {
        sni: Some("upstream.test".into()),
        client_version: 0x0303,
        cipher_suites: vec![],
        alpn: vec![],
        outcome: TlsOutcome::Bypassed,
        failure_reason: None,
    };

    // The "app": a rustls client trusting the gate CA, speaking through the
    // proxy's app-side channel. Its first bytes (the Client Hello) are
    // captured and handed to spawn_flow, as the forwarder does.
    let client_config = client_config_trusting(ca.cert_der());
    let conn = rustls::ClientConnection::new(
        Arc::new(client_config),
        ServerName::try_from("upstream.test").unwrap(),
    )
    .unwrap();

    // Capture the client hello bytes first.
    let mut hello_buf = Vec::new();
    let mut conn = conn;
    conn.write_tls(&mut hello_buf).unwrap();
    assert!(matches!(
        detect_client_hello(&hello_buf),
        HelloDetect::Hello(_)
    ));

    let (evt_tx, evt_rx) = crossbeam_channel::unbounded();
    let app_tx = gate.spawn_flow(key, 1, meta, hello_buf, evt_tx);

    let transport = AppTransport {
        tx: app_tx,
        rx: evt_rx,
        pending: Vec::new(),
        pos: 0,
        eof: false,
    };
    let mut tls = rustls::StreamOwned::new(conn, transport);

    let payload = b"hello through the interceptor";
    tls.write_all(payload).unwrap();
    tls.flush().unwrap();
    let mut echoed = vec![0u8; payload.len()];
    tls.read_exact(&mut echoed).unwrap();
    assert_eq!(&echoed, payload);

    // Half-close from the app lets the worker finish.
    tls.conn.send_close_notify();
    let _ = tls.flush();
    let _ = tls.sock.tx.send(AppStreamMsg::Shutdown);
    drop(tls);
    let _ = srv_join.join();

    std::thread::sleep(Duration::from_millis(50));
    let (up, down, metas) = drain_copies(&copy_rx);
    assert_eq!(up, payload, "cleartext uplink mirror");
    assert_eq!(down, payload, "cleartext downlink mirror");
    assert!(metas
        .iter()
        .any(|m| m.outcome == TlsOutcome::Intercepted));
    assert_eq!(gate.stats.lock().unwrap().intercepted, 1);
}

/// A client that does NOT trust the gate CA (pinned/bundled trust store):
/// the app-side handshake fails, the host lands on the whitelist, and the
/// failure is reported.
#[test]
fn pinning_client_fails_handshake_and_whitelists() {
    let dir = tempfile::tempdir().unwrap();
    let ca = test_ca(dir.path());
    let (srv_addr, srv_cert, _srv_join) = spawn_tls_echo_server("pinned.test");

    let mut roots = rustls::RootCertStore::empty();
    roots.add(srv_cert.clone()).unwrap();
    let (copy_tx, copy_rx) = crossbeam_channel::bounded(1000);
    let analyzer = analyzer_tx_for_test(copy_tx);
    let gate = Arc::new(TlsGate::new(ca, roots, analyzer));

    let key = FlowKey {
        proto: TransportProto::Tcp,
        app: "10.0.0.2:5001".parse().unwrap(),
        remote: srv_addr,
    };
    let meta = TlsFlowMeta {
        sni: Some("pinned.test".into()),
        client_version: 0x0303,
        cipher_suites: vec![],
        alpn: vec![],
        outcome: TlsOutcome::Bypassed,
        failure_reason: None,
    };

    // Client pins the server's own certificate, not the gate CA.
    let client_config = client_config_trusting(&srv_cert);
    let mut conn = rustls::ClientConnection::new(
        Arc::new(client_config),
        ServerName::try_from("pinned.test").unwrap(),
    )
    .unwrap();
    let mut hello_buf = Vec::new();
    conn.write_tls(&mut hello_buf).unwrap();

    let now = Instant::now();
    assert!(gate.should_intercept(&meta, srv_addr, now));

    let (evt_tx, evt_rx) = crossbeam_channel::unbounded();
    let app_tx = gate.spawn_flow(key, 2, meta.clone(), hello_buf, evt_tx);

    let transport = AppTransport {
        tx: app_tx,
        rx: evt_rx,
        pending: Vec::new(),
        pos: 0,
        eof: false,
    };
    let mut tls = rustls::StreamOwned::new(conn, transport);
    let mut buf = [0u8; 16];
    let result = tls.read(&mut buf);
    assert!(result.is_err(), "pinning client must reject the minted cert");

    // Give the worker a moment to record the failure.
    std::thread::sleep(Duration::from_millis(100));
    let hit = gate
        .whitelist
        .lock()
        .unwrap()
        .contains("pinned.test", Instant::now());
    assert!(hit, "host must be whitelisted after the failure");
    assert!(!gate.should_intercept(&meta, srv_addr, Instant::now()));

    // Interception resumes once the entry expires (injected clock).
    let later = Instant::now() + WHITELIST_TTL;
    assert!(gate.should_intercept(&meta, srv_addr, later));

    let (_, _, metas) = drain_copies(&copy_rx);
    assert!(metas
        .iter()
        .any(|m| m.outcome == TlsOutcome::HandshakeFailed));
}

/// Build an AnalyzerTx backed by a test channel.
fn analyzer_tx_for_test(tx: Sender<CopyMsg>) -> AnalyzerTx {
    AnalyzerTx::from_parts(tx, Arc::new(std::sync::atomic::AtomicU64::new(0)))
}

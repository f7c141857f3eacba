//! TLS Client Hello detection and field extraction from raw stream bytes.
//!
//! The forwarder uses this to decide whether to hand a TCP flow to the MITM
//! proxy; the analyzer uses it to report TLS metadata for flows it only sees
//! encrypted. Only the fields the gateway needs are pulled out (SNI, offered
//! versions/ciphers, ALPN).

use serde::{Deserialize, Serialize};

pub const RECORD_HANDSHAKE: u8 = 22;
pub const HANDSHAKE_CLIENT_HELLO: u8 = 1;
/// Accumulation cap: a Client Hello larger than this is treated as not-TLS.
const MAX_HELLO: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TlsOutcome {
    Intercepted,
    HandshakeFailed,
    Bypassed,
}

/// Flow-level metadata extracted from a Client Hello.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlsFlowMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sni: Option<String>,
    /// legacy_version from the hello body (0x0303 for TLS 1.2+ clients).
    pub client_version: u16,
    pub cipher_suites: Vec<u16>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub alpn: Vec<String>,
    pub outcome: TlsOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

#[derive(Debug, PartialEq)]
pub enum HelloDetect {
    /// Definitely not a TLS Client Hello stream.
    NotTls,
    /// Could still be one; feed more bytes.
    Truncated,
    Hello(TlsFlowMeta),
}

/// Inspect the first bytes of an app→remote stream. Needs at least 6 bytes to
/// say anything; returns `Truncated` until the full hello has accumulated
/// (handshake messages may span TLS records).
pub fn detect_client_hello(first_bytes: &[u8]) -> HelloDetect {
    if first_bytes.len() < 6 {
        // Even a 5-byte record header plus handshake type needs 6 bytes.
        if looks_plausible(first_bytes) {
            return HelloDetect::Truncated;
        }
        return HelloDetect::NotTls;
    }
    if first_bytes[0] != RECORD_HANDSHAKE
        || first_bytes[1] != 3
        || first_bytes[2] > 4
        || first_bytes[5] != HANDSHAKE_CLIENT_HELLO
    {
        return HelloDetect::NotTls;
    }

    // Concatenate handshake fragments across records.
    let mut handshake = Vec::new();
    let mut pos = 0;
    while handshake.len() < 4 || handshake.len() < 4 + hs_len(&handshake) {
        if pos + 5 > first_bytes.len() {
            return bounded_truncated(handshake.len());
        }
        if first_bytes[pos] != RECORD_HANDSHAKE || first_bytes[pos + 1] != 3 {
            return HelloDetect::NotTls;
        }
        let rec_len = u16::from_be_bytes([first_bytes[pos + 3], first_bytes[pos + 4]]) as usize;
        if rec_len == 0 || rec_len > 1 << 14 + 1 {
            return HelloDetect::NotTls;
        }
        let body_start = pos + 5;
        let body_end = body_start + rec_len;
        if body_end > first_bytes.len() {
            handshake.extend_from_slice(&first_bytes[body_start..]);
            return bounded_truncated(handshake.len());
        }
        handshake.extend_from_slice(&first_bytes[body_start..body_end]);
        pos = body_end;
        if handshake.len() > MAX_HELLO {
            return HelloDetect::NotTls;
        }
    }

    parse_client_hello_body(&handshake)
}

fn bounded_truncated(accumulated: usize) -> HelloDetect {
    if accumulated > MAX_HELLO {
        HelloDetect::NotTls
    } else {
        HelloDetect::Truncated
    }
}

fn looks_plausible(prefix: &[u8]) -> bool {
    let checks: [fn(u8) -> bool; 6] = [
        |b| b == RECORD_HANDSHAKE,
        |b| b == 3,
        |b| b <= 4,
        |_| true,
        |_| true,
        |b| b == HANDSHAKE_CLIENT_HELLO,
    ];
    prefix
        .iter()
        .zip(checks.iter())
        .all(|(&b, check)| check(b))
}

fn hs_len(handshake: &[u8]) -> usize {
    if handshake.len() < 4 {
        return usize::MAX >> 8;
    }
    u32::from_be_bytes([0, handshake[1], handshake[2], handshake[3]]) as usize
}

fn parse_client_hello_body(hs: &[u8]) -> HelloDetect {
    // hs: type(1) len(3) body
    if hs.len() < 4 || hs[0] != HANDSHAKE_CLIENT_HELLO {
        return HelloDetect::NotTls;
    }
    let body = &hs[4..4 + hs_len(hs).min(hs.len() - 4)];
    let mut cur = Cursor { buf: body, pos: 0 };

    let Some(client_version) = cur.u16() else {
        return HelloDetect::Truncated;
    };
    if !cur.skip(32) {
        return HelloDetect::Truncated; // random
    }
    let Some(sid_len) = cur.u8() else {
        return HelloDetect::Truncated;
    };
    if !cur.skip(sid_len as usize) {
        return HelloDetect::NotTls;
    }
    let Some(cs_len) = cur.u16() else {
        return HelloDetect::NotTls;
    };
    let mut cipher_suites = Vec::with_capacity((cs_len / 2) as usize);
    for _ in 0..cs_len / 2 {
        match cur.u16() {
            Some(cs) => cipher_suites.push(cs),
            None => return HelloDetect::NotTls,
        }
    }
    let Some(comp_len) = cur.u8() else {
        return HelloDetect::NotTls;
    };
    if !cur.skip(comp_len as usize) {
        return HelloDetect::NotTls;
    }

    let mut sni = None;
    let mut alpn = Vec::new();
    if let Some(ext_total) = cur.u16() {
        let ext_end = (cur.pos + ext_total as usize).min(body.len());
        while cur.pos + 4 <= ext_end {
            let ext_type = cur.u16().unwrap();
            let ext_len = cur.u16().unwrap() as usize;
            let ext_start = cur.pos;
            if ext_start + ext_len > body.len() {
                break;
            }
            let ext = &body[ext_start..ext_start + ext_len];
            match ext_type {
                0 => sni = parse_sni(ext),
                16 => alpn = parse_alpn(ext),
                _ => {}
            }
            cur.pos = ext_start + ext_len;
        }
    }

    HelloDetect::Hello(TlsFlowMeta {
        sni,
        client_version,
        cipher_suites,
        alpn,
        outcome: TlsOutcome::Bypassed,
        failure_reason: None,
    })
}

fn parse_sni(ext: &[u8]) -> Option<String> {
    // server_name_list: u16 len, then entries of (type u8, u16 len, bytes)
    let mut cur = Cursor { buf: ext, pos: 0 };
    let list_len = cur.u16()? as usize;
    let end = (cur.pos + list_len).min(ext.len());
    while cur.pos + 3 <= end {
        let name_type = cur.u8()?;
        let name_len = cur.u16()? as usize;
        if cur.pos + name_len > ext.len() {
            return None;
        }
        let name = &ext[cur.pos..cur.pos + name_len];
        cur.pos += name_len;
        if name_type == 0 {
            return String::from_utf8(name.to_vec()).ok();
        }
    }
    None
}

fn parse_alpn(ext: &[u8]) -> Vec<String> {
    let mut protocols = Vec::new();
    let mut cur = Cursor { buf: ext, pos: 0 };
    let Some(list_len) = cur.u16() else {
        return protocols;
    };
    let end = (cur.pos + list_len as usize).min(ext.len());
    while cur.pos < end {
        let Some(len) = cur.u8() else { break };
        if cur.pos + len as usize > ext.len() {
            break;
        }
        let p = &ext[cur.pos..cur.pos + len as usize];
        cur.pos += len as usize;
        protocols.push(String::from_utf8_lossy(p).into_owned());
    }
    protocols
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Option<u8> {
        let v = *self.buf.get(self.pos)?;
        self.pos += 1;
        Some(v)
    }
    fn u16(&mut self) -> Option<u16> {
        if self.pos + 2 > self.buf.len() {
            return None;
        }
        let v = u16::from_be_bytes([self.buf[self.pos], self.buf[self.pos + 1]]);
        self.pos += 2;
        Some(v)
    }
    fn skip(&mut self, n: usize) -> bool {
        if self.pos + n > self.buf.len() {
            return false;
        }
        self.pos += n;
        true
    }
}

#[cfg(test)]
pub mod tests {
    use super::*;

    /// Build a Client Hello by hand (independent of the parser), optionally
    /// split into several TLS records of `record_cap` bytes.
    pub fn build_client_hello(
        sni: Option<&str>,
        alpn: &[&str],
        record_cap: usize,
    ) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&0x0303u16.to_be_bytes()); // client_version
        body.extend_from_slice(&[0xab; 32]); // random
        body.push(0); // session id
        let ciphers: [u16; 3] = [0x1301, 0x1302, 0xc02f];
        body.extend_from_slice(&((ciphers.len() * 2) as u16).to_be_bytes());
        for c in ciphers {
            body.extend_from_slice(&c.to_be_bytes());
        }
        body.extend_from_slice(&[1, 0]); // compression: null

        let mut exts = Vec::new();
        if let Some(host) = sni {
            let mut sn = Vec::new();
            let entry_len = 3 + host.len();
            sn.extend_from_slice(&(entry_len as u16).to_be_bytes());
            sn.push(0); // host_name
            sn.extend_from_slice(&(host.len() as u16).to_be_bytes());
            sn.extend_from_slice(host.as_bytes());
            exts.extend_from_slice(&0u16.to_be_bytes());
            exts.extend_from_slice(&(sn.len() as u16).to_be_bytes());
            exts.extend_from_slice(&sn);
        }
        if !alpn.is_empty() {
            let mut list = Vec::new();
            for p in alpn {
                list.push(p.len() as u8);
                list.extend_from_slice(p.as_bytes());
            }
            let mut ext = Vec::new();
            ext.extend_from_slice(&(list.len() as u16).to_be_bytes());
            ext.extend_from_slice(&list);
            exts.extend_from_slice(&16u16.to_be_bytes());
            exts.extend_from_slice(&(ext.len() as u16).to_be_bytes());
            exts.extend_from_slice(&ext);
        }
        body.extend_from_slice(&(exts.len() as u16).to_be_bytes());
        body.extend_from_slice(&exts);

        let mut handshake = Vec::new();
        handshake.push(HANDSHAKE_CLIENT_HELLO);
        handshake.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
        handshake.extend_from_slice(&body);

        // Record framing, split at record_cap.
        let mut out = Vec::new();
        for chunk in handshake.chunks(record_cap) {
            out.push(RECORD_HANDSHAKE);
            out.extend_from_slice(&[0x03, 0x01]);
            out.extend_from_slice(&(chunk.len() as u16).to_be_bytes());
            out.extend_from_slice(chunk);
        }
        out
    }

    #[test]
    fn extracts_sni() {
        let hello = build_client_hello(Some("example.com"), &[], 4096);
        match detect_client_hello(&hello) {
            HelloDetect::Hello(meta) => {
                assert_eq!(meta.sni.as_deref(), Some("example.com"));
                assert_eq!(meta.client_version, 0x0303);
                assert_eq!(meta.cipher_suites, vec![0x1301, 0x1302, 0xc02f]);
            }
            other => panic!("expected hello, got {other:?}"),
        }
    }

    #[test]
    fn extracts_alpn() {
        let hello = build_client_hello(Some("h.test"), &["h2", "http/1.1"], 4096);
        match detect_client_hello(&hello) {
            HelloDetect::Hello(meta) => {
                assert_eq!(meta.alpn, vec!["h2".to_string(), "http/1.1".to_string()]);
            }
            other => panic!("expected hello, got {other:?}"),
        }
    }

    #[test]
    fn http_is_not_tls() {
        assert_eq!(
            detect_client_hello(b"GET / HTTP/1.1\r\n"),
            HelloDetect::NotTls
        );
    }

    #[test]
    fn three_bytes_is_truncated() {
        // 0x16 0x03 0x01 could still become a hello.
        assert_eq!(detect_client_hello(&[0x16, 0x03, 0x01]), HelloDetect::Truncated);
        // But garbage is rejected immediately.
        assert_eq!(detect_client_hello(&[0x00, 0x99]), HelloDetect::NotTls);
    }

    #[test]
    fn partial_hello_is_truncated_until_complete() {
        let hello = build_client_hello(Some("example.com"), &[], 4096);
        for cut in [6, 10, hello.len() - 1] {
            assert_eq!(
                detect_client_hello(&hello[..cut]),
                HelloDetect::Truncated,
                "cut at {cut}"
            );
        }
        assert!(matches!(
            detect_client_hello(&hello),
            HelloDetect::Hello(_)
        ));
    }

    #[test]
    fn hello_spanning_multiple_records() {
        let hello = build_client_hello(Some("span.example.com"), &["h2"], 16);
        match detect_client_hello(&hello) {
            HelloDetect::Hello(meta) => {
                assert_eq!(meta.sni.as_deref(), Some("span.example.com"));
            }
            other => panic!("expected hello, got {other:?}"),
        }
    }

    #[test]
    fn no_sni_is_still_a_hello() {
        let hello = build_client_hello(None, &[], 4096);
        match detect_client_hello(&hello) {
            HelloDetect::Hello(meta) => assert!(meta.sni.is_none()),
            other => panic!("expected hello, got {other:?}"),
        }
    }
}

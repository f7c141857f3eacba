//! Incremental HTTP/1.x stream parsing for the analyzer.
//!
//! Enough of the protocol to pair requests with responses, pull out the
//! fields worth reporting, and hand decoded bodies (dechunked, inflated) to
//! the leak scanner. HTTP/2 and QUIC payloads stay opaque.

use flate2::read::{DeflateDecoder, GzDecoder, ZlibDecoder};
use std::io::Read;

const METHODS: [&str; 8] = [
    "GET", "POST", "PUT", "DELETE", "HEAD", "OPTIONS", "PATCH", "TRACE",
];
const MAX_HEADER_BYTES: usize = 32 * 1024;

/// One parsed message (request or response).
#[derive(Debug, Clone)]
pub struct HttpMessage {
    /// Request: method; response: empty.
    pub method: String,
    /// Request target (path + query) for requests.
    pub path: String,
    /// Response status code.
    pub status: Option<u16>,
    pub headers: Vec<(String, String)>,
    /// Body bytes after transfer decoding (dechunked), before content
    /// decoding; capped at `body_cap`.
    pub body: Vec<u8>,
    pub body_truncated: bool,
    pub content_encoding: Option<String>,
}

impl HttpMessage {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn host(&self) -> Option<&str> {
        self.header("host")
    }

    /// Body with Content-Encoding gzip/deflate applied, for scanning.
    /// Returns None when the body is not compressed (scan `body` directly).
    pub fn decoded_body(&self, cap: usize) -> Option<Vec<u8>> {
        let enc = self.content_encoding.as_deref()?;
        inflate(enc, &self.body, cap)
    }
}

/// Bounded gzip/deflate decompression. Tries zlib first for "deflate" since
/// both raw and zlib-wrapped streams occur in the wild.
pub fn inflate(encoding: &str, body: &[u8], cap: usize) -> Option<Vec<u8>> {
    fn read_capped<R: Read>(mut r: R, cap: usize) -> Option<Vec<u8>> {
        let mut out = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match r.read(&mut buf) {
                Ok(0) => return Some(out),
                Ok(n) => {
                    let take = n.min(cap - out.len());
                    out.extend_from_slice(&buf[..take]);
                    if out.len() >= cap {
                        return Some(out);
                    }
                }
                Err(_) => {
                    // Partial streams still yield what was decodable.
                    return if out.is_empty() { None } else { Some(out) };
                }
            }
        }
    }
    match encoding.to_ascii_lowercase().as_str() {
        "gzip" | "x-gzip" => read_capped(GzDecoder::new(body), cap),
        "deflate" => read_capped(ZlibDecoder::new(body), cap)
            .or_else(|| read_capped(DeflateDecoder::new(body), cap)),
        _ => None,
    }
}

#[derive(Debug, PartialEq, Eq)]
enum State {
    StartLine,
    Headers,
    BodyLength(usize),
    BodyChunkSize,
    BodyChunkData(usize),
    BodyChunkCrlf,
    BodyTrailers,
    /// Close-delimited response body.
    BodyUntilEof,
    /// The stream is not HTTP; stop consuming.
    Opaque,
}

/// Incremental parser for one direction of a TCP stream.
pub struct HttpStreamParser {
    is_request: bool,
    buf: Vec<u8>,
    state: State,
    current: Option<HttpMessage>,
    body_cap: usize,
    body_seen: usize,
    done: Vec<HttpMessage>,
}

impl HttpStreamParser {
    pub fn request(body_cap: usize) -> HttpStreamParser {
        Self::new(true, body_cap)
    }

    pub fn response(body_cap: usize) -> HttpStreamParser {
        Self::new(false, body_cap)
    }

    fn new(is_request: bool, body_cap: usize) -> HttpStreamParser {
        HttpStreamParser {
            is_request,
            buf: Vec::new(),
            state: State::StartLine,
            current: None,
            body_cap,
            body_seen: 0,
            done: Vec::new(),
        }
    }

    pub fn is_opaque(&self) -> bool {
        self.state == State::Opaque
    }

    /// Feed stream bytes; returns messages completed by this push.
    pub fn push(&mut self, bytes: &[u8]) -> Vec<HttpMessage> {
        if self.state == State::Opaque {
            return Vec::new();
        }
        self.buf.extend_from_slice(bytes);
        self.advance();
        std::mem::take(&mut self.done)
    }

    /// Signal end-of-stream (flushes close-delimited bodies).
    pub fn finish(&mut self) -> Vec<HttpMessage> {
        if self.state == State::BodyUntilEof {
            self.take_body_bytes(self.buf.len());
            self.complete();
        }
        std::mem::take(&mut self.done)
    }

    fn advance(&mut self) {
        loop {
            match self.state {
                State::StartLine | State::Headers => {
                    let Some(head_end) = find_double_crlf(&self.buf) else {
                        if self.buf.len() > MAX_HEADER_BYTES {
                            self.state = State::Opaque;
                        }
                        return;
                    };
                    let head: Vec<u8> = self.buf.drain(..head_end + 4).collect();
                    if !self.parse_head(&head[..head_end]) {
                        self.state = State::Opaque;
                        return;
                    }
                }
                State::BodyLength(remaining) => {
                    let take = remaining.min(self.buf.len());
                    self.take_body_bytes(take);
                    let left = remaining - take;
                    if left == 0 {
                        self.complete();
                        self.state = State::StartLine;
                    } else {
                        self.state = State::BodyLength(left);
                        return;
                    }
                }
                State::BodyChunkSize => {
                    let Some(line_end) = find_crlf(&self.buf) else {
                        if self.buf.len() > 1024 {
                            self.state = State::Opaque;
                        }
                        return;
                    };
                    let line: Vec<u8> = self.buf.drain(..line_end + 2).collect();
                    let text = String::from_utf8_lossy(&line[..line_end]);
                    let size_part = text.split(';').next().unwrap_or("").trim();
                    let Ok(size) = usize::from_str_radix(size_part, 16) else {
                        self.state = State::Opaque;
                        return;
                    };
                    self.state = if size == 0 {
                        State::BodyTrailers
                    } else {
                        State::BodyChunkData(size)
                    };
                }
                State::BodyChunkData(remaining) => {
                    let take = remaining.min(self.buf.len());
                    self.take_body_bytes(take);
                    let left = remaining - take;
                    if left == 0 {
                        self.state = State::BodyChunkCrlf;
                    } else {
                        self.state = State::BodyChunkData(left);
                        return;
                    }
                }
                State::BodyChunkCrlf => {
                    if self.buf.len() < 2 {
                        return;
                    }
                    self.buf.drain(..2);
                    self.state = State::BodyChunkSize;
                }
                State::BodyTrailers => {
                    // Trailers end at a bare CRLF (possibly immediately).
                    if self.buf.starts_with(b"\r\n") {
                        self.buf.drain(..2);
                        self.complete();
                        self.state = State::StartLine;
                    } else if let Some(end) = find_double_crlf(&self.buf) {
                        self.buf.drain(..end + 4);
                        self.complete();
                        self.state = State::StartLine;
                    } else {
                        return;
                    }
                }
                State::BodyUntilEof => {
                    let n = self.buf.len();
                    self.take_body_bytes(n);
                    return;
                }
                State::Opaque => return,
            }
        }
    }

    fn take_body_bytes(&mut self, n: usize) {
        let chunk: Vec<u8> = self.buf.drain(..n).collect();
        if let Some(msg) = self.current.as_mut() {
            let room = self.body_cap.saturating_sub(msg.body.len());
            let keep = chunk.len().min(room);
            msg.body.extend_from_slice(&chunk[..keep]);
            if keep < chunk.len() {
                msg.body_truncated = true;
            }
        }
        self.body_seen += n;
    }

    fn complete(&mut self) {
        if let Some(msg) = self.current.take() {
            self.done.push(msg);
        }
        self.body_seen = 0;
    }

    fn parse_head(&mut self, head: &[u8]) -> bool {
        let text = String::from_utf8_lossy(head);
        let mut lines = text.split("\r\n");
        let Some(start) = lines.next() else {
            return false;
        };

        let mut msg = HttpMessage {
            method: String::new(),
            path: String::new(),
            status: None,
            headers: Vec::new(),
            body: Vec::new(),
            body_truncated: false,
            content_encoding: None,
        };

        if self.is_request {
            let mut parts = start.split_ascii_whitespace();
            let (Some(method), Some(path), Some(version)) =
                (parts.next(), parts.next(), parts.next())
            else {
                return false;
            };
            if !METHODS.contains(&method) || !version.starts_with("HTTP/1") {
                return false;
            }
            msg.method = method.to_string();
            msg.path = path.to_string();
        } else {
            let mut parts = start.split_ascii_whitespace();
            let (Some(version), Some(code)) = (parts.next(), parts.next()) else {
                return false;
            };
            if !version.starts_with("HTTP/1") {
                return false;
            }
            let Ok(code) = code.parse::<u16>() else {
                return false;
            };
            msg.status = Some(code);
        }

        for line in lines {
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once(':') else {
                return false;
            };
            msg.headers.push((k.trim().to_string(), v.trim().to_string()));
        }
        msg.content_encoding = msg.header("content-encoding").map(|s| s.to_ascii_lowercase());

        // Decide how the body is delimited.
        let chunked = msg
            .header("transfer-encoding")
            .map(|v| v.to_ascii_lowercase().contains("chunked"))
            .unwrap_or(false);
        let content_length = msg
            .header("content-length")
            .and_then(|v| v.trim().parse::<usize>().ok());
        let head_only = self.is_request && (msg.method == "GET" || msg.method == "HEAD")
            || msg.status.map(|s| s == 204 || s == 304 || s / 100 == 1).unwrap_or(false);

        self.current = Some(msg);
        self.state = if chunked {
            State::BodyChunkSize
        } else {
            match content_length {
                Some(0) => {
                    self.complete();
                    State::StartLine
                }
                Some(n) => State::BodyLength(n),
                None if head_only || self.is_request => {
                    // Requests without a length have no body.
                    self.complete();
                    State::StartLine
                }
                None => State::BodyUntilEof,
            }
        };
        true
    }
}

fn find_crlf(buf: &[u8]) -> Option<usize> {
    buf.windows(2).position(|w| w == b"\r\n")
}

fn find_double_crlf(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

/// Quick sniff: does this stream prefix look like an HTTP/1.x request?
pub fn looks_like_http_request(prefix: &[u8]) -> bool {
    let text = match std::str::from_utf8(&prefix[..prefix.len().min(16)]) {
        Ok(t) => t,
        Err(_) => return false,
    };
    METHODS
        .iter()
        .any(|m| text.starts_with(m) && text[m.len()..].starts_with(' '))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    #[test]
    fn parses_get_with_query() {
        let mut p = HttpStreamParser::request(1 << 20);
        let msgs = p.push(b"GET /a?imei=86753091 HTTP/1.1\r\nHost: t.example\r\n\r\n");
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].method, "GET");
        assert_eq!(msgs[0].path, "/a?imei=86753091");
        assert_eq!(msgs[0].host(), Some("t.example"));
    }

    #[test]
    fn split_across_pushes() {
        let mut p = HttpStreamParser::request(1 << 20);
        assert!(p.push(b"POST /upload HTTP/1.1\r\nHost: h\r\nContent-Le").is_empty());
        assert!(p.push(b"ngth: 5\r\n\r\nhel").is_empty());
        let msgs = p.push(b"lo");
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].body, b"hello");
    }

    #[test]
    fn chunked_response_decoded() {
        let mut p = HttpStreamParser::response(1 << 20);
        let msgs = p.push(
            b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n5\r\nhello\r\n6\r\n world\r\n0\r\n\r\n",
        );
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].status, Some(200));
        assert_eq!(msgs[0].body, b"hello world");
    }

    #[test]
    fn gzip_body_inflates() {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(b"secret=867530912345678").unwrap();
        let gz = enc.finish().unwrap();

        let mut p = HttpStreamParser::response(1 << 20);
        let mut stream = format!(
            "HTTP/1.1 200 OK\r\nContent-Encoding: gzip\r\nContent-Length: {}\r\n\r\n",
            gz.len()
        )
        .into_bytes();
        stream.extend_from_slice(&gz);
        let msgs = p.push(&stream);
        assert_eq!(msgs.len(), 1);
        let inflated = msgs[0].decoded_body(1 << 20).unwrap();
        assert_eq!(inflated, b"secret=867530912345678");
    }

    #[test]
    fn binary_stream_goes_opaque() {
        let mut p = HttpStreamParser::request(1 << 20);
        let msgs = p.push(&[0u8, 1, 2, 3, 0xff, 0xfe, b'\r', b'\n', b'\r', b'\n']);
        assert!(msgs.is_empty());
        assert!(p.is_opaque());
        assert!(!looks_like_http_request(&[0u8, 1, 2, 3]));
        assert!(looks_like_http_request(b"GET / HTTP/1.1\r\n"));
    }

    #[test]
    fn close_delimited_body_flushes_at_eof() {
        let mut p = HttpStreamParser::response(1 << 20);
        assert!(p.push(b"HTTP/1.1 200 OK\r\n\r\npartial body").is_empty());
        let msgs = p.finish();
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].body, b"partial body");
    }

    #[test]
    fn body_cap_truncates_scan_window() {
        let mut p = HttpStreamParser::response(8);
        let msgs = p.push(b"HTTP/1.1 200 OK\r\nContent-Length: 20\r\n\r\n01234567890123456789");
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].body, b"01234567");
        assert!(msgs[0].body_truncated);
    }

    #[test]
    fn pipelined_requests() {
        let mut p = HttpStreamParser::request(1 << 20);
        let msgs = p.push(b"GET /a HTTP/1.1\r\nHost: h\r\n\r\nGET /b HTTP/1.1\r\nHost: h\r\n\r\n");
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].path, "/a");
        assert_eq!(msgs[1].path, "/b");
    }
}

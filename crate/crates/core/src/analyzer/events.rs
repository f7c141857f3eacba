//! The JSONL event stream: one JSON object per line, schema version carried
//! on every record.

use crate::analyzer::attribution::ProcessInfo;
use crate::analyzer::dns::DnsAnswer;
use crate::analyzer::patterns::LeakEncoding;
use crate::flow::{FlowKey, TransportProto};
use crate::tls::TlsFlowMeta;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub const SCHEMA_VERSION: u32 = 1;
const FLUSH_EVERY: Duration = Duration::from_millis(100);

/// Monotonic + wall timestamps carried by every event. The monotonic value is
/// microseconds since the analyzer started (or since the capture began, for
/// replays), so per-flow ordering survives serialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventTs {
    pub mono_us: u64,
    pub wall_unix_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeakLocation {
    Url,
    Header,
    Body,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AnalyzerEvent {
    FlowOpened {
        flow_id: u64,
        proto: TransportProto,
        app: String,
        remote: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        process: Option<ProcessInfo>,
        #[serde(skip_serializing_if = "Option::is_none")]
        hostname: Option<String>,
        ts: EventTs,
    },
    DnsTransaction {
        flow_id: u64,
        qname: String,
        qtype: u16,
        answers: Vec<DnsAnswer>,
        #[serde(skip_serializing_if = "Option::is_none")]
        rtt_ms: Option<f64>,
        ts: EventTs,
    },
    HttpTransaction {
        flow_id: u64,
        method: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        host: Option<String>,
        path: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        status: Option<u16>,
        #[serde(skip_serializing_if = "Option::is_none")]
        content_encoding: Option<String>,
        ts: EventTs,
    },
    TlsMetadata {
        flow_id: u64,
        #[serde(flatten)]
        meta: TlsFlowMeta,
        ts: EventTs,
    },
    LeakDetected {
        flow_id: u64,
        pattern_name: String,
        location: LeakLocation,
        encoding: LeakEncoding,
        offset: usize,
        ts: EventTs,
    },
    FlowClosed {
        flow_id: u64,
        bytes_up: u64,
        bytes_down: u64,
        ts: EventTs,
    },
}

impl AnalyzerEvent {
    pub fn flow_id(&self) -> u64 {
        match self {
            AnalyzerEvent::FlowOpened { flow_id, .. }
            | AnalyzerEvent::DnsTransaction { flow_id, .. }
            | AnalyzerEvent::HttpTransaction { flow_id, .. }
            | AnalyzerEvent::TlsMetadata { flow_id, .. }
            | AnalyzerEvent::LeakDetected { flow_id, .. }
            | AnalyzerEvent::FlowClosed { flow_id, .. } => *flow_id,
        }
    }

    pub fn ts(&self) -> EventTs {
        match self {
            AnalyzerEvent::FlowOpened { ts, .. }
            | AnalyzerEvent::DnsTransaction { ts, .. }
            | AnalyzerEvent::HttpTransaction { ts, .. }
            | AnalyzerEvent::TlsMetadata { ts, .. }
            | AnalyzerEvent::LeakDetected { ts, .. }
            | AnalyzerEvent::FlowClosed { ts, .. } => *ts,
        }
    }
}

#[derive(Serialize)]
struct Record<'a> {
    v: u32,
    #[serde(flatten)]
    event: &'a AnalyzerEvent,
}

#[derive(Deserialize)]
struct OwnedRecord {
    #[allow(dead_code)]
    v: u32,
    #[serde(flatten)]
    event: AnalyzerEvent,
}

/// Parse one JSONL line back into an event (used by tests and tools).
pub fn parse_event_line(line: &str) -> Result<AnalyzerEvent, serde_json::Error> {
    serde_json::from_str::<OwnedRecord>(line).map(|r| r.event)
}

/// Buffered JSONL writer flushing at most every 100 ms.
pub struct EventSink {
    out: Box<dyn Write + Send>,
    last_flush: Instant,
    pub events_written: u64,
}

impl EventSink {
    pub fn to_file(path: &std::path::Path) -> io::Result<EventSink> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self::new(Box::new(io::BufWriter::new(file))))
    }

    pub fn new(out: Box<dyn Write + Send>) -> EventSink {
        EventSink {
            out,
            last_flush: Instant::now(),
            events_written: 0,
        }
    }

    pub fn write_event(&mut self, event: &AnalyzerEvent) -> io::Result<()> {
        let rec = Record {
            v: SCHEMA_VERSION,
            event,
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        self.events_written += 1;
        if self.last_flush.elapsed() >= FLUSH_EVERY {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.last_flush = Instant::now();
        self.out.flush()
    }
}

pub fn wall_unix_ms(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn key_endpoints(key: &FlowKey) -> (String, String) {
    (key.app.to_string(), key.remote.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    #[derive(Clone, Default)]
    struct SharedBuf(Arc<Mutex<Vec<u8>>>);

    impl Write for SharedBuf {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    impl SharedBuf {
        fn text(&self) -> String {
            String::from_utf8(self.0.lock().unwrap().clone()).unwrap()
        }
    }

    #[test]
    fn leak_event_round_trips() {
        let ev = AnalyzerEvent::LeakDetected {
            flow_id: 42,
            pattern_name: "imei".into(),
            location: LeakLocation::Query,
            encoding: LeakEncoding::Base64,
            offset: 17,
            ts: EventTs {
                mono_us: 1234,
                wall_unix_ms: 1700000000000,
            },
        };
        let buf = SharedBuf::default();
        let mut sink = EventSink::new(Box::new(buf.clone()));
        sink.write_event(&ev).unwrap();
        sink.flush().unwrap();
        let line = buf.text();
        assert!(line.contains("\"v\":1"));
        let back = parse_event_line(line.trim()).unwrap();
        assert_eq!(back, ev);
    }

    #[test]
    fn events_one_per_line() {
        let buf = SharedBuf::default();
        let mut sink = EventSink::new(Box::new(buf.clone()));
        for i in 0..3 {
            sink.write_event(&AnalyzerEvent::FlowClosed {
                flow_id: i,
                bytes_up: 1,
                bytes_down: 2,
                ts: EventTs {
                    mono_us: i * 10,
                    wall_unix_ms: 0,
                },
            })
            .unwrap();
        }
        sink.flush().unwrap();
        let text = buf.text();
        assert_eq!(text.lines().count(), 3);
        for line in text.lines() {
            parse_event_line(line).unwrap();
        }
    }
}

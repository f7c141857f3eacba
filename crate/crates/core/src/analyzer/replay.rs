//! Offline analysis: replay a pcap through the analyzer, producing the same
//! JSONL event stream the live gateway would emit. Deterministic: flow ids
//! are assigned in first-seen order and timestamps come from the capture.

use super::{AnalyzerConfig, CopyMsg, MsgTs, Worker};
use crate::analyzer::events::EventSink;
use crate::analyzer::pcap::{self, PcapError};
use crate::flow::{Direction, FlowKey, TransportProto};
use crate::packet::{self, Transport};
use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Default, Clone)]
pub struct ReplaySummary {
    pub packets: usize,
    pub skipped_packets: usize,
    pub flows: usize,
    pub events: u64,
}

/// Replay `pcap_path` and write events to `sink`. The first endpoint seen on
/// a flow is treated as the app side (captures do not say which side was
/// behind the device).
pub fn replay_pcap(
    pcap_path: &Path,
    cfg: AnalyzerConfig,
    sink: EventSink,
) -> Result<ReplaySummary, ReplayError> {
    let packets = pcap::read_pcap(pcap_path)?;
    let mut summary = ReplaySummary {
        packets: packets.len(),
        ..Default::default()
    };

    let mut worker = Worker::new(cfg, sink);
    let epoch = Instant::now();
    worker.set_epoch(epoch);
    let capture_start = packets.first().map(|p| p.ts).unwrap_or(0.0);

    // (unordered endpoints, proto) → (flow_id, app side endpoint)
    let mut flows: HashMap<(TransportProto, SocketAddr, SocketAddr), (u64, SocketAddr)> =
        HashMap::new();
    let mut next_flow_id = 1u64;
    let mut byte_counts: HashMap<u64, (u64, u64)> = HashMap::new();
    let mut close_order: Vec<u64> = Vec::new();
    let mut last_ts = MsgTs {
        mono: epoch,
        wall: SystemTime::now(),
    };

    for captured in &packets {
        let parsed = match packet::parse_packet(&captured.ip_bytes) {
            Ok(p) => p,
            Err(_) => {
                summary.skipped_packets += 1;
                continue;
            }
        };
        let proto = match parsed.transport {
            Transport::Tcp(_) => TransportProto::Tcp,
            Transport::Udp(_) => TransportProto::Udp,
        };
        let src = SocketAddr::new(parsed.src_addr(), parsed.src_port());
        let dst = SocketAddr::new(parsed.dst_addr(), parsed.dst_port());
        let (lo, hi) = if src <= dst { (src, dst) } else { (dst, src) };
        let map_key = (proto, lo, hi);

        let ts = MsgTs {
            mono: epoch + Duration::from_secs_f64((captured.ts - capture_start).max(0.0)),
            wall: UNIX_EPOCH + Duration::from_secs_f64(captured.ts.max(0.0)),
        };
        last_ts = ts;

        let (flow_id, app_side) = match flows.get(&map_key) {
            Some(v) => *v,
            None => {
                let id = next_flow_id;
                next_flow_id += 1;
                // First packet defines the app side: flows initiate app→remote.
                flows.insert(map_key, (id, src));
                let key = FlowKey {
                    proto,
                    app: src,
                    remote: dst,
                };
                worker.process_msg(CopyMsg::FlowOpened {
                    flow_id: id,
                    key,
                    ts,
                });
                close_order.push(id);
                summary.flows += 1;
                (id, src)
            }
        };

        let direction = if src == app_side {
            Direction::Outbound
        } else {
            Direction::Inbound
        };
        let payload = parsed.payload();
        if !payload.is_empty() {
            let counts = byte_counts.entry(flow_id).or_insert((0, 0));
            match direction {
                Direction::Outbound => counts.0 += payload.len() as u64,
                Direction::Inbound => counts.1 += payload.len() as u64,
            }
            worker.process_msg(CopyMsg::Data {
                flow_id,
                direction,
                bytes: payload.to_vec(),
                ts,
            });
        }
    }

    for flow_id in close_order {
        let (bytes_up, bytes_down) = byte_counts.get(&flow_id).copied().unwrap_or((0, 0));
        worker.process_msg(CopyMsg::FlowClosed {
            flow_id,
            bytes_up,
            bytes_down,
            ts: last_ts,
        });
    }

    worker.sink_mut().flush()?;
    summary.events = worker.sink_mut().events_written;
    Ok(summary)
}

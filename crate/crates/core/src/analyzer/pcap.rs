//! Classic (legacy) pcap container reading and writing. Reading feeds the
//! offline replay path; the writer exists so tests and tools can craft
//! captures without external tooling.

use std::io::{self, Read, Write};
use std::path::Path;

pub const LINKTYPE_NULL: u32 = 0;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;
pub const LINKTYPE_LINUX_SLL: u32 = 113;

const MAGIC_US: u32 = 0xa1b2_c3d4;
const MAGIC_NS: u32 = 0xa1b2_3c4d;

#[derive(Debug, thiserror::Error)]
pub enum PcapError {
    #[error("corrupt pcap: {0}")]
    Corrupt(&'static str),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct CapturedPacket {
    /// Seconds since the epoch, with sub-second precision.
    pub ts: f64,
    /// Raw IP packet (link framing already stripped).
    pub ip_bytes: Vec<u8>,
}

/// Read a capture file, stripping link-layer framing down to IP packets.
/// Non-IP frames (ARP and friends) are skipped.
pub fn read_pcap(path: &Path) -> Result<Vec<CapturedPacket>, PcapError> {
    let mut file = std::fs::File::open(path)?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;
    parse_pcap(&data)
}

pub fn parse_pcap(data: &[u8]) -> Result<Vec<CapturedPacket>, PcapError> {
    if data.len() < 24 {
        return Err(PcapError::Corrupt("missing global header"));
    }
    let magic_be = u32::from_be_bytes([data[0], data[1], data[2], data[3]]);
    let magic_le = u32::from_le_bytes([data[0], data[1], data[2], data[3]]);
    let (le, nanos) = if magic_le == MAGIC_US {
        (true, false)
    } else if magic_be == MAGIC_US {
        (false, false)
    } else if magic_le == MAGIC_NS {
        (true, true)
    } else if magic_be == MAGIC_NS {
        (false, true)
    } else {
        return Err(PcapError::Corrupt("bad magic"));
    };
    let u32f = |b: &[u8]| {
        if le {
            u32::from_le_bytes([b[0], b[1], b[2], b[3]])
        } else {
            u32::from_be_bytes([b[0], b[1], b[2], b[3]])
        }
    };
    let linktype = u32f(&data[20..24]);

    let mut packets = Vec::new();
    let mut pos = 24;
    while pos < data.len() {
        if pos + 16 > data.len() {
            return Err(PcapError::Corrupt("truncated record header"));
        }
        let ts_sec = u32f(&data[pos..pos + 4]) as f64;
        let ts_sub = u32f(&data[pos + 4..pos + 8]) as f64;
        let incl_len = u32f(&data[pos + 8..pos + 12]) as usize;
        pos += 16;
        if pos + incl_len > data.len() {
            return Err(PcapError::Corrupt("truncated record body"));
        }
        let frame = &data[pos..pos + incl_len];
        pos += incl_len;

        let ts = ts_sec + ts_sub / if nanos { 1e9 } else { 1e6 };
        if let Some(ip) = strip_link_header(linktype, frame)? {
            packets.push(CapturedPacket {
                ts,
                ip_bytes: ip.to_vec(),
            });
        }
    }
    Ok(packets)
}

fn strip_link_header(linktype: u32, frame: &[u8]) -> Result<Option<&[u8]>, PcapError> {
    match linktype {
        LINKTYPE_RAW => Ok(Some(frame)),
        LINKTYPE_NULL => {
            if frame.len() < 4 {
                return Err(PcapError::Corrupt("short NULL frame"));
            }
            Ok(Some(&frame[4..]))
        }
        LINKTYPE_ETHERNET => {
            if frame.len() < 14 {
                return Err(PcapError::Corrupt("short ethernet frame"));
            }
            let ethertype = u16::from_be_bytes([frame[12], frame[13]]);
            match ethertype {
                0x0800 | 0x86dd => Ok(Some(&frame[14..])),
                _ => Ok(None),
            }
        }
        LINKTYPE_LINUX_SLL => {
            if frame.len() < 16 {
                return Err(PcapError::Corrupt("short SLL frame"));
            }
            let proto = u16::from_be_bytes([frame[14], frame[15]]);
            match proto {
                0x0800 | 0x86dd => Ok(Some(&frame[16..])),
                _ => Ok(None),
            }
        }
        other => Err(PcapError::UnsupportedLinkType(other)),
    }
}

/// Write a LINKTYPE_RAW capture (microsecond timestamps, little-endian).
pub fn write_pcap(path: &Path, packets: &[CapturedPacket]) -> Result<(), PcapError> {
    let mut out = std::fs::File::create(path)?;
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(&MAGIC_US.to_le_bytes());
    header.extend_from_slice(&2u16.to_le_bytes()); // major
    header.extend_from_slice(&4u16.to_le_bytes()); // minor
    header.extend_from_slice(&[0u8; 8]); // thiszone + sigfigs
    header.extend_from_slice(&65535u32.to_le_bytes()); // snaplen
    header.extend_from_slice(&LINKTYPE_RAW.to_le_bytes());
    out.write_all(&header)?;
    for p in packets {
        let sec = p.ts.trunc() as u32;
        let usec = ((p.ts - p.ts.trunc()) * 1e6).round() as u32;
        out.write_all(&sec.to_le_bytes())?;
        out.write_all(&usec.to_le_bytes())?;
        out.write_all(&(p.ip_bytes.len() as u32).to_le_bytes())?;
        out.write_all(&(p.ip_bytes.len() as u32).to_le_bytes())?;
        out.write_all(&p.ip_bytes)?;
    }
    out.flush()?;
    Ok(())
}

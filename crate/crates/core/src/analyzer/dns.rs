//! DNS message parsing (enough to track transactions and map IPs to names)
//! plus the answer cache used for flow→hostname attribution.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::time::{Duration, Instant};

pub const QTYPE_A: u16 = 1;
pub const QTYPE_CNAME: u16 = 5;
pub const QTYPE_AAAA: u16 = 28;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DnsParseError {
    #[error("truncated DNS message")]
    Truncated,
    #[error("malformed DNS message: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsAnswer {
    pub name: String,
    pub rtype: u16,
    pub ttl: u32,
    pub data: DnsRdata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DnsRdata {
    A(Ipv4Addr),
    Aaaa(Ipv6Addr),
    Cname(String),
    Other(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsMessage {
    pub id: u16,
    pub is_response: bool,
    pub rcode: u8,
    pub qname: String,
    pub qtype: u16,
    pub answers: Vec<DnsAnswer>,
}

/// Parse a DNS message from a UDP payload. Question and answer sections are
/// decoded (with name compression); authority/additional records are skipped.
pub fn parse_dns(msg: &[u8]) -> Result<DnsMessage, DnsParseError> {
    if msg.len() < 12 {
        return Err(DnsParseError::Truncated);
    }
    let id = u16::from_be_bytes([msg[0], msg[1]]);
    let flags = u16::from_be_bytes([msg[2], msg[3]]);
    let is_response = flags & 0x8000 != 0;
    let rcode = (flags & 0x000f) as u8;
    let qdcount = u16::from_be_bytes([msg[4], msg[5]]);
    let ancount = u16::from_be_bytes([msg[6], msg[7]]);

    let mut pos = 12;
    let mut qname = String::new();
    let mut qtype = 0;
    for i in 0..qdcount {
        let (name, next) = read_name(msg, pos)?;
        if next + 4 > msg.len() {
            return Err(DnsParseError::Truncated);
        }
        if i == 0 {
            qname = name;
            qtype = u16::from_be_bytes([msg[next], msg[next + 1]]);
        }
        pos = next + 4;
    }

    let mut answers = Vec::new();
    for _ in 0..ancount {
        let (name, next) = read_name(msg, pos)?;
        if next + 10 > msg.len() {
            return Err(DnsParseError::Truncated);
        }
        let rtype = u16::from_be_bytes([msg[next], msg[next + 1]]);
        let ttl = u32::from_be_bytes([msg[next + 4], msg[next + 5], msg[next + 6], msg[next + 7]]);
        let rdlen = u16::from_be_bytes([msg[next + 8], msg[next + 9]]) as usize;
        let rdata_at = next + 10;
        if rdata_at + rdlen > msg.len() {
            return Err(DnsParseError::Truncated);
        }
        let rdata = &msg[rdata_at..rdata_at + rdlen];
        let data = match rtype {
            QTYPE_A => {
                if rdlen != 4 {
                    return Err(DnsParseError::Malformed("A rdata length"));
                }
                DnsRdata::A(Ipv4Addr::new(rdata[0], rdata[1], rdata[2], rdata[3]))
            }
            QTYPE_AAAA => {
                if rdlen != 16 {
                    return Err(DnsParseError::Malformed("AAAA rdata length"));
                }
                let mut o = [0u8; 16];
                o.copy_from_slice(rdata);
                DnsRdata::Aaaa(Ipv6Addr::from(o))
            }
            QTYPE_CNAME => {
                let (target, _) = read_name(msg, rdata_at)?;
                DnsRdata::Cname(target)
            }
            other => DnsRdata::Other(other),
        };
        answers.push(DnsAnswer {
            name,
            rtype,
            ttl,
            data,
        });
        pos = rdata_at + rdlen;
    }

    Ok(DnsMessage {
        id,
        is_response,
        rcode,
        qname,
        qtype,
        answers,
    })
}

/// Decode a possibly-compressed domain name starting at `pos`. Returns the
/// name and the offset just past its in-place encoding.
fn read_name(msg: &[u8], pos: usize) -> Result<(String, usize), DnsParseError> {
    let mut labels: Vec<String> = Vec::new();
    let mut i = pos;
    let mut jumps = 0;
    let mut end = None; // set at the first compression pointer
    loop {
        if i >= msg.len() {
            return Err(DnsParseError::Truncated);
        }
        let len = msg[i];
        if len == 0 {
            let after = i + 1;
            return Ok((labels.join("."), end.unwrap_or(after)));
        }
        if len & 0xc0 == 0xc0 {
            if i + 1 >= msg.len() {
                return Err(DnsParseError::Truncated);
            }
            let target = (((len & 0x3f) as usize) << 8) | msg[i + 1] as usize;
            if target >= msg.len() {
                return Err(DnsParseError::Malformed("compression pointer out of range"));
            }
            if end.is_none() {
                end = Some(i + 2);
            }
            jumps += 1;
            if jumps > 32 {
                return Err(DnsParseError::Malformed("compression pointer loop"));
            }
            i = target;
            continue;
        }
        if len & 0xc0 != 0 {
            return Err(DnsParseError::Malformed("reserved label type"));
        }
        let start = i + 1;
        let stop = start + len as usize;
        if stop > msg.len() {
            return Err(DnsParseError::Truncated);
        }
        labels.push(String::from_utf8_lossy(&msg[start..stop]).into_owned());
        if labels.iter().map(|l| l.len() + 1).sum::<usize>() > 255 {
            return Err(DnsParseError::Malformed("name too long"));
        }
        i = stop;
    }
}

/// IP → hostname map fed by observed answers; entries honor record TTLs and
/// the latest answer wins.
#[derive(Debug, Default)]
pub struct DnsCache {
    map: HashMap<IpAddr, (String, Instant)>,
}

impl DnsCache {
    pub fn new() -> DnsCache {
        DnsCache::default()
    }

    /// Record A/AAAA answers. CNAME chains resolve to the original query
    /// name, which is the name the app asked for.
    pub fn insert_answers(&mut self, msg: &DnsMessage, now: Instant) {
        let owner = if msg.qname.is_empty() {
            None
        } else {
            Some(msg.qname.clone())
        };
        for ans in &msg.answers {
            let ip = match ans.data {
                DnsRdata::A(ip) => IpAddr::V4(ip),
                DnsRdata::Aaaa(ip) => IpAddr::V6(ip),
                _ => continue,
            };
            let name = owner.clone().unwrap_or_else(|| ans.name.clone());
            let expiry = now + Duration::from_secs(u64::from(ans.ttl));
            self.map.insert(ip, (name, expiry));
        }
    }

    pub fn lookup(&self, ip: IpAddr, now: Instant) -> Option<&str> {
        match self.map.get(&ip) {
            Some((name, expiry)) if now < *expiry => Some(name),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Drop expired entries (called opportunistically).
    pub fn purge(&mut self, now: Instant) {
        self.map.retain(|_, (_, expiry)| now < *expiry);
    }
}

/// Matches responses to in-flight queries to compute per-transaction RTT.
#[derive(Debug, Default)]
pub struct DnsTracker {
    pending: HashMap<(u64, u16), Instant>,
}

impl DnsTracker {
    pub fn new() -> DnsTracker {
        DnsTracker::default()
    }

    pub fn on_query(&mut self, flow_id: u64, id: u16, sent: Instant) {
        self.pending.insert((flow_id, id), sent);
    }

    /// RTT for a response, when its query was seen.
    pub fn on_response(&mut self, flow_id: u64, id: u16, received: Instant) -> Option<Duration> {
        self.pending
            .remove(&(flow_id, id))
            .map(|sent| received.saturating_duration_since(sent))
    }
}

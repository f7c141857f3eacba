//! IPv4/IPv6 + TCP/UDP wire codec.
//!
//! Parses raw IP packets coming off the TUN device into structured form and
//! synthesizes wire bytes for packets we originate toward the app. Parsing
//! preserves every header field so that `serialize(parse(bytes)) == bytes`
//! holds for any packet the codec accepts (checksums are recomputed, so the
//! identity requires valid checksums on input; invalid ones are tolerated and
//! recorded, since local stacks commonly offload checksumming).

mod checksum;

pub use checksum::{checksum, ones_complement_sum, verify};

use std::fmt;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

/// IPv6 next-header codes that denote extension headers we refuse to parse.
const IPV6_EXT_HEADERS: [u8; 8] = [0, 43, 44, 50, 51, 60, 135, 139];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("unsupported IP version {0}")]
    UnsupportedVersion(u8),
    #[error("IPv6 extension header {0} not supported")]
    Ipv6ExtensionHeader(u8),
    #[error("unsupported transport protocol {0}")]
    UnsupportedProtocol(u8),
    #[error("fragmented packet")]
    Fragmented,
    #[error("malformed header: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SerializeError {
    #[error("payload of {len} bytes exceeds MTU budget of {budget}")]
    OversizePayload { len: usize, budget: usize },
    #[error("header field out of range: {0}")]
    FieldOutOfRange(&'static str),
}

/// TCP flag byte. Kept as the raw wire byte so reserved bits survive a
/// parse/serialize round trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
    pub const URG: u8 = 0x20;

    pub fn new(bits: u8) -> Self {
        TcpFlags(bits)
    }

    pub fn fin(self) -> bool {
        self.0 & Self::FIN != 0
    }
    pub fn syn(self) -> bool {
        self.0 & Self::SYN != 0
    }
    pub fn rst(self) -> bool {
        self.0 & Self::RST != 0
    }
    pub fn psh(self) -> bool {
        self.0 & Self::PSH != 0
    }
    pub fn ack(self) -> bool {
        self.0 & Self::ACK != 0
    }
    pub fn urg(self) -> bool {
        self.0 & Self::URG != 0
    }

    pub fn with(mut self, bit: u8) -> Self {
        self.0 |= bit;
        self
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut any = false;
        for (bit, name) in [
            (Self::SYN, "SYN"),
            (Self::ACK, "ACK"),
            (Self::FIN, "FIN"),
            (Self::RST, "RST"),
            (Self::PSH, "PSH"),
            (Self::URG, "URG"),
        ] {
            if self.0 & bit != 0 {
                if any {
                    write!(f, "|")?;
                }
                write!(f, "{name}")?;
                any = true;
            }
        }
        if !any {
            write!(f, "-")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IpHeader {
    V4(Ipv4Header),
    V6(Ipv6Header),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Header {
    pub dscp_ecn: u8,
    pub identification: u16,
    /// Raw flags + fragment offset field. Packets with MF set or a non-zero
    /// offset are rejected at parse time, but the DF bit passes through.
    pub flags_fragment: u16,
    pub ttl: u8,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    /// Raw option bytes, already padded to a 4-byte multiple.
    pub options: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv6Header {
    pub traffic_class: u8,
    pub flow_label: u32,
    pub hop_limit: u8,
    pub src: Ipv6Addr,
    pub dst: Ipv6Addr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpSegment {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub window: u16,
    pub urgent: u16,
    /// Raw option bytes, padded to a 4-byte multiple.
    pub options: Vec<u8>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpDatagram {
    pub src_port: u16,
    pub dst_port: u16,
    /// IPv4 permits an absent (zero) UDP checksum; preserved for round trips.
    pub checksum_present: bool,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    Tcp(TcpSegment),
    Udp(UdpDatagram),
}

/// A parsed IP packet with its transport segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpPacket {
    pub ip: IpHeader,
    pub transport: Transport,
    /// Whether the checksums on the wire were valid. Recorded, not enforced.
    pub ip_checksum_ok: bool,
    /// None when the UDP checksum was absent.
    pub transport_checksum_ok: Option<bool>,
}

impl IpPacket {
    pub fn version(&self) -> u8 {
        match self.ip {
            IpHeader::V4(_) => 4,
            IpHeader::V6(_) => 6,
        }
    }

    pub fn src_addr(&self) -> IpAddr {
        match &self.ip {
            IpHeader::V4(h) => IpAddr::V4(h.src),
            IpHeader::V6(h) => IpAddr::V6(h.src),
        }
    }

    pub fn dst_addr(&self) -> IpAddr {
        match &self.ip {
            IpHeader::V4(h) => IpAddr::V4(h.dst),
            IpHeader::V6(h) => IpAddr::V6(h.dst),
        }
    }

    pub fn src_port(&self) -> u16 {
        match &self.transport {
            Transport::Tcp(t) => t.src_port,
            Transport::Udp(u) => u.src_port,
        }
    }

    pub fn dst_port(&self) -> u16 {
        match &self.transport {
            Transport::Tcp(t) => t.dst_port,
            Transport::Udp(u) => u.dst_port,
        }
    }

    pub fn payload(&self) -> &[u8] {
        match &self.transport {
            Transport::Tcp(t) => &t.payload,
            Transport::Udp(u) => &u.payload,
        }
    }

    pub fn tcp(&self) -> Option<&TcpSegment> {
        match &self.transport {
            Transport::Tcp(t) => Some(t),
            Transport::Udp(_) => None,
        }
    }

    pub fn udp(&self) -> Option<&UdpDatagram> {
        match &self.transport {
            Transport::Udp(u) => Some(u),
            Transport::Tcp(_) => None,
        }
    }

    /// True iff TCP, ACK set, no SYN/FIN/RST, and an empty payload.
    pub fn is_pure_ack(&self) -> bool {
        match &self.transport {
            Transport::Tcp(t) => {
                t.flags.ack()
                    && !t.flags.syn()
                    && !t.flags.fin()
                    && !t.flags.rst()
                    && t.payload.is_empty()
            }
            Transport::Udp(_) => false,
        }
    }

    pub fn ip_header_len(&self) -> usize {
        match &self.ip {
            IpHeader::V4(h) => 20 + h.options.len(),
            IpHeader::V6(_) => 40,
        }
    }
}

/// Parse a raw IP packet. The buffer must contain exactly one datagram.
pub fn parse_packet(bytes: &[u8]) -> Result<IpPacket, ParseError> {
    if bytes.is_empty() {
        return Err(ParseError::Truncated("empty buffer"));
    }
    match bytes[0] >> 4 {
        4 => parse_ipv4(bytes),
        6 => parse_ipv6(bytes),
        v => Err(ParseError::UnsupportedVersion(v)),
    }
}

fn parse_ipv4(bytes: &[u8]) -> Result<IpPacket, ParseError> {
    if bytes.len() < 20 {
        return Err(ParseError::Truncated("IPv4 header"));
    }
    let ihl = (bytes[0] & 0x0f) as usize * 4;
    if ihl < 20 {
        return Err(ParseError::Malformed("IHL below 5"));
    }
    if bytes.len() < ihl {
        return Err(ParseError::Truncated("IPv4 options"));
    }
    let total_len = u16::from_be_bytes([bytes[2], bytes[3]]) as usize;
    if total_len < ihl {
        return Err(ParseError::Malformed("total length below header length"));
    }
    if bytes.len() != total_len {
        return Err(ParseError::Truncated("IPv4 total length mismatch"));
    }
    let flags_fragment = u16::from_be_bytes([bytes[6], bytes[7]]);
    // MF set or fragment offset non-zero: reassembly is out of scope.
    if flags_fragment & 0x2000 != 0 || flags_fragment & 0x1fff != 0 {
        return Err(ParseError::Fragmented);
    }
    let protocol = bytes[9];
    let src = Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]);
    let dst = Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]);

    let header = Ipv4Header {
        dscp_ecn: bytes[1],
        identification: u16::from_be_bytes([bytes[4], bytes[5]]),
        flags_fragment,
        ttl: bytes[8],
        src,
        dst,
        options: bytes[20..ihl].to_vec(),
    };
    let ip_checksum_ok = ones_complement_sum(&[&bytes[..ihl]]) == 0xffff;

    let body = &bytes[ihl..];
    let pseudo = ipv4_pseudo_header(&src, &dst, protocol, body.len() as u16);
    let (transport, transport_checksum_ok) = parse_transport(protocol, body, &pseudo)?;

    Ok(IpPacket {
        ip: IpHeader::V4(header),
        transport,
        ip_checksum_ok,
        transport_checksum_ok,
    })
}

fn parse_ipv6(bytes: &[u8]) -> Result<IpPacket, ParseError> {
    if bytes.len() < 40 {
        return Err(ParseError::Truncated("IPv6 header"));
    }
    let payload_len = u16::from_be_bytes([bytes[4], bytes[5]]) as usize;
    if bytes.len() != 40 + payload_len {
        return Err(ParseError::Truncated("IPv6 payload length mismatch"));
    }
    let next_header = bytes[6];
    if IPV6_EXT_HEADERS.contains(&next_header) {
        // Refused outright rather than mis-parsed.
        return Err(ParseError::Ipv6ExtensionHeader(next_header));
    }
    let mut src = [0u8; 16];
    let mut dst = [0u8; 16];
    src.copy_from_slice(&bytes[8..24]);
    dst.copy_from_slice(&bytes[24..40]);
    let src = Ipv6Addr::from(src);
    let dst = Ipv6Addr::from(dst);

    let header = Ipv6Header {
        traffic_class: (bytes[0] << 4) | (bytes[1] >> 4),
        flow_label: u32::from_be_bytes([0, bytes[1] & 0x0f, bytes[2], bytes[3]]),
        hop_limit: bytes[7],
        src,
        dst,
    };

    let body = &bytes[40..];
    let pseudo = ipv6_pseudo_header(&src, &dst, next_header, body.len() as u32);
    let (transport, transport_checksum_ok) = parse_transport(next_header, body, &pseudo)?;

    Ok(IpPacket {
        ip: IpHeader::V6(header),
        transport,
        // IPv6 has no header checksum.
        ip_checksum_ok: true,
        transport_checksum_ok,
    })
}

fn parse_transport(
    protocol: u8,
    body: &[u8],
    pseudo: &[u8],
) -> Result<(Transport, Option<bool>), ParseError> {
    match protocol {
        IPPROTO_TCP => {
            if body.len() < 20 {
                return Err(ParseError::Truncated("TCP header"));
            }
            let data_offset = (body[12] >> 4) as usize * 4;
            if data_offset < 20 || body.len() < data_offset {
                return Err(ParseError::Malformed("TCP data offset"));
            }
            let seg = TcpSegment {
                src_port: u16::from_be_bytes([body[0], body[1]]),
                dst_port: u16::from_be_bytes([body[2], body[3]]),
                seq: u32::from_be_bytes([body[4], body[5], body[6], body[7]]),
                ack: u32::from_be_bytes([body[8], body[9], body[10], body[11]]),
                flags: TcpFlags(body[13]),
                window: u16::from_be_bytes([body[14], body[15]]),
                urgent: u16::from_be_bytes([body[18], body[19]]),
                options: body[20..data_offset].to_vec(),
                payload: body[data_offset..].to_vec(),
            };
            let ok = ones_complement_sum(&[pseudo, body]) == 0xffff;
            Ok((Transport::Tcp(seg), Some(ok)))
        }
        IPPROTO_UDP => {
            if body.len() < 8 {
                return Err(ParseError::Truncated("UDP header"));
            }
            let length = u16::from_be_bytes([body[4], body[5]]) as usize;
            if length < 8 || length != body.len() {
                return Err(ParseError::Malformed("UDP length"));
            }
            let wire_checksum = u16::from_be_bytes([body[6], body[7]]);
            let checksum_present = wire_checksum != 0;
            let ok = if checksum_present {
                Some(ones_complement_sum(&[pseudo, body]) == 0xffff)
            } else {
                None
            };
            let dgram = UdpDatagram {
                src_port: u16::from_be_bytes([body[0], body[1]]),
                dst_port: u16::from_be_bytes([body[2], body[3]]),
                checksum_present,
                payload: body[8..].to_vec(),
            };
            Ok((Transport::Udp(dgram), ok))
        }
        other => Err(ParseError::UnsupportedProtocol(other)),
    }
}

/// Serialize a packet to wire bytes with freshly computed checksums,
/// enforcing the given MTU on the total datagram size.
pub fn serialize_packet(p: &IpPacket, mtu: usize) -> Result<Vec<u8>, SerializeError> {
    let bytes = serialize_packet_unchecked(p)?;
    if bytes.len() > mtu {
        return Err(SerializeError::OversizePayload {
            len: p.payload().len(),
            budget: mtu.saturating_sub(bytes.len() - p.payload().len()),
        });
    }
    Ok(bytes)
}

/// Serialize without an MTU bound (still bounded by the 16-bit length fields).
pub fn serialize_packet_unchecked(p: &IpPacket) -> Result<Vec<u8>, SerializeError> {
    let transport_bytes_len = transport_len(&p.transport);
    match &p.ip {
        IpHeader::V4(h) => {
            if h.options.len() % 4 != 0 || h.options.len() > 40 {
                return Err(SerializeError::FieldOutOfRange("IPv4 options"));
            }
            let ihl = 20 + h.options.len();
            let total = ihl + transport_bytes_len;
            if total > u16::MAX as usize {
                return Err(SerializeError::FieldOutOfRange("IPv4 total length"));
            }
            let mut out = Vec::with_capacity(total);
            out.push(0x40 | ((ihl / 4) as u8));
            out.push(h.dscp_ecn);
            out.extend_from_slice(&(total as u16).to_be_bytes());
            out.extend_from_slice(&h.identification.to_be_bytes());
            out.extend_from_slice(&h.flags_fragment.to_be_bytes());
            out.push(h.ttl);
            out.push(transport_protocol(&p.transport));
            out.extend_from_slice(&[0, 0]); // checksum placeholder
            out.extend_from_slice(&h.src.octets());
            out.extend_from_slice(&h.dst.octets());
            out.extend_from_slice(&h.options);
            let csum = ones_complement_sum(&[&out[..ihl]]);
            out[10..12].copy_from_slice(&(!csum).to_be_bytes());

            let pseudo = ipv4_pseudo_header(
                &h.src,
                &h.dst,
                transport_protocol(&p.transport),
                transport_bytes_len as u16,
            );
            write_transport(&mut out, &p.transport, &pseudo, ihl);
            Ok(out)
        }
        IpHeader::V6(h) => {
            if transport_bytes_len > u16::MAX as usize {
                return Err(SerializeError::FieldOutOfRange("IPv6 payload length"));
            }
            if h.flow_label > 0x000f_ffff {
                return Err(SerializeError::FieldOutOfRange("IPv6 flow label"));
            }
            let mut out = Vec::with_capacity(40 + transport_bytes_len);
            out.push(0x60 | (h.traffic_class >> 4));
            out.push((h.traffic_class << 4) | ((h.flow_label >> 16) as u8 & 0x0f));
            out.extend_from_slice(&((h.flow_label & 0xffff) as u16).to_be_bytes());
            out.extend_from_slice(&(transport_bytes_len as u16).to_be_bytes());
            out.push(transport_protocol(&p.transport));
            out.push(h.hop_limit);
            out.extend_from_slice(&h.src.octets());
            out.extend_from_slice(&h.dst.octets());
            let pseudo = ipv6_pseudo_header(
                &h.src,
                &h.dst,
                transport_protocol(&p.transport),
                transport_bytes_len as u32,
            );
            write_transport(&mut out, &p.transport, &pseudo, 40);
            Ok(out)
        }
    }
}

fn transport_protocol(t: &Transport) -> u8 {
    match t {
        Transport::Tcp(_) => IPPROTO_TCP,
        Transport::Udp(_) => IPPROTO_UDP,
    }
}

fn transport_len(t: &Transport) -> usize {
    match t {
        Transport::Tcp(seg) => 20 + seg.options.len() + seg.payload.len(),
        Transport::Udp(d) => 8 + d.payload.len(),
    }
}

fn write_transport(out: &mut Vec<u8>, t: &Transport, pseudo: &[u8], body_start: usize) {
    match t {
        Transport::Tcp(seg) => {
            let data_offset = 20 + seg.options.len();
            debug_assert!(data_offset % 4 == 0 && data_offset <= 60);
            out.extend_from_slice(&seg.src_port.to_be_bytes());
            out.extend_from_slice(&seg.dst_port.to_be_bytes());
            out.extend_from_slice(&seg.seq.to_be_bytes());
            out.extend_from_slice(&seg.ack.to_be_bytes());
            out.push(((data_offset / 4) as u8) << 4);
            out.push(seg.flags.0);
            out.extend_from_slice(&seg.window.to_be_bytes());
            out.extend_from_slice(&[0, 0]); // checksum placeholder
            out.extend_from_slice(&seg.urgent.to_be_bytes());
            out.extend_from_slice(&seg.options);
            out.extend_from_slice(&seg.payload);
            let csum = !ones_complement_sum(&[pseudo, &out[body_start..]]);
            let at = body_start + 16;
            out[at..at + 2].copy_from_slice(&csum.to_be_bytes());
        }
        Transport::Udp(d) => {
            let len = (8 + d.payload.len()) as u16;
            out.extend_from_slice(&d.src_port.to_be_bytes());
            out.extend_from_slice(&d.dst_port.to_be_bytes());
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(&[0, 0]); // checksum placeholder
            out.extend_from_slice(&d.payload);
            if d.checksum_present {
                let mut csum = !ones_complement_sum(&[pseudo, &out[body_start..]]);
                if csum == 0 {
                    // RFC 768: a computed zero is transmitted as all ones.
                    csum = 0xffff;
                }
                let at = body_start + 6;
                out[at..at + 2].copy_from_slice(&csum.to_be_bytes());
            }
        }
    }
}

pub fn ipv4_pseudo_header(src: &Ipv4Addr, dst: &Ipv4Addr, protocol: u8, len: u16) -> Vec<u8> {
    let mut v = Vec::with_capacity(12);
    v.extend_from_slice(&src.octets());
    v.extend_from_slice(&dst.octets());
    v.push(0);
    v.push(protocol);
    v.extend_from_slice(&len.to_be_bytes());
    v
}

pub fn ipv6_pseudo_header(src: &Ipv6Addr, dst: &Ipv6Addr, next_header: u8, len: u32) -> Vec<u8> {
    let mut v = Vec::with_capacity(40);
    v.extend_from_slice(&src.octets());
    v.extend_from_slice(&dst.octets());
    v.extend_from_slice(&len.to_be_bytes());
    v.extend_from_slice(&[0, 0, 0]);
    v.push(next_header);
    v
}

/// Extract the MSS value from raw TCP options, if present.
pub fn tcp_options_mss(options: &[u8]) -> Option<u16> {
    let mut i = 0;
    while i < options.len() {
        match options[i] {
            0 => return None,       // end of options
            1 => i += 1,            // NOP
            2 => {
                if i + 4 <= options.len() && options[i + 1] == 4 {
                    return Some(u16::from_be_bytes([options[i + 2], options[i + 3]]));
                }
                return None;
            }
            _ => {
                if i + 1 >= options.len() {
                    return None;
                }
                let len = options[i + 1] as usize;
                if len < 2 {
                    return None;
                }
                i += len;
            }
        }
    }
    None
}

/// MSS option bytes for a SYN/ACK we synthesize.
pub fn mss_option(mss: u16) -> Vec<u8> {
    let b = mss.to_be_bytes();
    vec![2, 4, b[0], b[1]]
}

#[cfg(test)]
mod tests;

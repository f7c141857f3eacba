//! Ones-complement internet checksum (RFC 1071 family).

/// Ones-complement sum over the concatenation of the given buffers, folding
/// carries. Odd-length buffers are zero-padded on the final byte. The result
/// is the *sum*, not its complement; data that already contains a correct
/// checksum field sums to 0xffff.
pub fn ones_complement_sum(parts: &[&[u8]]) -> u16 {
    let mut sum: u32 = 0;
    // A carry byte crossing buffer boundaries keeps word alignment across
    // parts, so pseudo-header + body summation is order-exact.
    let mut pending: Option<u8> = None;
    for part in parts {
        let mut bytes = part.iter().copied();
        if let Some(hi) = pending.take() {
            match bytes.next() {
                Some(lo) => sum += u32::from(u16::from_be_bytes([hi, lo])),
                None => {
                    pending = Some(hi);
                    continue;
                }
            }
        }
        loop {
            match (bytes.next(), bytes.next()) {
                (Some(hi), Some(lo)) => sum += u32::from(u16::from_be_bytes([hi, lo])),
                (Some(hi), None) => {
                    pending = Some(hi);
                    break;
                }
                _ => break,
            }
        }
    }
    if let Some(hi) = pending {
        sum += u32::from(u16::from_be_bytes([hi, 0]));
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    sum as u16
}

/// Checksum value to place in a header: the complement of the ones-complement
/// sum over pseudo-header and body (with the checksum field zeroed).
pub fn checksum(pseudo_header: &[u8], body: &[u8]) -> u16 {
    !ones_complement_sum(&[pseudo_header, body])
}

/// Verifies data whose checksum field is in place: sums to 0xffff when valid.
pub fn verify(pseudo_header: &[u8], body: &[u8]) -> bool {
    ones_complement_sum(&[pseudo_header, body]) == 0xffff
}

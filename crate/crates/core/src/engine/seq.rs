//! Modular 32-bit sequence-number arithmetic (RFC 793 style comparisons).

/// True when `a` is strictly before `b` in sequence space.
pub fn seq_lt(a: u32, b: u32) -> bool {
    (b.wrapping_sub(a) as i32) > 0
}

/// True when `a` is at or before `b`.
pub fn seq_le(a: u32, b: u32) -> bool {
    a == b || seq_lt(a, b)
}

/// Distance from `a` forward to `b` (caller asserts `a` precedes `b`).
pub fn seq_diff(b: u32, a: u32) -> u32 {
    b.wrapping_sub(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparisons_wrap() {
        assert!(seq_lt(0xffff_fff0, 0x10));
        assert!(!seq_lt(0x10, 0xffff_fff0));
        assert!(seq_lt(0, 1));
        assert!(seq_le(5, 5));
        assert_eq!(seq_diff(0x10, 0xffff_fff0), 0x20);
    }
}

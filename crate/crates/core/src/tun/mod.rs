//! TUN device abstraction: the real Linux device plus an in-memory double
//! used by tests and the bundled benchmarks.

mod linux;
mod memory;

pub use linux::LinuxTun;
pub use memory::{MemTun, MemTunHost};

use std::io;
use std::time::Instant;

/// One raw IP packet off the device, with its arrival time when the backend
/// can observe it (the in-memory double records injection time; the kernel
/// device cannot see queue time, so it reports `None`).
#[derive(Debug)]
pub struct TunPacket {
    pub bytes: Vec<u8>,
    pub arrived: Option<Instant>,
}

/// A layer-3 packet device. Reads never block.
pub trait TunDevice: Send {
    /// Read at most `max` packets without blocking.
    fn read_packets(&mut self, max: usize) -> io::Result<Vec<TunPacket>>;

    /// Write one packet toward the app side.
    fn write_packet(&mut self, bytes: &[u8]) -> io::Result<()>;

    fn mtu(&self) -> usize;

    /// True once the device is gone and the loop should shut down cleanly.
    fn is_closed(&self) -> bool {
        false
    }
}

//! In-memory TUN double: a lossless FIFO pair of channels. The host side
//! plays the role of the app's network stack.

use super::{TunDevice, TunPacket};
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::io;
use std::time::{Duration, Instant};

pub struct MemTun {
    rx: Receiver<TunPacket>,
    tx: Sender<Vec<u8>>,
    mtu: usize,
    closed: bool,
}

/// The app-side handle: inject packets into the device, read what the
/// gateway writes back.
#[derive(Clone)]
pub struct MemTunHost {
    inject_tx: Sender<TunPacket>,
    out_rx: Receiver<Vec<u8>>,
}

impl MemTun {
    pub fn new(mtu: usize) -> (MemTun, MemTunHost) {
        let (inject_tx, inject_rx) = unbounded();
        let (out_tx, out_rx) = unbounded();
        (
            MemTun {
                rx: inject_rx,
                tx: out_tx,
                mtu,
                closed: false,
            },
            MemTunHost { inject_tx, out_rx },
        )
    }
}

impl TunDevice for MemTun {
    fn read_packets(&mut self, max: usize) -> io::Result<Vec<TunPacket>> {
        let mut out = Vec::new();
        for _ in 0..max {
            match self.rx.try_recv() {
                Ok(p) => out.push(p),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    self.closed = true;
                    break;
                }
            }
        }
        Ok(out)
    }

    fn write_packet(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.tx
            .send(bytes.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "host side dropped"))
    }

    fn mtu(&self) -> usize {
        self.mtu
    }

    fn is_closed(&self) -> bool {
        self.closed
    }
}

impl MemTunHost {
    /// Inject one packet as if the app had routed it into the device.
    pub fn inject(&self, bytes: Vec<u8>) {
        let _ = self.inject_tx.send(TunPacket {
            bytes,
            arrived: Some(Instant::now()),
        });
    }

    /// Next packet the gateway wrote toward the app.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<Vec<u8>> {
        match self.out_rx.recv_timeout(timeout) {
            Ok(p) => Some(p),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => None,
        }
    }

    pub fn try_recv(&self) -> Option<Vec<u8>> {
        self.out_rx.try_recv().ok()
    }
}

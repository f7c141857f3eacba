//! Linux TUN device (`/dev/net/tun`, IFF_TUN, no packet-info prefix).

use super::{TunDevice, TunPacket};
use std::ffi::CString;
use std::fs::OpenOptions;
use std::io::{self, Read, Write};
use std::net::Ipv4Addr;
use std::os::fd::AsRawFd;

const TUNSETIFF: libc::c_ulong = 0x4004_54ca;
const IFF_TUN: libc::c_short = 0x0001;
const IFF_NO_PI: libc::c_short = 0x1000;

#[repr(C)]
struct IfReq {
    ifr_name: [u8; libc::IFNAMSIZ],
    ifr_ifru: IfReqUnion,
}

#[repr(C)]
union IfReqUnion {
    ifru_flags: libc::c_short,
    ifru_addr: libc::sockaddr,
    ifru_mtu: libc::c_int,
    pad: [u8; 24],
}

fn ifreq(name: &str) -> io::Result<IfReq> {
    let cname = CString::new(name).map_err(|_| io::Error::from(io::ErrorKind::InvalidInput))?;
    let bytes = cname.as_bytes_with_nul();
    if bytes.len() > libc::IFNAMSIZ {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "interface name too long",
        ));
    }
    let mut req = IfReq {
        ifr_name: [0; libc::IFNAMSIZ],
        ifr_ifru: IfReqUnion { pad: [0; 24] },
    };
    req.ifr_name[..bytes.len()].copy_from_slice(bytes);
    Ok(req)
}

pub struct LinuxTun {
    file: std::fs::File,
    name: String,
    mtu: usize,
    closed: bool,
}

impl LinuxTun {
    /// Open (creating if needed) the named TUN interface. Requires
    /// CAP_NET_ADMIN; the CLI documents the privilege requirement.
    pub fn open(name: &str, mtu: usize) -> io::Result<LinuxTun> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open("/dev/net/tun")?;
        let mut req = ifreq(name)?;
        req.ifr_ifru.ifru_flags = IFF_TUN | IFF_NO_PI;
        let rc = unsafe { libc::ioctl(file.as_raw_fd(), TUNSETIFF, &mut req) };
        if rc < 0 {
            return Err(io::Error::last_os_error());
        }
        // Non-blocking reads: the forwarder polls.
        let flags = unsafe { libc::fcntl(file.as_raw_fd(), libc::F_GETFL) };
        if flags < 0
            || unsafe { libc::fcntl(file.as_raw_fd(), libc::F_SETFL, flags | libc::O_NONBLOCK) }
                < 0
        {
            return Err(io::Error::last_os_error());
        }
        Ok(LinuxTun {
            file,
            name: name.to_string(),
            mtu,
            closed: false,
        })
    }

    /// Wrap an already-open TUN file descriptor (e.g. handed over by a host
    /// application that created the device itself).
    pub fn from_raw_fd(fd: i32, mtu: usize) -> io::Result<LinuxTun> {
        use std::os::fd::FromRawFd;
        let file = unsafe { std::fs::File::from_raw_fd(fd) };
        let flags = unsafe { libc::fcntl(fd, libc::F_GETFL) };
        if flags < 0 || unsafe { libc::fcntl(fd, libc::F_SETFL, flags | libc::O_NONBLOCK) } < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(LinuxTun {
            file,
            name: format!("fd:{fd}"),
            mtu,
            closed: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Assign an address/netmask, set the MTU, and bring the link up, all via
    /// ioctls so no external tooling is needed. Routing stays with the
    /// operator (see the CLI's `routes` subcommand).
    pub fn configure(&self, addr: Ipv4Addr, netmask: Ipv4Addr) -> io::Result<()> {
        let sock = unsafe { libc::socket(libc::AF_INET, libc::SOCK_DGRAM, 0) };
        if sock < 0 {
            return Err(io::Error::last_os_error());
        }
        let result = (|| {
            let mut req = ifreq(&self.name)?;
            let sin = |ip: Ipv4Addr| libc::sockaddr_in {
                sin_family: libc::AF_INET as libc::sa_family_t,
                sin_port: 0,
                sin_addr: libc::in_addr {
                    s_addr: u32::from_ne_bytes(ip.octets()),
                },
                sin_zero: [0; 8],
            };

            let addr_in = sin(addr);
            req.ifr_ifru.ifru_addr =
                unsafe { std::mem::transmute_copy::<libc::sockaddr_in, libc::sockaddr>(&addr_in) };
            if unsafe { libc::ioctl(sock, libc::SIOCSIFADDR as _, &req) } < 0 {
                return Err(io::Error::last_os_error());
            }

            let mask_in = sin(netmask);
            req.ifr_ifru.ifru_addr =
                unsafe { std::mem::transmute_copy::<libc::sockaddr_in, libc::sockaddr>(&mask_in) };
            if unsafe { libc::ioctl(sock, libc::SIOCSIFNETMASK as _, &req) } < 0 {
                return Err(io::Error::last_os_error());
            }

            req.ifr_ifru.ifru_mtu = self.mtu as libc::c_int;
            if unsafe { libc::ioctl(sock, libc::SIOCSIFMTU as _, &req) } < 0 {
                return Err(io::Error::last_os_error());
            }

            if unsafe { libc::ioctl(sock, libc::SIOCGIFFLAGS as _, &req) } < 0 {
                return Err(io::Error::last_os_error());
            }
            unsafe {
                req.ifr_ifru.ifru_flags |= (libc::IFF_UP | libc::IFF_RUNNING) as libc::c_short;
            }
            if unsafe { libc::ioctl(sock, libc::SIOCSIFFLAGS as _, &req) } < 0 {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        })();
        unsafe { libc::close(sock) };
        result
    }
}

impl TunDevice for LinuxTun {
    fn read_packets(&mut self, max: usize) -> io::Result<Vec<TunPacket>> {
        let mut out = Vec::new();
        let mut buf = vec![0u8; self.mtu + 64];
        for _ in 0..max {
            match self.file.read(&mut buf) {
                Ok(0) => {
                    self.closed = true;
                    break;
                }
                Ok(n) => out.push(TunPacket {
                    bytes: buf[..n].to_vec(),
                    arrived: None,
                }),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn write_packet(&mut self, bytes: &[u8]) -> io::Result<()> {
        match self.file.write(bytes) {
            Ok(_) => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn mtu(&self) -> usize {
        self.mtu
    }

    fn is_closed(&self) -> bool {
        self.closed
    }
}

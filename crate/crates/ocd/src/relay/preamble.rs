//! Destination preamble for relay-to-relay legs. The very first bytes on
//! the stream name the final destination; everything after belongs to the
//! forwarded payload.
//!
//! Layout: magic "OCD1" | family (0x04 or 0x06) | address (4 or 16 bytes,
//! network order) | port (2 bytes big-endian). 11 bytes for IPv4, 23 for
//! IPv6.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use thiserror::Error;

pub const MAGIC: [u8; 4] = [0x4F, 0x43, 0x44, 0x31]; // "OCD1"
pub const FAMILY_V4: u8 = 0x04;
pub const FAMILY_V6: u8 = 0x06;
pub const LEN_V4: usize = 11;
pub const LEN_V6: usize = 23;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PreambleError {
    #[error("bad preamble magic")]
    BadMagic,
    #[error("unknown address family {0:#04x}")]
    BadFamily(u8),
}

pub fn encode_preamble(dest: SocketAddr) -> Vec<u8> {
    let mut out = Vec::with_capacity(LEN_V6);
    out.extend_from_slice(&MAGIC);
    match dest.ip() {
        IpAddr::V4(ip) => {
            out.push(FAMILY_V4);
            out.extend_from_slice(&ip.octets());
        }
        IpAddr::V6(ip) => {
            out.push(FAMILY_V6);
            out.extend_from_slice(&ip.octets());
        }
    }
    out.extend_from_slice(&dest.port().to_be_bytes());
    out
}

/// Decodes a preamble from the head of `buf`.
///
/// Returns `Ok(None)` while the preamble is still truncated (stream
/// semantics: wait for more bytes); on success returns the destination and
/// the number of bytes consumed, leaving the remainder untouched.
pub fn decode_preamble(buf: &[u8]) -> Result<Option<(SocketAddr, usize)>, PreambleError> {
    for (i, &m) in MAGIC.iter().enumerate() {
        if buf.len() <= i {
            return Ok(None);
        }
        if buf[i] != m {
            return Err(PreambleError::BadMagic);
        }
    }
    if buf.len() < 5 {
        return Ok(None);
    }
    match buf[4] {
        FAMILY_V4 => {
            if buf.len() < LEN_V4 {
                return Ok(None);
            }
            let ip = Ipv4Addr::new(buf[5], buf[6], buf[7], buf[8]);
            let port = u16::from_be_bytes([buf[9], buf[10]]);
            Ok(Some((SocketAddr::new(IpAddr::V4(ip), port), LEN_V4)))
        }
        FAMILY_V6 => {
            if buf.len() < LEN_V6 {
                return Ok(None);
            }
            let mut oct = [0u8; 16];
            oct.copy_from_slice(&buf[5..21]);
            let port = u16::from_be_bytes([buf[21], buf[22]]);
            Ok(Some((SocketAddr::new(IpAddr::V6(Ipv6Addr::from(oct)), port), LEN_V6)))
        }
        other => Err(PreambleError::BadFamily(other)),
    }
}

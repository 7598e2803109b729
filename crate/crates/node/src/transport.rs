//! Blocking TCP client side of the peer protocol.
//!
//! One connection per exchange: write a frame, read one frame back. The
//! relay flow already fans out on scoped threads, so blocking sockets with
//! timeouts are all it needs.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use decoy_core::model::Millis;
use decoy_core::peers::PeerDescriptor;
use decoy_core::wire::{Envelope, MAX_FRAME_LEN};
use decoy_core::{Error, Result, Transport};

#[derive(Debug, Default, Clone, Copy)]
pub struct TcpTransport;

fn transport_err(peer: &PeerDescriptor, e: io::Error) -> Error {
    match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => Error::Timeout(peer.peer_id.to_string()),
        _ => Error::Transport {
            peer: peer.peer_id.to_string(),
            reason: e.to_string(),
        },
    }
}

/// Reads one frame body (after the length prefix).
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

impl Transport for TcpTransport {
    fn exchange(&self, to: &PeerDescriptor, env: Envelope, timeout_ms: Millis) -> Result<Envelope> {
        let timeout = Duration::from_millis(timeout_ms.max(1));
        let addr = to
            .address
            .to_socket_addrs()
            .map_err(|e| transport_err(to, e))?
            .next()
            .ok_or_else(|| Error::Transport {
                peer: to.peer_id.to_string(),
                reason: format!("cannot resolve {}", to.address),
            })?;
        let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| transport_err(to, e))?;
        stream.set_read_timeout(Some(timeout)).map_err(|e| transport_err(to, e))?;
        stream.set_write_timeout(Some(timeout)).map_err(|e| transport_err(to, e))?;
        stream.set_nodelay(true).ok();
        stream.write_all(&env.encode()).map_err(|e| transport_err(to, e))?;
        let body = read_frame(&mut stream).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Transport {
                peer: to.peer_id.to_string(),
                reason: "connection closed without reply".into(),
            },
            _ => transport_err(to, e),
        })?;
        Envelope::decode_body(&body)
    }
}

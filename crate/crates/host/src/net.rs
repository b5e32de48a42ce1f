//! Byte-stream transports for the protocol sessions.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};

use offload_core::protocol::{Session, SessionError, Transport, TransportError, PROTOCOL_VERSION};

/// Adapts any blocking `Read + Write` stream.
#[derive(Debug)]
pub struct StreamTransport<S>(pub S);

impl<S> StreamTransport<S> {
    pub fn into_inner(self) -> S {
        self.0
    }
}

fn transport_error(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof | io::ErrorKind::ConnectionReset | io::ErrorKind::BrokenPipe => {
            TransportError::Closed
        }
        _ => TransportError::Io(e.to_string()),
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.0
            .write_all(bytes)
            .and_then(|_| self.0.flush())
            .map_err(transport_error)
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), TransportError> {
        self.0.read_exact(buf).map_err(transport_error)
    }
}

pub type TcpSession = Session<StreamTransport<TcpStream>>;

/// Opens a TCP connection and performs the version handshake.
pub fn connect(addr: impl ToSocketAddrs) -> Result<TcpSession, SessionError> {
    let stream = TcpStream::connect(addr).map_err(|e| SessionError::Transport(TransportError::Io(e.to_string())))?;
    stream.set_nodelay(true).ok();
    Session::connect(StreamTransport(stream), PROTOCOL_VERSION)
}

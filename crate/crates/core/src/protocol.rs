//! Framed binary protocol between the offloading client and its workers.
//!
//! Frame: `"VSP1" | u8 msg_type | u64 LE payload_length | payload`.
//! The payload grammar for every message type is documented on
//! [`Message`] and, with hex examples, in `PROTOCOL.md` at the repository
//! root. Decoding is total: any byte string either yields a message or a
//! [`ParseError`].

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::commitment::MerkleCommit;
use crate::tensor::{Region, Tensor};

pub const MAGIC: [u8; 4] = *b"VSP1";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 13;
/// Frames announcing a larger payload are rejected before reading it.
pub const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated frame: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("payload length {0} exceeds the {MAX_PAYLOAD}-byte limit")]
    LengthOverflow(u64),
    #[error("malformed payload: {0}")]
    Payload(#[from] DecodeError),
}

/// What a worker holds a model for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelRole {
    Full,
    SharePlus,
    ShareMinus,
    /// A one-layer model standing in for layer `index` of the client's model.
    SingleLayer(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    Holistic,
    Layer(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Malformed = 1,
    RoleMismatch = 2,
    Shape = 3,
    UnknownInference = 4,
    Evicted = 5,
    VersionMismatch = 6,
    Unsupported = 7,
    Internal = 8,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::Malformed,
            2 => ErrorCode::RoleMismatch,
            3 => ErrorCode::Shape,
            4 => ErrorCode::UnknownInference,
            5 => ErrorCode::Evicted,
            6 => ErrorCode::VersionMismatch,
            7 => ErrorCode::Unsupported,
            8 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferRequest {
    pub inference_id: u64,
    pub mode: InferMode,
    pub input: Tensor,
    pub verify_ratio: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferResponse {
    pub inference_id: u64,
    pub output: Tensor,
    pub commit: MerkleCommit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyRequest {
    pub inference_id: u64,
    pub regions: Vec<(u32, Region)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyResponse {
    pub inference_id: u64,
    /// Serialized [`crate::commitment::MerkleProof`].
    pub proof: Vec<u8>,
}

/// Protocol messages. Payload layouts (after the frame header):
///
/// ```text
/// 0x01 Hello          u8 version
/// 0x02 SetupModel     role, u32 len, model container bytes
/// 0x03 SetupAck       role
/// 0x04 InferRequest   u64 id, mode, tensor input, f32 verify_ratio
/// 0x05 InferResponse  u64 id, tensor output, commit
/// 0x06 VerifyRequest  u64 id, u32 n, n * (u32 intermediate, region)
/// 0x07 VerifyResponse u64 id, u32 len, proof bytes
/// 0x7f Error          u16 code, u32 len, UTF-8 text
///
/// role   := u8 0=full 1=share_plus 2=share_minus | u8 3, u32 layer
/// mode   := u8 0=holistic | u8 1, u32 layer
/// region := u32 rank, u32 offset * rank, u32 extent * rank
/// commit := 32-byte root, u64 leaf_count, u32 n, n * 32-byte layer root
/// ```
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u8 },
    SetupModel { role: ModelRole, model: Vec<u8> },
    SetupAck { role: ModelRole },
    InferRequest(InferRequest),
    InferResponse(InferResponse),
    VerifyRequest(VerifyRequest),
    VerifyResponse(VerifyResponse),
    Error { code: u16, text: String },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello { .. } => 0x01,
            Message::SetupModel { .. } => 0x02,
            Message::SetupAck { .. } => 0x03,
            Message::InferRequest(_) => 0x04,
            Message::InferResponse(_) => 0x05,
            Message::VerifyRequest(_) => 0x06,
            Message::VerifyResponse(_) => 0x07,
            Message::Error { .. } => 0x7f,
        }
    }

    pub fn error(code: ErrorCode, text: impl Into<String>) -> Self {
        Message::Error {
            code: code as u16,
            text: text.into(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::SetupModel { .. } => "SetupModel",
            Message::SetupAck { .. } => "SetupAck",
            Message::InferRequest(_) => "InferRequest",
            Message::InferResponse(_) => "InferResponse",
            Message::VerifyRequest(_) => "VerifyRequest",
            Message::VerifyResponse(_) => "VerifyResponse",
            Message::Error { .. } => "Error",
        }
    }
}

fn known_type(t: u8) -> bool {
    matches!(t, 0x01..=0x07 | 0x7f)
}

fn write_role(w: &mut Writer, role: ModelRole) {
    match role {
        ModelRole::Full => w.u8(0),
        ModelRole::SharePlus => w.u8(1),
        ModelRole::ShareMinus => w.u8(2),
        ModelRole::SingleLayer(i) => w.u8(3).u32(i),
    };
}

fn read_role(r: &mut Reader<'_>) -> Result<ModelRole, DecodeError> {
    Ok(match r.u8()? {
        0 => ModelRole::Full,
        1 => ModelRole::SharePlus,
        2 => ModelRole::ShareMinus,
        3 => ModelRole::SingleLayer(r.u32()?),
        v => return Err(DecodeError::invalid("model role", v)),
    })
}

pub fn write_region(w: &mut Writer, region: &Region) {
    w.len32(region.rank());
    for &o in &region.offset {
        w.len32(o);
    }
    for &e in &region.extent {
        w.len32(e);
    }
}

pub fn read_region(r: &mut Reader<'_>) -> Result<Region, DecodeError> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > crate::codec::MAX_RANK {
        return Err(DecodeError::invalid("region rank", rank as u64));
    }
    let offset = (0..rank)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_, _>>()?;
    let extent = (0..rank)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_, _>>()?;
    Ok(Region::new(offset, extent))
}

fn encode_payload(m: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    match m {
        Message::Hello { version } => {
            w.u8(*version);
        }
        Message::SetupModel { role, model } => {
            write_role(&mut w, *role);
            w.len32(model.len()).bytes(model);
        }
        Message::SetupAck { role } => write_role(&mut w, *role),
        Message::InferRequest(q) => {
            w.u64(q.inference_id);
            match q.mode {
                InferMode::Holistic => w.u8(0),
                InferMode::Layer(i) => w.u8(1).u32(i),
            };
            w.tensor(&q.input).f32(q.verify_ratio);
        }
        Message::InferResponse(p) => {
            w.u64(p.inference_id).tensor(&p.output);
            p.commit.encode(&mut w);
        }
        Message::VerifyRequest(q) => {
            w.u64(q.inference_id).len32(q.regions.len());
            for (i, region) in &q.regions {
                w.u32(*i);
                write_region(&mut w, region);
            }
        }
        Message::VerifyResponse(p) => {
            w.u64(p.inference_id).len32(p.proof.len()).bytes(&p.proof);
        }
        Message::Error { code, text } => {
            w.u16(*code).len32(text.len()).bytes(text.as_bytes());
        }
    }
    w.into_bytes()
}

fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader::new(payload);
    let m = match msg_type {
        0x01 => Message::Hello { version: r.u8()? },
        0x02 => {
            let role = read_role(&mut r)?;
            let len = r.u32()? as usize;
            Message::SetupModel {
                role,
                model: r.take(len)?.to_vec(),
            }
        }
        0x03 => Message::SetupAck {
            role: read_role(&mut r)?,
        },
        0x04 => {
            let inference_id = r.u64()?;
            let mode = match r.u8()? {
                0 => InferMode::Holistic,
                1 => InferMode::Layer(r.u32()?),
                v => return Err(DecodeError::invalid("inference mode", v)),
            };
            let input = r.tensor()?;
            let verify_ratio = r.f32()?;
            if !(verify_ratio > 0.0 && verify_ratio <= 1.0) {
                return Err(DecodeError::invalid("verify ratio bits", verify_ratio.to_bits()));
            }
            Message::InferRequest(InferRequest {
                inference_id,
                mode,
                input,
                verify_ratio,
            })
        }
        0x05 => Message::InferResponse(InferResponse {
            inference_id: r.u64()?,
            output: r.tensor()?,
            commit: MerkleCommit::decode(&mut r)?,
        }),
        0x06 => {
            let inference_id = r.u64()?;
            let n = r.count(8)?;
            let regions = (0..n)
                .map(|_| Ok((r.u32()?, read_region(&mut r)?)))
                .collect::<Result<_, DecodeError>>()?;
            Message::VerifyRequest(VerifyRequest { inference_id, regions })
        }
        0x07 => {
            let inference_id = r.u64()?;
            let len = r.u32()? as usize;
            Message::VerifyResponse(VerifyResponse {
                inference_id,
                proof: r.take(len)?.to_vec(),
            })
        }
        0x7f => {
            let code = r.u16()?;
            let len = r.u32()? as usize;
            let text = core::str::from_utf8(r.take(len)?)
                .map_err(|_| DecodeError::invalid("utf-8 text", len as u64))?
                .into();
            Message::Error { code, text }
        }
        other => return Err(DecodeError::invalid("message type", other)),
    };
    r.finish()?;
    Ok(m)
}

/// Encodes a complete frame.
pub fn encode(m: &Message) -> Vec<u8> {
    let payload = encode_payload(m);
    let mut w = Writer::new();
    w.bytes(&MAGIC)
        .u8(m.type_byte())
        .u64(payload.len() as u64)
        .bytes(&payload);
    w.into_bytes()
}

struct Header {
    msg_type: u8,
    payload_len: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, ParseError> {
    let magic_len = bytes.len().min(4);
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(ParseError::BadMagic);
    }
    let truncated = || ParseError::Truncated {
        needed: HEADER_LEN,
        available: bytes.len(),
    };
    let msg_type = *bytes.get(4).ok_or_else(truncated)?;
    if !known_type(msg_type) {
        return Err(ParseError::UnknownType(msg_type));
    }
    let len_bytes: [u8; 8] = bytes
        .get(5..HEADER_LEN)
        .ok_or_else(truncated)?
        .try_into()
        .expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes);
    if len > MAX_PAYLOAD {
        return Err(ParseError::LengthOverflow(len));
    }
    Ok(Header {
        msg_type,
        payload_len: len as usize,
    })
}

/// Decodes the first frame in `bytes`, returning it and the bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), ParseError> {
    let h = parse_header(bytes)?;
    let total = HEADER_LEN + h.payload_len;
    if bytes.len() < total {
        return Err(ParseError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let m = decode_payload(h.msg_type, &bytes[HEADER_LEN..total])?;
    Ok((m, total))
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Message, ParseError> {
    let (m, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(DecodeError::TrailingBytes {
            count: bytes.len() - used,
        }
        .into());
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("connection closed by peer")]
    Closed,
    #[error("transport failure: {0}")]
    Io(String),
}

/// A reliable, ordered, bidirectional byte stream.
pub trait Transport {
    fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError>;
    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), TransportError>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        (**self).send(bytes)
    }

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), TransportError> {
        (**self).recv_exact(buf)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("protocol version mismatch: local {local}, remote {remote}")]
    VersionMismatch { local: u8, remote: u8 },
    #[error("unexpected {got} message, expected {expected}")]
    Unexpected { expected: &'static str, got: &'static str },
}

pub fn write_message<T: Transport>(t: &mut T, m: &Message) -> Result<(), SessionError> {
    t.send(&encode(m))?;
    Ok(())
}

pub fn read_message<T: Transport>(t: &mut T) -> Result<Message, SessionError> {
    let mut header = [0u8; HEADER_LEN];
    t.recv_exact(&mut header)?;
    let h = parse_header(&header)?;
    let mut payload = alloc::vec![0u8; h.payload_len];
    t.recv_exact(&mut payload)?;
    Ok(decode_payload(h.msg_type, &payload).map_err(ParseError::from)?)
}

/// A handshaken connection carrying one request/response exchange at a
/// time.
#[derive(Debug)]
pub struct Session<T> {
    transport: T,
    version: u8,
}

impl<T: Transport> Session<T> {
    /// Client side: send our version, expect the same one back.
    pub fn connect(mut transport: T, version: u8) -> Result<Self, SessionError> {
        write_message(&mut transport, &Message::Hello { version })?;
        match read_message(&mut transport)? {
            Message::Hello { version: v } if v == version => Ok(Session { transport, version }),
            Message::Hello { version: remote } => Err(SessionError::VersionMismatch { local: version, remote }),
            Message::Error { code, text } if code == ErrorCode::VersionMismatch as u16 => {
                let remote = text.parse().unwrap_or(0);
                Err(SessionError::VersionMismatch { local: version, remote })
            }
            other => Err(SessionError::Unexpected {
                expected: "Hello",
                got: other.name(),
            }),
        }
    }

    /// Server side: read the peer's version and refuse a mismatch.
    pub fn accept(mut transport: T, version: u8) -> Result<Self, SessionError> {
        match read_message(&mut transport)? {
            Message::Hello { version: v } if v == version => {
                write_message(&mut transport, &Message::Hello { version })?;
                Ok(Session { transport, version })
            }
            Message::Hello { version: remote } => {
                let _ = write_message(
                    &mut transport,
                    &Message::error(ErrorCode::VersionMismatch, alloc::format!("{version}")),
                );
                Err(SessionError::VersionMismatch { local: version, remote })
            }
            other => Err(SessionError::Unexpected {
                expected: "Hello",
                got: other.name(),
            }),
        }
    }

    pub fn version(&self) -> u8 {
        self.version
    }

    pub fn send(&mut self, m: &Message) -> Result<(), SessionError> {
        write_message(&mut self.transport, m)
    }

    pub fn recv(&mut self) -> Result<Message, SessionError> {
        read_message(&mut self.transport)
    }

    pub fn exchange(&mut self, m: &Message) -> Result<Message, SessionError> {
        self.send(m)?;
        self.recv()
    }

    pub fn into_inner(self) -> T {
        self.transport
    }
}

/// One request/response exchange with a worker, wherever it lives.
pub trait WorkerLink {
    fn call(&mut self, request: &Message) -> Result<Message, SessionError>;
}

impl<T: Transport> WorkerLink for Session<T> {
    fn call(&mut self, request: &Message) -> Result<Message, SessionError> {
        self.exchange(request)
    }
}

impl<L: WorkerLink + ?Sized> WorkerLink for &mut L {
    fn call(&mut self, request: &Message) -> Result<Message, SessionError> {
        (**self).call(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample_messages() -> Vec<Message> {
        vec![
            Message::Hello { version: 1 },
            Message::SetupModel {
                role: ModelRole::SingleLayer(3),
                model: vec![1, 2, 3],
            },
            Message::SetupAck {
                role: ModelRole::ShareMinus,
            },
            Message::InferRequest(InferRequest {
                inference_id: 9,
                mode: InferMode::Layer(2),
                input: Tensor::vector(&[1.0, 2.0]),
                verify_ratio: 0.25,
            }),
            Message::InferResponse(InferResponse {
                inference_id: 9,
                output: Tensor::vector(&[0.5]),
                commit: MerkleCommit::from_layer_roots(vec![[1; 32], [2; 32]], 3),
            }),
            Message::VerifyRequest(VerifyRequest {
                inference_id: 9,
                regions: vec![(1, Region::new(vec![0, 1], vec![2, 2]))],
            }),
            Message::VerifyResponse(VerifyResponse {
                inference_id: 9,
                proof: vec![7; 5],
            }),
            Message::error(ErrorCode::Evicted, "gone"),
        ]
    }

    #[test]
    fn hello_golden_frame() {
        assert_eq!(
            encode(&Message::Hello { version: 1 }),
            [b'V', b'S', b'P', b'1', 0x01, 1, 0, 0, 0, 0, 0, 0, 0, 0x01]
        );
    }

    #[test]
    fn every_kind_round_trips() {
        for m in sample_messages() {
            assert_eq!(decode(&encode(&m)).unwrap(), m);
        }
    }

    #[test]
    fn bad_magic_and_unknown_type() {
        let mut f = encode(&Message::Hello { version: 1 });
        f[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode(&f), Err(ParseError::BadMagic));
        let mut f = encode(&Message::Hello { version: 1 });
        f[4] = 0x42;
        assert_eq!(decode(&f), Err(ParseError::UnknownType(0x42)));
    }

    #[test]
    fn every_truncation_is_reported_as_truncated() {
        for m in sample_messages() {
            let f = encode(&m);
            for cut in 0..f.len() {
                assert!(
                    matches!(decode(&f[..cut]), Err(ParseError::Truncated { .. })),
                    "{} cut at {cut}: {:?}",
                    m.name(),
                    decode(&f[..cut])
                );
            }
        }
    }

    #[test]
    fn oversized_length_rejected() {
        let mut f = encode(&Message::Hello { version: 1 });
        f[5..13].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(decode(&f), Err(ParseError::LengthOverflow(u64::MAX)));
    }

    #[test]
    fn frames_are_self_delimiting() {
        let msgs = sample_messages();
        let mut stream = Vec::new();
        for m in &msgs {
            stream.extend(encode(m));
        }
        let mut rest = &stream[..];
        for m in &msgs {
            let (got, used) = decode_prefix(rest).unwrap();
            assert_eq!(&got, m);
            rest = &rest[used..];
        }
        assert!(rest.is_empty());
    }

    #[test]
    fn invalid_ratio_rejected_on_decode() {
        let m = Message::InferRequest(InferRequest {
            inference_id: 1,
            mode: InferMode::Holistic,
            input: Tensor::vector(&[1.0]),
            verify_ratio: 1.5,
        });
        assert!(matches!(decode(&encode(&m)), Err(ParseError::Payload(_))));
    }

    /// Replays canned inbound bytes and records outbound ones.
    #[derive(Debug)]
    struct Scripted {
        inbound: Vec<u8>,
        pos: usize,
        outbound: Vec<u8>,
    }

    impl Transport for Scripted {
        fn send(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
            self.outbound.extend_from_slice(bytes);
            Ok(())
        }

        fn recv_exact(&mut self, buf: &mut [u8]) -> Result<(), TransportError> {
            if self.pos + buf.len() > self.inbound.len() {
                return Err(TransportError::Closed);
            }
            buf.copy_from_slice(&self.inbound[self.pos..self.pos + buf.len()]);
            self.pos += buf.len();
            Ok(())
        }
    }

    fn scripted(inbound: Vec<u8>) -> Scripted {
        Scripted {
            inbound,
            pos: 0,
            outbound: Vec::new(),
        }
    }

    #[test]
    fn handshake_outcomes() {
        let s = Session::connect(scripted(encode(&Message::Hello { version: 1 })), 1).unwrap();
        assert_eq!(s.version(), 1);

        let err = Session::accept(scripted(encode(&Message::Hello { version: 2 })), 1).unwrap_err();
        assert_eq!(err, SessionError::VersionMismatch { local: 1, remote: 2 });

        let refusal = encode(&Message::error(ErrorCode::VersionMismatch, "2"));
        let err = Session::connect(scripted(refusal), 1).unwrap_err();
        assert_eq!(err, SessionError::VersionMismatch { local: 1, remote: 2 });

        let mut half = encode(&Message::Hello { version: 1 });
        half.truncate(6);
        let err = Session::connect(scripted(half), 1).unwrap_err();
        assert_eq!(err, SessionError::Transport(TransportError::Closed));
    }
}

//! Message types and their canonical binary encoding.
//!
//! Every frame is little-endian with a fixed 16-byte header:
//!
//! ```text
//! message_class(4) | sender(4) | receiver(4) | checksum(4) | body
//! ```
//!
//! Body layouts:
//!
//! * Token: `token_id(8) | cur(4) | new(4) | n(4) | n x score(8)`
//! * Challenge: `100 x f64 row-major | 100 x i64 row-major`
//! * Response: `source(4) | response(8)`
//!
//! The checksum is the CRC-32 of the whole frame with the checksum field
//! zeroed. A frame that fails any check is dropped by the receiver, which
//! makes corruption indistinguishable from a silent sender.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reliability::{ReliabilityTable, Score};

/// Side length of the challenge matrices.
pub const CHALLENGE_DIM: usize = 10;
const CHALLENGE_CELLS: usize = CHALLENGE_DIM * CHALLENGE_DIM;

pub const HEADER_LEN: usize = 16;
const CHECKSUM_OFFSET: usize = 12;
const RESPONSE_BODY_LEN: usize = 12;
const CHALLENGE_BODY_LEN: usize = CHALLENGE_CELLS * 16;
const TOKEN_FIXED_LEN: usize = 20;

/// Position of a node in the ring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    /// Receiver value used for frames addressed to every node.
    pub const BROADCAST: NodeId = NodeId(u32::MAX);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_broadcast(self) -> bool {
        self == Self::BROADCAST
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_broadcast() {
            f.write_str("*")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageClass {
    Token = 0,
    Challenge = 1,
    Response = 2,
}

impl MessageClass {
    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Result<Self, WireError> {
        match code {
            0 => Ok(MessageClass::Token),
            1 => Ok(MessageClass::Challenge),
            2 => Ok(MessageClass::Response),
            other => Err(WireError::UnknownClass(other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub message_class: MessageClass,
    pub sender: NodeId,
    pub receiver: NodeId,
    /// Filled in by [`encode_message`]; ignored on construction.
    pub checksum: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenPayload {
    pub token_id: u64,
    pub cur_token_holder: NodeId,
    pub new_token_holder: NodeId,
    pub r_table: ReliabilityTable,
}

/// Two 10x10 matrices, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ChallengePayload {
    pub float_matrix: [[f64; CHALLENGE_DIM]; CHALLENGE_DIM],
    pub int_matrix: [[i64; CHALLENGE_DIM]; CHALLENGE_DIM],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResponsePayload {
    pub source: NodeId,
    pub response: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Token(TokenPayload),
    Challenge(Box<ChallengePayload>),
    Response(ResponsePayload),
}

impl Body {
    pub fn class(&self) -> MessageClass {
        match self {
            Body::Token(_) => MessageClass::Token,
            Body::Challenge(_) => MessageClass::Challenge,
            Body::Response(_) => MessageClass::Response,
        }
    }
}

/// A header plus exactly one body. The header's class always matches the
/// body because both are derived from the same constructor.
#[derive(Clone, Debug)]
pub struct Message {
    pub header: Header,
    pub body: Body,
}

impl Message {
    pub fn new(sender: NodeId, receiver: NodeId, body: Body) -> Self {
        Message {
            header: Header {
                message_class: body.class(),
                sender,
                receiver,
                checksum: 0,
            },
            body,
        }
    }

    pub fn token(sender: NodeId, payload: TokenPayload) -> Self {
        Self::new(sender, NodeId::BROADCAST, Body::Token(payload))
    }

    pub fn challenge(sender: NodeId, payload: ChallengePayload) -> Self {
        Self::new(
            sender,
            NodeId::BROADCAST,
            Body::Challenge(Box::new(payload)),
        )
    }

    pub fn response(sender: NodeId, receiver: NodeId, payload: ResponsePayload) -> Self {
        Self::new(sender, receiver, Body::Response(payload))
    }

    pub fn class(&self) -> MessageClass {
        self.header.message_class
    }
}

// Equality ignores the checksum field, which is a property of the encoding
// rather than of the message. Floats compare by bit pattern so that the
// round-trip identity is exact.
impl PartialEq for Message {
    fn eq(&self, other: &Self) -> bool {
        let h = (&self.header, &other.header);
        h.0.message_class == h.1.message_class
            && h.0.sender == h.1.sender
            && h.0.receiver == h.1.receiver
            && bodies_bit_equal(&self.body, &other.body)
    }
}

fn bodies_bit_equal(a: &Body, b: &Body) -> bool {
    match (a, b) {
        (Body::Token(x), Body::Token(y)) => {
            x.token_id == y.token_id
                && x.cur_token_holder == y.cur_token_holder
                && x.new_token_holder == y.new_token_holder
                && x.r_table.len() == y.r_table.len()
                && x.r_table
                    .iter()
                    .zip(y.r_table.iter())
                    .all(|(p, q)| p.value().to_bits() == q.value().to_bits())
        }
        (Body::Challenge(x), Body::Challenge(y)) => {
            x.int_matrix == y.int_matrix
                && x.float_matrix
                    .iter()
                    .flatten()
                    .zip(y.float_matrix.iter().flatten())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        }
        (Body::Response(x), Body::Response(y)) => {
            x.source == y.source && x.response.to_bits() == y.response.to_bits()
        }
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("checksum mismatch: frame carries {carried:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { carried: u32, computed: u32 },
    #[error("malformed length: {0} bytes")]
    MalformedLength(usize),
    #[error("unknown message class {0}")]
    UnknownClass(u32),
    #[error("reliability score out of range at index {0}")]
    InvalidScore(usize),
}

/// CRC-32 (IEEE 802.3, reflected, init and final xor `0xFFFFFFFF`).
pub fn compute_checksum(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub fn encoded_len(body: &Body) -> usize {
    HEADER_LEN
        + match body {
            Body::Token(t) => TOKEN_FIXED_LEN + 8 * t.r_table.len(),
            Body::Challenge(_) => CHALLENGE_BODY_LEN,
            Body::Response(_) => RESPONSE_BODY_LEN,
        }
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(&msg.body));
    out.extend_from_slice(&msg.body.class().code().to_le_bytes());
    out.extend_from_slice(&msg.header.sender.0.to_le_bytes());
    out.extend_from_slice(&msg.header.receiver.0.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    match &msg.body {
        Body::Token(t) => {
            out.extend_from_slice(&t.token_id.to_le_bytes());
            out.extend_from_slice(&t.cur_token_holder.0.to_le_bytes());
            out.extend_from_slice(&t.new_token_holder.0.to_le_bytes());
            out.extend_from_slice(&(t.r_table.len() as u32).to_le_bytes());
            for s in t.r_table.iter() {
                out.extend_from_slice(&s.value().to_le_bytes());
            }
        }
        Body::Challenge(c) => {
            for v in c.float_matrix.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in c.int_matrix.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Body::Response(r) => {
            out.extend_from_slice(&r.source.0.to_le_bytes());
            out.extend_from_slice(&r.response.to_le_bytes());
        }
    }
    let crc = compute_checksum(&out);
    out[CHECKSUM_OFFSET..HEADER_LEN].copy_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        a
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn i64(&mut self) -> i64 {
        i64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// Checks the header length, then the checksum, then class and body length,
/// before building anything.
pub fn decode_message(bytes: &[u8]) -> Result<Message, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::MalformedLength(bytes.len()));
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    let class_code = r.u32();
    let sender = NodeId(r.u32());
    let receiver = NodeId(r.u32());
    let carried = r.u32();

    // The checksum goes first: any flipped bit, including one in the class
    // or a length field, must surface as a mismatch.
    let mut scratch = bytes.to_vec();
    scratch[CHECKSUM_OFFSET..HEADER_LEN].fill(0);
    let computed = compute_checksum(&scratch);
    if computed != carried {
        return Err(WireError::ChecksumMismatch { carried, computed });
    }

    let class = MessageClass::from_code(class_code);
    let expected_len = match class {
        Ok(MessageClass::Token) => {
            if bytes.len() < HEADER_LEN + TOKEN_FIXED_LEN {
                return Err(WireError::MalformedLength(bytes.len()));
            }
            let n = u32::from_le_bytes(bytes[HEADER_LEN + 16..HEADER_LEN + 20].try_into().unwrap());
            HEADER_LEN + TOKEN_FIXED_LEN + 8 * n as usize
        }
        Ok(MessageClass::Challenge) => HEADER_LEN + CHALLENGE_BODY_LEN,
        Ok(MessageClass::Response) => HEADER_LEN + RESPONSE_BODY_LEN,
        Err(_) => bytes.len(),
    };

    let class = class?;
    if bytes.len() != expected_len {
        return Err(WireError::MalformedLength(bytes.len()));
    }

    let body = match class {
        MessageClass::Token => {
            let token_id = r.u64();
            let cur = NodeId(r.u32());
            let new = NodeId(r.u32());
            let n = r.u32() as usize;
            let mut scores = Vec::with_capacity(n);
            for i in 0..n {
                scores.push(Score::new(r.f64()).ok_or(WireError::InvalidScore(i))?);
            }
            Body::Token(TokenPayload {
                token_id,
                cur_token_holder: cur,
                new_token_holder: new,
                r_table: ReliabilityTable::from_scores(scores),
            })
        }
        MessageClass::Challenge => {
            let mut c = ChallengePayload {
                float_matrix: [[0.0; CHALLENGE_DIM]; CHALLENGE_DIM],
                int_matrix: [[0; CHALLENGE_DIM]; CHALLENGE_DIM],
            };
            for v in c.float_matrix.iter_mut().flatten() {
                *v = r.f64();
            }
            for v in c.int_matrix.iter_mut().flatten() {
                *v = r.i64();
            }
            Body::Challenge(Box::new(c))
        }
        MessageClass::Response => Body::Response(ResponsePayload {
            source: NodeId(r.u32()),
            response: r.f64(),
        }),
    };
    Ok(Message {
        header: Header {
            message_class: class,
            sender,
            receiver,
            checksum: carried,
        },
        body,
    })
}

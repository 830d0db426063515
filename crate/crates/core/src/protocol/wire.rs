//! Byte-exact frame codec.
//!
//! ```text
//! [frame_len: u32][0x5C 0x0E][tag: u8][header: u32 ...][vec_len: u32][f64 ...]
//! ```
//!
//! All integers and reals are little-endian. `frame_len` counts the bytes
//! after itself. Messages without a vector still carry `vec_len = 0`;
//! `MiniBatchStats` carries two `(vec_len, payload)` blocks, `g_u` first.

use thiserror::Error;

use crate::model::ModelVector;

pub const MAGIC: [u8; 2] = [0x5C, 0x0E];
pub const LEN_PREFIX: usize = 4;

pub const TAG_HELLO: u8 = 0x00;
pub const TAG_PARAMS: u8 = 0x01;
pub const TAG_LOCAL_GRAD_SUM: u8 = 0x02;
pub const TAG_FULL_GRAD: u8 = 0x03;
pub const TAG_LOCAL_UPDATE: u8 = 0x04;
pub const TAG_MINI_BATCH_STATS: u8 = 0x05;
pub const TAG_INNER_PARAMS: u8 = 0x06;
pub const TAG_SHUTDOWN: u8 = 0x07;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Connection handshake sent once by each worker over TCP.
    Hello { worker_id: u32 },
    Params {
        round: u32,
        w: ModelVector,
    },
    LocalGradSum {
        round: u32,
        worker_id: u32,
        z_k: ModelVector,
    },
    FullGrad {
        round: u32,
        z: ModelVector,
    },
    LocalUpdate {
        round: u32,
        worker_id: u32,
        u_tilde: ModelVector,
    },
    MiniBatchStats {
        round: u32,
        inner_step: u32,
        worker_id: u32,
        batch_size: u32,
        g_u: ModelVector,
        g_w: ModelVector,
    },
    InnerParams {
        round: u32,
        inner_step: u32,
        u_m: ModelVector,
    },
    Shutdown,
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => TAG_HELLO,
            Message::Params { .. } => TAG_PARAMS,
            Message::LocalGradSum { .. } => TAG_LOCAL_GRAD_SUM,
            Message::FullGrad { .. } => TAG_FULL_GRAD,
            Message::LocalUpdate { .. } => TAG_LOCAL_UPDATE,
            Message::MiniBatchStats { .. } => TAG_MINI_BATCH_STATS,
            Message::InnerParams { .. } => TAG_INNER_PARAMS,
            Message::Shutdown => TAG_SHUTDOWN,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::Params { .. } => "Params",
            Message::LocalGradSum { .. } => "LocalGradSum",
            Message::FullGrad { .. } => "FullGrad",
            Message::LocalUpdate { .. } => "LocalUpdate",
            Message::MiniBatchStats { .. } => "MiniBatchStats",
            Message::InnerParams { .. } => "InnerParams",
            Message::Shutdown => "Shutdown",
        }
    }

    /// Application payload messages are the ones counted in `CommStats`;
    /// handshake and shutdown frames are control traffic.
    pub fn is_payload(&self) -> bool {
        !matches!(self, Message::Hello { .. } | Message::Shutdown)
    }

    fn header(&self) -> Vec<u32> {
        match *self {
            Message::Hello { worker_id } => vec![worker_id],
            Message::Params { round, .. } | Message::FullGrad { round, .. } => vec![round],
            Message::LocalGradSum {
                round, worker_id, ..
            }
            | Message::LocalUpdate {
                round, worker_id, ..
            } => vec![round, worker_id],
            Message::MiniBatchStats {
                round,
                inner_step,
                worker_id,
                batch_size,
                ..
            } => vec![round, inner_step, worker_id, batch_size],
            Message::InnerParams {
                round, inner_step, ..
            } => vec![round, inner_step],
            Message::Shutdown => vec![],
        }
    }

    fn vectors(&self) -> Vec<&ModelVector> {
        match self {
            Message::Params { w, .. } => vec![w],
            Message::LocalGradSum { z_k, .. } => vec![z_k],
            Message::FullGrad { z, .. } => vec![z],
            Message::LocalUpdate { u_tilde, .. } => vec![u_tilde],
            Message::MiniBatchStats { g_u, g_w, .. } => vec![g_u, g_w],
            Message::InnerParams { u_m, .. } => vec![u_m],
            Message::Hello { .. } | Message::Shutdown => vec![],
        }
    }
}

fn header_words(tag: u8) -> Option<usize> {
    Some(match tag {
        TAG_HELLO => 1,
        TAG_PARAMS | TAG_FULL_GRAD => 1,
        TAG_LOCAL_GRAD_SUM | TAG_LOCAL_UPDATE => 2,
        TAG_MINI_BATCH_STATS => 4,
        TAG_INNER_PARAMS => 2,
        TAG_SHUTDOWN => 0,
        _ => return None,
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unknown message tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("truncated frame: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("vector of length {0} exceeds the u32 length field")]
    TooLong(usize),
}

impl WireError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            WireError::BadMagic(_) => 1,
            WireError::UnknownTag(_) => 2,
            WireError::Truncated { .. } => 3,
            WireError::TrailingBytes(_) => 4,
            WireError::TooLong(_) => 5,
        }
    }
}

/// Size of `encode(msg)` in bytes, length prefix included.
pub fn encoded_len(msg: &Message) -> usize {
    let vectors = msg.vectors();
    let vec_blocks = vectors.len().max(1);
    let reals: usize = vectors.iter().map(|v| v.len()).sum();
    LEN_PREFIX + MAGIC.len() + 1 + 4 * msg.header().len() + 4 * vec_blocks + 8 * reals
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    let total = encoded_len(msg);
    let body_len = total - LEN_PREFIX;
    let body_len32 = u32::try_from(body_len).map_err(|_| WireError::TooLong(body_len))?;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&body_len32.to_le_bytes());
    out.extend_from_slice(&MAGIC);
    out.push(msg.tag());
    for word in msg.header() {
        out.extend_from_slice(&word.to_le_bytes());
    }
    let vectors = msg.vectors();
    if vectors.is_empty() {
        out.extend_from_slice(&0u32.to_le_bytes());
    }
    for v in vectors {
        let len = u32::try_from(v.len()).map_err(|_| WireError::TooLong(v.len()))?;
        out.extend_from_slice(&len.to_le_bytes());
        for x in v.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(WireError::Truncated {
                needed: n,
                available,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vector(&mut self) -> Result<ModelVector, WireError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len.checked_mul(8).ok_or(WireError::TooLong(len))?)?;
        Ok(ModelVector(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ))
    }
}

/// Decodes a frame body, i.e. everything after the length prefix.
pub fn decode_body(body: &[u8]) -> Result<Message, WireError> {
    let mut cur = Cursor { buf: body, pos: 0 };
    let magic = cur.take(2)?;
    if magic != MAGIC {
        return Err(WireError::BadMagic([magic[0], magic[1]]));
    }
    let tag = cur.take(1)?[0];
    let words = header_words(tag).ok_or(WireError::UnknownTag(tag))?;
    let mut h = [0u32; 4];
    for slot in h.iter_mut().take(words) {
        *slot = cur.u32()?;
    }
    let msg = match tag {
        TAG_HELLO | TAG_SHUTDOWN => {
            let len = cur.u32()?;
            if len != 0 {
                return Err(WireError::TrailingBytes(len as usize * 8));
            }
            if tag == TAG_HELLO {
                Message::Hello { worker_id: h[0] }
            } else {
                Message::Shutdown
            }
        }
        TAG_PARAMS => Message::Params {
            round: h[0],
            w: cur.vector()?,
        },
        TAG_LOCAL_GRAD_SUM => Message::LocalGradSum {
            round: h[0],
            worker_id: h[1],
            z_k: cur.vector()?,
        },
        TAG_FULL_GRAD => Message::FullGrad {
            round: h[0],
            z: cur.vector()?,
        },
        TAG_LOCAL_UPDATE => Message::LocalUpdate {
            round: h[0],
            worker_id: h[1],
            u_tilde: cur.vector()?,
        },
        TAG_MINI_BATCH_STATS => Message::MiniBatchStats {
            round: h[0],
            inner_step: h[1],
            worker_id: h[2],
            batch_size: h[3],
            g_u: cur.vector()?,
            g_w: cur.vector()?,
        },
        TAG_INNER_PARAMS => Message::InnerParams {
            round: h[0],
            inner_step: h[1],
            u_m: cur.vector()?,
        },
        _ => unreachable!("tag validated above"),
    };
    let rest = body.len() - cur.pos;
    if rest != 0 {
        return Err(WireError::TrailingBytes(rest));
    }
    Ok(msg)
}

/// Decodes one complete frame, length prefix included.
pub fn decode(frame: &[u8]) -> Result<Message, WireError> {
    if frame.len() < LEN_PREFIX {
        return Err(WireError::Truncated {
            needed: LEN_PREFIX,
            available: frame.len(),
        });
    }
    let declared = u32::from_le_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    let body = &frame[LEN_PREFIX..];
    if body.len() < declared {
        return Err(WireError::Truncated {
            needed: declared,
            available: body.len(),
        });
    }
    if body.len() > declared {
        return Err(WireError::TrailingBytes(body.len() - declared));
    }
    decode_body(body)
}

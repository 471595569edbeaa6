//! Payload layouts. Every multi-byte integer and float is big-endian.
//!
//! ```text
//! params         u32 dim, dim x f64
//! summary        u8 flags (bit 0 flagged, bit 1 clip applied), u8 mechanism
//!                (0 none, 1 gaussian), u64 sample count, f64 loss before,
//!                f64 loss after, f64 sigma, f64 pre-clip norm
//!
//! HELLO          u32 version, 32-byte config hash, u64 sample count
//! GLOBAL_MODEL   params theta, f64 learning rate, u32 m, m x u32 participants,
//!                m x f64 coefficients
//! CLIENT_UPDATE  summary, params (released local parameters)
//! MASKED_SHARE   summary, u32 dim, dim x u64 masked words
//! ROUND_REPORT   f64 accuracy, f64 precision, f64 recall, f64 f1
//! ABORT, BYE     u32 length, UTF-8 reason
//! ```
//!
//! Round and client id travel in the frame header.

use thiserror::Error;

use super::frame::{Frame, MessageType};
use crate::eval::MetricsReport;
use crate::federation::UpdateSummary;
use crate::privacy::{Mechanism, NoiseReceipt};
use crate::ParamVector;

pub const PROTOCOL_VERSION: u32 = 1;
/// Exclusive upper bound on an encoded vector's dimension.
pub const MAX_DIM: usize = 1 << 24;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    #[error("payload ended early")]
    Truncated,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("dimension {0} is not below 2^24")]
    DimensionTooLarge(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid field: {0}")]
    Invalid(String),
}

/// Big-endian payload builder.
#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Big-endian payload cursor. Every read is bounds-checked.
#[derive(Debug)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_be_bytes(self.array()?))
    }

    /// A `u32` element count whose elements of `width` bytes must fit in the rest.
    fn count(&mut self, width: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n >= MAX_DIM {
            return Err(WireError::DimensionTooLarge(n));
        }
        if n * width > self.remaining() {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }

    pub fn finish(self) -> Result<(), WireError> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

fn put_params(w: &mut Writer, v: &ParamVector) -> Result<(), WireError> {
    if v.dim() >= MAX_DIM {
        return Err(WireError::DimensionTooLarge(v.dim()));
    }
    w.u32(v.dim() as u32);
    for (i, x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(WireError::NonFinite(i));
        }
        w.f64(*x);
    }
    Ok(())
}

fn get_params(r: &mut Reader<'_>) -> Result<ParamVector, WireError> {
    let n = r.count(8)?;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let x = r.f64()?;
        if !x.is_finite() {
            return Err(WireError::NonFinite(i));
        }
        values.push(x);
    }
    ParamVector::new(values).map_err(|e| WireError::Invalid(e.to_string()))
}

/// `u32` dimension followed by the values as IEEE-754 binary64, all big-endian.
pub fn encode_params(v: &ParamVector) -> Result<Vec<u8>, WireError> {
    let mut w = Writer::new();
    put_params(&mut w, v)?;
    Ok(w.finish())
}

/// Inverse of [`encode_params`]; the buffer must hold exactly one vector.
pub fn decode_params(bytes: &[u8]) -> Result<ParamVector, WireError> {
    let mut r = Reader::new(bytes);
    let v = get_params(&mut r)?;
    r.finish()?;
    Ok(v)
}

fn put_summary(w: &mut Writer, s: &UpdateSummary) {
    let flags = u8::from(s.flagged) | (u8::from(s.receipt.clip_applied) << 1);
    let mechanism = match s.receipt.mechanism {
        Mechanism::None => 0,
        Mechanism::Gaussian => 1,
    };
    w.u8(flags)
        .u8(mechanism)
        .u64(s.sample_count)
        .f64(s.loss_before)
        .f64(s.loss_after)
        .f64(s.receipt.sigma)
        .f64(s.receipt.pre_clip_norm);
}

fn get_summary(r: &mut Reader<'_>, client_id: u32) -> Result<UpdateSummary, WireError> {
    let flags = r.u8()?;
    if flags > 3 {
        return Err(WireError::Invalid(format!("flags {flags:#04x}")));
    }
    let mechanism = match r.u8()? {
        0 => Mechanism::None,
        1 => Mechanism::Gaussian,
        m => return Err(WireError::Invalid(format!("mechanism {m}"))),
    };
    let sample_count = r.u64()?;
    let loss_before = r.f64()?;
    let loss_after = r.f64()?;
    let sigma = r.f64()?;
    let pre_clip_norm = r.f64()?;
    Ok(UpdateSummary {
        client_id,
        sample_count,
        loss_before,
        loss_after,
        receipt: NoiseReceipt {
            sigma,
            clip_applied: flags & 2 != 0,
            pre_clip_norm,
            mechanism,
        },
        flagged: flags & 1 != 0,
    })
}

fn put_text(w: &mut Writer, s: &str) {
    w.u32(s.len() as u32).bytes(s.as_bytes());
}

fn get_text(r: &mut Reader<'_>) -> Result<String, WireError> {
    let n = r.u32()? as usize;
    let bytes = r.take(n)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| WireError::Invalid("reason is not UTF-8".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub theta: ParamVector,
    pub learning_rate: f64,
    pub participants: Vec<u32>,
    /// Aligned with `participants`.
    pub coefficients: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    GlobalModel(GlobalModel),
    ClientUpdate { summary: UpdateSummary, params: ParamVector },
    MaskedShare { summary: UpdateSummary, words: Vec<u64> },
    RoundReport(MetricsReport),
    Abort(String),
    Bye(String),
}

impl Message {
    pub fn msg_type(&self) -> MessageType {
        match self {
            Message::Hello(_) => MessageType::Hello,
            Message::GlobalModel(_) => MessageType::GlobalModel,
            Message::ClientUpdate { .. } => MessageType::ClientUpdate,
            Message::MaskedShare { .. } => MessageType::MaskedShare,
            Message::RoundReport(_) => MessageType::RoundReport,
            Message::Abort(_) => MessageType::Abort,
            Message::Bye(_) => MessageType::Bye,
        }
    }

    pub fn encode_payload(&self) -> Result<Vec<u8>, WireError> {
        let mut w = Writer::new();
        match self {
            Message::Hello(h) => {
                w.u32(h.version).bytes(&h.config_hash).u64(h.sample_count);
            }
            Message::GlobalModel(g) => {
                if g.participants.len() != g.coefficients.len() {
                    return Err(WireError::Invalid("participants and coefficients differ in length".into()));
                }
                put_params(&mut w, &g.theta)?;
                w.f64(g.learning_rate).u32(g.participants.len() as u32);
                for p in &g.participants {
                    w.u32(*p);
                }
                for c in &g.coefficients {
                    w.f64(*c);
                }
            }
            Message::ClientUpdate { summary, params } => {
                put_summary(&mut w, summary);
                put_params(&mut w, params)?;
            }
            Message::MaskedShare { summary, words } => {
                if words.len() >= MAX_DIM {
                    return Err(WireError::DimensionTooLarge(words.len()));
                }
                put_summary(&mut w, summary);
                w.u32(words.len() as u32);
                for x in words {
                    w.u64(*x);
                }
            }
            Message::RoundReport(m) => {
                w.f64(m.accuracy).f64(m.precision).f64(m.recall).f64(m.f1);
            }
            Message::Abort(reason) | Message::Bye(reason) => put_text(&mut w, reason),
        }
        Ok(w.finish())
    }

    pub fn to_frame(&self, round: u32, client_id: u32) -> Result<Frame, WireError> {
        Ok(Frame::new(self.msg_type(), round, client_id, self.encode_payload()?))
    }

    pub fn from_frame(frame: &Frame) -> Result<Self, WireError> {
        let mut r = Reader::new(&frame.payload);
        let msg = match frame.msg_type {
            MessageType::Hello => Message::Hello(Hello {
                version: r.u32()?,
                config_hash: r.array()?,
                sample_count: r.u64()?,
            }),
            MessageType::GlobalModel => {
                let theta = get_params(&mut r)?;
                let learning_rate = r.f64()?;
                let m = r.count(12)?;
                let participants = (0..m).map(|_| r.u32()).collect::<Result<_, _>>()?;
                let coefficients = (0..m).map(|_| r.f64()).collect::<Result<_, _>>()?;
                Message::GlobalModel(GlobalModel { theta, learning_rate, participants, coefficients })
            }
            MessageType::ClientUpdate => Message::ClientUpdate {
                summary: get_summary(&mut r, frame.client_id)?,
                params: get_params(&mut r)?,
            },
            MessageType::MaskedShare => {
                let summary = get_summary(&mut r, frame.client_id)?;
                let n = r.count(8)?;
                let words = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
                Message::MaskedShare { summary, words }
            }
            MessageType::RoundReport => Message::RoundReport(MetricsReport {
                accuracy: r.f64()?,
                precision: r.f64()?,
                recall: r.f64()?,
                f1: r.f64()?,
            }),
            MessageType::Abort => Message::Abort(get_text(&mut r)?),
            MessageType::Bye => Message::Bye(get_text(&mut r)?),
        };
        r.finish()?;
        Ok(msg)
    }
}

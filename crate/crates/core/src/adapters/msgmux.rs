//! MSGMUX: message multiplexing over a byte-stream carrier.
//!
//! Every frame is a 10-byte header followed by the payload:
//!
//! ```text
//!  0        1               5        6               10
//! +--------+---------------+--------+---------------+-----------+
//! |  type  |  stream id    | flags  |    length     |  payload  |
//! | 1 byte | 4 bytes (BE)  | 1 byte | 4 bytes (BE)  |  length   |
//! +--------+---------------+--------+---------------+-----------+
//! ```
//!
//! An association starts with the initiator writing [`MAGIC`]; the acceptor
//! echoes it. Initiator-opened streams use odd ids, acceptor-opened streams
//! even ids. Stream 0 carries association control (`GOAWAY`).

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TAPSMUX1";
pub const HEADER_LEN: usize = 10;
/// Largest payload the encoder puts in one frame.
pub const MAX_FRAME_PAYLOAD: usize = 64 * 1024;
/// Largest payload the decoder accepts in one frame.
pub const MAX_DECODE_PAYLOAD: usize = 16 * 1024 * 1024;
/// Upper bound on a reassembled message.
pub const MAX_MESSAGE: usize = 16 * 1024 * 1024;

pub const FLAG_END_OF_MESSAGE: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameType {
    Data = 0x01,
    OpenStream = 0x02,
    CloseStream = 0x03,
    ResetStream = 0x04,
    GoAway = 0x05,
}

impl TryFrom<u8> for FrameType {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => FrameType::Data,
            0x02 => FrameType::OpenStream,
            0x03 => FrameType::CloseStream,
            0x04 => FrameType::ResetStream,
            0x05 => FrameType::GoAway,
            other => return Err(Error::MalformedFrame(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub stream_id: u32,
    pub flags: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn data(stream_id: u32, payload: impl Into<Vec<u8>>, end_of_message: bool) -> Self {
        Frame {
            kind: FrameType::Data,
            stream_id,
            flags: if end_of_message { FLAG_END_OF_MESSAGE } else { 0 },
            payload: payload.into(),
        }
    }

    pub fn control(kind: FrameType, stream_id: u32) -> Self {
        Frame {
            kind,
            stream_id,
            flags: 0,
            payload: Vec::new(),
        }
    }

    pub fn is_end_of_message(&self) -> bool {
        self.flags & FLAG_END_OF_MESSAGE != 0
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        let len = u32::try_from(self.payload.len()).expect("frame payload exceeds u32");
        out.reserve(self.encoded_len());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.stream_id.to_be_bytes());
        out.push(self.flags);
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }
}

/// Decodes every complete frame at the front of `buf` and returns the
/// undecoded tail.
pub fn decode_frames(buf: &[u8]) -> Result<(Vec<Frame>, &[u8])> {
    let mut frames = Vec::new();
    let mut rest = buf;
    while rest.len() >= HEADER_LEN {
        let kind = FrameType::try_from(rest[0])?;
        let stream_id = u32::from_be_bytes(rest[1..5].try_into().unwrap());
        let flags = rest[5];
        let len = u32::from_be_bytes(rest[6..10].try_into().unwrap());
        if len as usize > MAX_DECODE_PAYLOAD {
            return Err(Error::FrameTooLarge(len));
        }
        let total = HEADER_LEN + len as usize;
        if rest.len() < total {
            break;
        }
        frames.push(Frame {
            kind,
            stream_id,
            flags,
            payload: rest[HEADER_LEN..total].to_vec(),
        });
        rest = &rest[total..];
    }
    // A bad type byte is reported as soon as it is visible, even before the
    // rest of its header has arrived.
    if let Some(&b) = rest.first() {
        FrameType::try_from(b)?;
    }
    Ok((frames, rest))
}

/// Incremental decoder that keeps the partial tail between calls.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    pending: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Result<Vec<Frame>> {
        self.pending.extend_from_slice(bytes);
        let (frames, rest) = decode_frames(&self.pending)?;
        let consumed = self.pending.len() - rest.len();
        self.pending.drain(..consumed);
        Ok(frames)
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }
}

/// Splits a message into DATA frames of at most [`MAX_FRAME_PAYLOAD`] bytes.
/// The last frame carries END_OF_MESSAGE; an empty message is one empty frame.
pub fn encode_message(stream_id: u32, data: &[u8], out: &mut Vec<u8>) {
    if data.is_empty() {
        Frame::data(stream_id, Vec::new(), true).encode_into(out);
        return;
    }
    let mut chunks = data.chunks(MAX_FRAME_PAYLOAD).peekable();
    while let Some(chunk) = chunks.next() {
        Frame::data(stream_id, chunk, chunks.peek().is_none()).encode_into(out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Acceptor,
}

/// Something the peer did on the association.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AssocEvent {
    StreamOpened(u32),
    Message { stream_id: u32, data: Vec<u8> },
    StreamClosed(u32),
    StreamReset(u32),
    GoAway,
}

/// Sans-IO state of one MSGMUX association. Outbound frames are appended
/// to a caller-supplied buffer that the caller writes to the carrier.
#[derive(Debug)]
pub struct Association {
    role: Role,
    next_local: u64,
    open: BTreeSet<u32>,
    goaway_sent: bool,
    goaway_received: bool,
    decoder: FrameDecoder,
    reassembly: HashMap<u32, Vec<u8>>,
}

impl Association {
    pub fn new(role: Role) -> Self {
        Association {
            role,
            next_local: match role {
                Role::Initiator => 1,
                Role::Acceptor => 2,
            },
            open: BTreeSet::new(),
            goaway_sent: false,
            goaway_received: false,
            decoder: FrameDecoder::new(),
            reassembly: HashMap::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_going_away(&self) -> bool {
        self.goaway_sent || self.goaway_received
    }

    pub fn open_streams(&self) -> impl Iterator<Item = u32> + '_ {
        self.open.iter().copied()
    }

    pub fn is_open(&self, stream_id: u32) -> bool {
        self.open.contains(&stream_id)
    }

    pub fn open_stream(&mut self, out: &mut Vec<u8>) -> Result<u32> {
        if self.is_going_away() {
            return Err(Error::AssociationClosed);
        }
        let id = u32::try_from(self.next_local).map_err(|_| Error::StreamLimit)?;
        self.next_local += 2;
        self.open.insert(id);
        Frame::control(FrameType::OpenStream, id).encode_into(out);
        Ok(id)
    }

    pub fn send_message(&mut self, stream_id: u32, data: &[u8], out: &mut Vec<u8>) -> Result<()> {
        if !self.open.contains(&stream_id) {
            return Err(Error::CarrierClosed);
        }
        encode_message(stream_id, data, out);
        Ok(())
    }

    pub fn close_stream(&mut self, stream_id: u32, out: &mut Vec<u8>) {
        if self.open.remove(&stream_id) {
            self.reassembly.remove(&stream_id);
            Frame::control(FrameType::CloseStream, stream_id).encode_into(out);
        }
    }

    pub fn reset_stream(&mut self, stream_id: u32, out: &mut Vec<u8>) {
        if self.open.remove(&stream_id) {
            self.reassembly.remove(&stream_id);
            Frame::control(FrameType::ResetStream, stream_id).encode_into(out);
        }
    }

    pub fn goaway(&mut self, out: &mut Vec<u8>) {
        if !self.goaway_sent {
            self.goaway_sent = true;
            Frame::control(FrameType::GoAway, 0).encode_into(out);
        }
    }

    /// Feeds carrier bytes. A decode error means the association must be
    /// torn down.
    pub fn receive(&mut self, bytes: &[u8]) -> Result<Vec<AssocEvent>> {
        let mut events = Vec::new();
        for frame in self.decoder.push(bytes)? {
            let id = frame.stream_id;
            match frame.kind {
                FrameType::OpenStream => {
                    if id != 0 && !self.goaway_received && self.open.insert(id) {
                        events.push(AssocEvent::StreamOpened(id));
                    }
                }
                FrameType::Data => {
                    // Late data for a stream we already closed or reset.
                    if !self.open.contains(&id) {
                        continue;
                    }
                    let buf = self.reassembly.entry(id).or_default();
                    if buf.len() + frame.payload.len() > MAX_MESSAGE {
                        return Err(Error::ReassemblyOverflow(MAX_MESSAGE));
                    }
                    buf.extend_from_slice(&frame.payload);
                    if frame.is_end_of_message() {
                        let data = self.reassembly.remove(&id).unwrap_or_default();
                        events.push(AssocEvent::Message { stream_id: id, data });
                    }
                }
                FrameType::CloseStream => {
                    if self.open.remove(&id) {
                        self.reassembly.remove(&id);
                        events.push(AssocEvent::StreamClosed(id));
                    }
                }
                FrameType::ResetStream => {
                    if self.open.remove(&id) {
                        self.reassembly.remove(&id);
                        events.push(AssocEvent::StreamReset(id));
                    }
                }
                FrameType::GoAway => {
                    if !self.goaway_received {
                        self.goaway_received = true;
                        events.push(AssocEvent::GoAway);
                    }
                }
            }
        }
        Ok(events)
    }
}

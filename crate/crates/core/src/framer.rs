//! Message framers.
//!
//! A framer sits between the application and the protocol adapter. On the
//! way out it rewrites each message (typically prepending a header); on the
//! way in it reads carrier bytes through a [`ReceiveCursor`] and decides
//! where application messages begin and end.
//!
//! Each call to [`Framer::handle_received_data`] is atomic: if it returns
//! [`FramerError::NeedMore`] or [`FramerError::Range`], everything it did to
//! the cursor is rolled back and the call is repeated from the top once
//! enough bytes are buffered. A framer therefore has to compute its cursor
//! operations from the buffered bytes alone, as the header framer below does.

use std::collections::VecDeque;
use std::net::SocketAddr;

use crate::properties::MessageProperties;

/// Context travelling with a message.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MessageContext {
    pub props: MessageProperties,
    pub remote: Option<SocketAddr>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FramerError {
    /// Fewer bytes are buffered than the framer asked for. Not a failure:
    /// the call is retried when `needed` bytes are available.
    #[error("framer needs {needed} buffered bytes")]
    NeedMore { needed: usize },
    /// A cursor operation asked for more bytes than are buffered.
    #[error("cursor range error: {requested} bytes requested, {available} available")]
    Range { requested: usize, available: usize },
    #[error("framer failed: {0}")]
    Failed(String),
}

/// Application-defined message framing.
pub trait Framer: Send {
    /// Runs once before any data callback.
    fn start(&mut self) {}

    /// Runs once after the last data callback.
    fn stop(&mut self) {}

    /// Transforms one outbound message. Whatever is passed to
    /// [`FramerSender::send`] goes to the next framer or to the wire.
    fn new_sent_message(
        &mut self,
        out: &mut FramerSender,
        data: &[u8],
        ctx: &MessageContext,
        is_end: bool,
    ) -> Result<(), FramerError>;

    /// Consumes inbound bytes from `cursor`.
    fn handle_received_data(&mut self, cursor: &mut ReceiveCursor) -> Result<(), FramerError>;
}

/// Collects the bytes a framer forwards for one outbound message.
#[derive(Debug, Default)]
pub struct FramerSender {
    chunks: Vec<(Vec<u8>, bool)>,
}

impl FramerSender {
    pub fn send(&mut self, data: impl Into<Vec<u8>>, is_end: bool) {
        self.chunks.push((data.into(), is_end));
    }
}

/// A piece of an inbound message produced by a framer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub data: Vec<u8>,
    pub ctx: MessageContext,
    pub is_end: bool,
}

/// Inbound byte buffer with a read offset.
///
/// Offsets are absolute: `base` counts bytes consumed (delivered or
/// discarded) since the connection started.
#[derive(Debug, Default)]
pub struct ReceiveCursor {
    buf: VecDeque<u8>,
    base: u64,
    /// Tentative offset into `buf` during a framer call.
    pos: usize,
    staged: Vec<Delivery>,
    staged_discard: usize,
    /// Absolute offsets at which a carrier message ended.
    boundaries: VecDeque<u64>,
    ctx: MessageContext,
    need: Option<usize>,
    received: u64,
    delivered: u64,
    discarded: u64,
}

impl ReceiveCursor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends carrier bytes. `is_end` marks the end of a carrier message.
    pub fn push(&mut self, bytes: &[u8], is_end: bool, ctx: &MessageContext) {
        self.buf.extend(bytes);
        self.received += bytes.len() as u64;
        self.ctx = ctx.clone();
        if is_end {
            self.boundaries.push_back(self.base + self.buf.len() as u64);
        }
    }

    /// Bytes available to the current framer call.
    pub fn available(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Bytes not yet consumed by a committed framer call.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    /// Returns between `min_len` and `max_len` bytes at the read offset
    /// without consuming them, the pending message context, and whether the
    /// returned bytes end a carrier message.
    pub fn parse(&mut self, min_len: usize, max_len: usize) -> Result<(&[u8], MessageContext, bool), FramerError> {
        if self.available() < min_len {
            let needed = self.pos + min_len;
            self.need = Some(needed);
            return Err(FramerError::NeedMore { needed });
        }
        let len = self.available().min(max_len.max(min_len));
        let end_abs = self.base + (self.pos + len) as u64;
        let is_end = self.boundaries.contains(&end_abs);
        let ctx = self.ctx.clone();
        let slice = &self.buf.make_contiguous()[self.pos..self.pos + len];
        Ok((slice, ctx, is_end))
    }

    /// Discards `n` bytes without delivering them.
    pub fn advance_receive_cursor(&mut self, n: usize) -> Result<(), FramerError> {
        self.check_range(n)?;
        self.pos += n;
        self.staged_discard += n;
        Ok(())
    }

    /// Delivers the next `n` bytes to the application and advances past
    /// them. `is_end` completes the message.
    pub fn deliver_and_advance_receive_cursor(
        &mut self,
        ctx: MessageContext,
        n: usize,
        is_end: bool,
    ) -> Result<(), FramerError> {
        self.check_range(n)?;
        let data: Vec<u8> = self.buf.range(self.pos..self.pos + n).copied().collect();
        self.pos += n;
        self.staged.push(Delivery { data, ctx, is_end });
        Ok(())
    }

    fn check_range(&mut self, n: usize) -> Result<(), FramerError> {
        let available = self.available();
        if n > available {
            self.need = Some(self.pos + n);
            return Err(FramerError::Range {
                requested: n,
                available,
            });
        }
        Ok(())
    }

    fn begin(&mut self) {
        debug_assert_eq!(self.pos, 0);
        debug_assert!(self.staged.is_empty());
        self.need = None;
    }

    /// Makes the current call's effects permanent. Returns whether the read
    /// offset moved.
    fn commit(&mut self, out: &mut Vec<Delivery>) -> bool {
        let moved = self.pos > 0;
        self.buf.drain(..self.pos);
        self.base += self.pos as u64;
        self.discarded += self.staged_discard as u64;
        self.delivered += (self.pos - self.staged_discard) as u64;
        while self.boundaries.front().is_some_and(|&b| b <= self.base) {
            self.boundaries.pop_front();
        }
        self.pos = 0;
        self.staged_discard = 0;
        out.append(&mut self.staged);
        moved
    }

    fn rollback(&mut self) -> usize {
        self.pos = 0;
        self.staged_discard = 0;
        self.staged.clear();
        self.need.take().unwrap_or(self.buf.len() + 1)
    }
}

/// Drives one framer over its cursor until it stops making progress.
fn run_inbound(
    framer: &mut dyn Framer,
    cursor: &mut ReceiveCursor,
    need: &mut usize,
) -> Result<Vec<Delivery>, FramerError> {
    let mut out = Vec::new();
    while cursor.buffered() > 0 && cursor.buffered() >= *need {
        cursor.begin();
        match framer.handle_received_data(cursor) {
            Ok(()) => {
                *need = 0;
                if !cursor.commit(&mut out) {
                    break;
                }
            }
            Err(FramerError::NeedMore { .. }) | Err(FramerError::Range { .. }) => {
                *need = cursor.rollback();
                break;
            }
            Err(e) => {
                cursor.rollback();
                return Err(e);
            }
        }
    }
    Ok(out)
}

/// The framers of one connection, in the order they were added.
///
/// Outbound data passes through them first to last, so the last framer is
/// closest to the wire; inbound data passes through them last to first.
#[derive(Default)]
pub struct FramerChain {
    framers: Vec<Box<dyn Framer>>,
    cursors: Vec<ReceiveCursor>,
    needs: Vec<usize>,
    started: bool,
    stopped: bool,
}

impl std::fmt::Debug for FramerChain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FramerChain")
            .field("framers", &self.framers.len())
            .field("started", &self.started)
            .field("stopped", &self.stopped)
            .finish()
    }
}

impl FramerChain {
    pub fn new(framers: Vec<Box<dyn Framer>>) -> Self {
        let n = framers.len();
        FramerChain {
            framers,
            cursors: (0..n).map(|_| ReceiveCursor::new()).collect(),
            needs: vec![0; n],
            started: false,
            stopped: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.framers.is_empty()
    }

    pub fn len(&self) -> usize {
        self.framers.len()
    }

    pub fn start(&mut self) {
        if !self.started {
            self.started = true;
            self.framers.iter_mut().for_each(|f| f.start());
        }
    }

    pub fn stop(&mut self) {
        if self.started && !self.stopped {
            self.stopped = true;
            self.framers.iter_mut().for_each(|f| f.stop());
        }
    }

    /// Runs an outbound message through every framer and returns the bytes
    /// to hand to the protocol adapter.
    pub fn frame_outbound(&mut self, data: &[u8], ctx: &MessageContext, is_end: bool) -> Result<Vec<u8>, FramerError> {
        if self.framers.is_empty() {
            return Ok(data.to_vec());
        }
        let mut chunks = vec![(data.to_vec(), is_end)];
        for framer in &mut self.framers {
            let mut out = FramerSender::default();
            for (chunk, end) in &chunks {
                framer.new_sent_message(&mut out, chunk, ctx, *end)?;
            }
            chunks = out.chunks;
        }
        Ok(chunks.into_iter().flat_map(|(c, _)| c).collect())
    }

    /// Feeds carrier bytes and returns whatever the innermost framer
    /// delivered. With no framers the bytes pass through as one delivery.
    pub fn push_inbound(
        &mut self,
        bytes: &[u8],
        is_end: bool,
        ctx: &MessageContext,
    ) -> Result<Vec<Delivery>, FramerError> {
        if self.framers.is_empty() {
            return Ok(vec![Delivery {
                data: bytes.to_vec(),
                ctx: ctx.clone(),
                is_end,
            }]);
        }
        let mut input = vec![Delivery {
            data: bytes.to_vec(),
            ctx: ctx.clone(),
            is_end,
        }];
        for i in (0..self.framers.len()).rev() {
            let cursor = &mut self.cursors[i];
            for d in &input {
                cursor.push(&d.data, d.is_end, &d.ctx);
            }
            input = run_inbound(self.framers[i].as_mut(), cursor, &mut self.needs[i])?;
        }
        Ok(input)
    }

    /// Bytes held by the outermost framer's cursor.
    pub fn cursor(&self) -> Option<&ReceiveCursor> {
        self.cursors.last()
    }
}

/// Demo framer: prepends the 6-byte literal `HEADER` to each outbound
/// message and, on receipt, strips the header and delivers the next five
/// bytes as one message. The header is not validated.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeaderFramer;

impl HeaderFramer {
    pub const HEADER: &'static [u8; 6] = b"HEADER";
    pub const BODY_LEN: usize = 5;
}

impl Framer for HeaderFramer {
    fn new_sent_message(
        &mut self,
        out: &mut FramerSender,
        data: &[u8],
        _ctx: &MessageContext,
        is_end: bool,
    ) -> Result<(), FramerError> {
        let mut framed = Vec::with_capacity(Self::HEADER.len() + data.len());
        framed.extend_from_slice(Self::HEADER);
        framed.extend_from_slice(data);
        out.send(framed, is_end);
        Ok(())
    }

    fn handle_received_data(&mut self, cursor: &mut ReceiveCursor) -> Result<(), FramerError> {
        let (_header, ctx, _is_end) = cursor.parse(6, 6)?;
        cursor.advance_receive_cursor(6)?;
        cursor.deliver_and_advance_receive_cursor(ctx, Self::BODY_LEN, true)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> MessageContext {
        MessageContext::default()
    }

    fn cursor_with(bytes: &[u8]) -> ReceiveCursor {
        let mut c = ReceiveCursor::new();
        c.push(bytes, false, &ctx());
        c
    }

    #[test]
    fn outbound_header() {
        let mut chain = FramerChain::new(vec![Box::new(HeaderFramer)]);
        assert_eq!(chain.frame_outbound(b"FIVE!", &ctx(), true).unwrap(), b"HEADERFIVE!");
        let wire = chain.frame_outbound(b"HelloWorld", &ctx(), true).unwrap();
        assert_eq!(wire, b"HEADERHelloWorld");
        assert_eq!(wire.len(), 16);
        let mut empty = FramerChain::new(Vec::new());
        assert_eq!(empty.frame_outbound(b"x", &ctx(), true).unwrap(), b"x");
    }

    #[test]
    fn parse_does_not_consume() {
        let mut c = cursor_with(b"HEADERFIVE!");
        assert_eq!(c.parse(6, 6).unwrap().0, b"HEADER");
        assert_eq!(c.parse(1, 4).unwrap().0, b"HEAD");
        assert_eq!(c.available(), 11);
        let mut short = cursor_with(b"HEA");
        assert_eq!(short.parse(6, 6).unwrap_err(), FramerError::NeedMore { needed: 6 });
    }

    #[test]
    fn advance_and_deliver() {
        let mut c = cursor_with(b"HEADERFIVE!");
        c.advance_receive_cursor(0).unwrap();
        assert_eq!(c.available(), 11);
        c.advance_receive_cursor(6).unwrap();
        assert_eq!(c.parse(5, 5).unwrap().0, b"FIVE!");
        assert!(matches!(
            c.advance_receive_cursor(6),
            Err(FramerError::Range {
                requested: 6,
                available: 5
            })
        ));
        c.deliver_and_advance_receive_cursor(ctx(), 5, true).unwrap();
        let mut out = Vec::new();
        c.commit(&mut out);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].data, b"FIVE!");
        assert_eq!((c.delivered(), c.discarded(), c.buffered()), (5, 6, 0));
    }

    #[test]
    fn zero_length_delivery() {
        let mut c = cursor_with(b"ab");
        c.deliver_and_advance_receive_cursor(ctx(), 0, true).unwrap();
        let mut out = Vec::new();
        assert!(!c.commit(&mut out));
        assert_eq!(out[0].data, b"");
        assert!(out[0].is_end);
    }

    #[test]
    fn header_framer_inbound() {
        let mut chain = FramerChain::new(vec![Box::new(HeaderFramer)]);
        chain.start();
        let d = chain.push_inbound(b"HEADERFIVE!", false, &ctx()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].data, b"FIVE!");
        let d = chain.push_inbound(b"HEADERHelloWorld", false, &ctx()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].data, b"Hello");
        // "World" stays buffered; it is too short for another header.
        assert_eq!(chain.cursor().unwrap().buffered(), 5);
    }

    #[test]
    fn header_framer_suspends_and_resumes() {
        let mut chain = FramerChain::new(vec![Box::new(HeaderFramer)]);
        assert!(chain.push_inbound(b"HEA", false, &ctx()).unwrap().is_empty());
        // Header complete but body short: the whole call is rolled back.
        assert!(chain.push_inbound(b"DERFI", false, &ctx()).unwrap().is_empty());
        assert_eq!(chain.cursor().unwrap().buffered(), 8);
        let d = chain.push_inbound(b"VE!", false, &ctx()).unwrap();
        assert_eq!(d[0].data, b"FIVE!");
    }

    #[test]
    fn chain_order() {
        #[derive(Clone)]
        struct Tag(u8);
        impl Framer for Tag {
            fn new_sent_message(
                &mut self,
                out: &mut FramerSender,
                data: &[u8],
                _ctx: &MessageContext,
                is_end: bool,
            ) -> Result<(), FramerError> {
                let mut v = vec![self.0];
                v.extend_from_slice(data);
                out.send(v, is_end);
                Ok(())
            }
            fn handle_received_data(&mut self, c: &mut ReceiveCursor) -> Result<(), FramerError> {
                let (bytes, ctx, _) = c.parse(1, usize::MAX)?;
                assert_eq!(bytes[0], self.0);
                let n = bytes.len() - 1;
                c.advance_receive_cursor(1)?;
                c.deliver_and_advance_receive_cursor(ctx, n, true)
            }
        }
        let mut chain = FramerChain::new(vec![Box::new(Tag(b'a')), Box::new(Tag(b'b'))]);
        let wire = chain.frame_outbound(b"x", &ctx(), true).unwrap();
        assert_eq!(wire, b"bax");
        let d = chain.push_inbound(&wire, true, &ctx()).unwrap();
        assert_eq!(d[0].data, b"x");
    }

    #[test]
    fn start_stop_once() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        struct Count(Arc<AtomicUsize>, Arc<AtomicUsize>);
        impl Framer for Count {
            fn start(&mut self) {
                self.0.fetch_add(1, Ordering::SeqCst);
            }
            fn stop(&mut self) {
                self.1.fetch_add(1, Ordering::SeqCst);
            }
            fn new_sent_message(
                &mut self,
                _: &mut FramerSender,
                _: &[u8],
                _: &MessageContext,
                _: bool,
            ) -> Result<(), FramerError> {
                Ok(())
            }
            fn handle_received_data(&mut self, _: &mut ReceiveCursor) -> Result<(), FramerError> {
                Ok(())
            }
        }
        let (a, b) = (Arc::new(AtomicUsize::new(0)), Arc::new(AtomicUsize::new(0)));
        let mut chain = FramerChain::new(vec![Box::new(Count(a.clone(), b.clone()))]);
        chain.stop();
        chain.start();
        chain.start();
        chain.stop();
        chain.stop();
        assert_eq!((a.load(Ordering::SeqCst), b.load(Ordering::SeqCst)), (1, 1));
    }
}

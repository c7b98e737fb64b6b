//! Benchmark inputs shared by the bench targets.

use taps_core::msgmux::Frame;

/// `count` DATA frames of `size` bytes on alternating streams.
pub fn data_frames(count: usize, size: usize) -> Vec<Frame> {
    (0..count)
        .map(|i| Frame::data(1 + (i % 2) as u32, vec![i as u8; size], true))
        .collect()
}

/// The wire form of `frames`, back to back.
pub fn encode_all(frames: &[Frame]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in frames {
        f.encode_into(&mut out);
    }
    out
}

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taps_core::{Framer, FramerChain, FramerError, FramerSender, HeaderFramer, MessageContext, ReceiveCursor};

/// Runs a random parse/advance/deliver program on every call and logs the
/// absolute byte ranges it delivered in calls that committed.
struct FuzzFramer {
    rng: ChaCha8Rng,
    log: Arc<Mutex<Vec<(u64, usize)>>>,
}

impl Framer for FuzzFramer {
    fn new_sent_message(
        &mut self,
        out: &mut FramerSender,
        data: &[u8],
        _ctx: &MessageContext,
        is_end: bool,
    ) -> Result<(), FramerError> {
        out.send(data.to_vec(), is_end);
        Ok(())
    }

    fn handle_received_data(&mut self, cursor: &mut ReceiveCursor) -> Result<(), FramerError> {
        let start = cursor.received() - cursor.buffered() as u64;
        let mut pos = 0u64;
        let mut staged = Vec::new();
        for _ in 0..self.rng.gen_range(0..5) {
            let avail = cursor.available();
            let n = self.rng.gen_range(0..=avail + 2);
            match self.rng.gen_range(0..3) {
                0 => {
                    let max = n + self.rng.gen_range(0..4);
                    let (bytes, _, _) = cursor.parse(n, max)?;
                    assert!(bytes.len() >= n && bytes.len() <= max.max(n));
                }
                1 => {
                    cursor.advance_receive_cursor(n)?;
                    pos += n as u64;
                }
                _ => {
                    let ctx = MessageContext::default();
                    cursor.deliver_and_advance_receive_cursor(ctx, n, self.rng.gen())?;
                    staged.push((start + pos, n));
                    pos += n as u64;
                }
            }
        }
        self.log.lock().unwrap().extend(staged);
        Ok(())
    }
}

fn fuzz_once(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = rng.gen_range(0..4000);
    let mut input = vec![0u8; total];
    rng.fill(&mut input[..]);
    let log = Arc::new(Mutex::new(Vec::new()));
    let framer = FuzzFramer {
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        log: log.clone(),
    };
    let mut chain = FramerChain::new(vec![Box::new(framer)]);
    chain.start();
    let ctx = MessageContext::default();
    let mut delivered = Vec::new();
    let mut pushed = 0;
    while pushed < total {
        let n = rng.gen_range(1..=300).min(total - pushed);
        let out = chain.push_inbound(&input[pushed..pushed + n], rng.gen(), &ctx).unwrap();
        delivered.extend(out);
        pushed += n;
        let c = chain.cursor().unwrap();
        assert_eq!(c.received(), pushed as u64);
        assert_eq!(
            c.delivered() + c.discarded() + c.buffered() as u64,
            c.received(),
            "seed {seed}"
        );
    }

    // Committed ranges never overlap and match the input byte for byte.
    let log = log.lock().unwrap();
    assert_eq!(log.len(), delivered.len(), "seed {seed}");
    let mut end = 0u64;
    let mut sum = 0u64;
    for ((start, len), d) in log.iter().zip(&delivered) {
        assert!(*start >= end, "seed {seed}: byte re-delivered");
        assert_eq!(d.data.len(), *len);
        assert_eq!(d.data[..], input[*start as usize..*start as usize + len]);
        end = start + *len as u64;
        sum += *len as u64;
    }
    assert_eq!(sum, chain.cursor().unwrap().delivered());
}

#[test]
fn random_programs_conserve_bytes() {
    for seed in 0..2000 {
        fuzz_once(seed);
    }
}

#[test]
fn header_framer_over_every_split() {
    let wire = b"HEADERFIVE!HEADERHelloWorld";
    for split in 0..=wire.len() {
        let mut chain = FramerChain::new(vec![Box::new(HeaderFramer)]);
        let ctx = MessageContext::default();
        let mut out = chain.push_inbound(&wire[..split], false, &ctx).unwrap();
        out.extend(chain.push_inbound(&wire[split..], false, &ctx).unwrap());
        let bodies: Vec<&[u8]> = out.iter().map(|d| &d.data[..]).collect();
        assert_eq!(bodies, vec![&b"FIVE!"[..], &b"Hello"[..]]);
        let c = chain.cursor().unwrap();
        assert_eq!((c.delivered(), c.discarded(), c.buffered()), (10, 12, 5));
    }
}

#[test]
fn failing_framer_surfaces_error() {
    struct Refuse;
    impl Framer for Refuse {
        fn new_sent_message(
            &mut self,
            _: &mut FramerSender,
            _: &[u8],
            _: &MessageContext,
            _: bool,
        ) -> Result<(), FramerError> {
            Err(FramerError::Failed("no".into()))
        }
        fn handle_received_data(&mut self, _: &mut ReceiveCursor) -> Result<(), FramerError> {
            Err(FramerError::Failed("bad header".into()))
        }
    }
    let mut chain = FramerChain::new(vec![Box::new(Refuse)]);
    let ctx = MessageContext::default();
    assert!(matches!(
        chain.push_inbound(b"x", false, &ctx),
        Err(FramerError::Failed(_))
    ));
    assert!(matches!(
        chain.frame_outbound(b"x", &ctx, true),
        Err(FramerError::Failed(_))
    ));
}

use std::collections::VecDeque;
use std::time::Duration;

use rand::Rng;

/// Bytes of a full-size packet, used to size the default queue.
pub const FULL_PACKET: u64 = 1500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    pub rate_bps: u64,
    pub prop_delay: Duration,
    /// Independent drop probability per packet, in `[0, 1]`.
    pub loss_rate: f64,
    pub queue_packets: usize,
}

impl LinkConfig {
    /// A lossless link whose drop-tail queue holds one bandwidth-delay
    /// product, taking the round trip as twice `prop_delay`.
    pub fn new(rate_bps: u64, prop_delay: Duration) -> Self {
        LinkConfig {
            rate_bps,
            prop_delay,
            loss_rate: 0.0,
            queue_packets: bdp_packets(rate_bps, prop_delay * 2),
        }
    }

    pub fn with_loss(mut self, loss_rate: f64) -> Self {
        self.loss_rate = loss_rate.clamp(0.0, 1.0);
        self
    }

    pub fn with_queue(mut self, packets: usize) -> Self {
        self.queue_packets = packets.max(1);
        self
    }

    pub fn serialization(&self, size: u32) -> Duration {
        let nanos = u128::from(size) * 8 * 1_000_000_000 / u128::from(self.rate_bps.max(1));
        Duration::from_nanos(nanos as u64)
    }
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig::new(100_000_000, Duration::from_millis(1))
    }
}

/// Bandwidth-delay product in full-size packets, rounded up.
pub fn bdp_packets(rate_bps: u64, rtt: Duration) -> usize {
    let bytes = u128::from(rate_bps) * rtt.as_nanos() / 8 / 1_000_000_000;
    (bytes.div_ceil(u128::from(FULL_PACKET)) as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transmit {
    Arrives(Duration),
    Dropped(DropReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Loss,
    QueueFull,
}

/// One direction of a link: FIFO drop-tail queue, fixed rate, fixed
/// propagation delay, random loss.
#[derive(Debug, Clone)]
pub struct SimLink {
    cfg: LinkConfig,
    busy_until: Duration,
    /// Departure times of packets queued or in service.
    in_system: VecDeque<Duration>,
}

impl SimLink {
    pub fn new(cfg: LinkConfig) -> Self {
        SimLink {
            cfg,
            busy_until: Duration::ZERO,
            in_system: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    /// Packets queued or in service at `now`.
    pub fn occupancy(&mut self, now: Duration) -> usize {
        while self.in_system.front().is_some_and(|&d| d <= now) {
            self.in_system.pop_front();
        }
        self.in_system.len()
    }

    pub fn transmit(&mut self, size: u32, now: Duration, rng: &mut impl Rng) -> Transmit {
        if self.cfg.loss_rate > 0.0 && rng.gen::<f64>() < self.cfg.loss_rate {
            return Transmit::Dropped(DropReason::Loss);
        }
        if self.occupancy(now) >= self.cfg.queue_packets {
            return Transmit::Dropped(DropReason::QueueFull);
        }
        let start = self.busy_until.max(now);
        let departure = start + self.cfg.serialization(size);
        self.busy_until = departure;
        self.in_system.push_back(departure);
        Transmit::Arrives(departure + self.cfg.prop_delay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn idle_link_arrival() {
        let mut link = SimLink::new(LinkConfig::new(5_000_000, Duration::from_millis(30)));
        let t = link.transmit(1500, Duration::ZERO, &mut rng());
        assert_eq!(t, Transmit::Arrives(Duration::from_micros(32_400)));
    }

    #[test]
    fn queueing_delay_accumulates() {
        let mut link = SimLink::new(LinkConfig::new(5_000_000, Duration::from_millis(30)));
        let mut r = rng();
        link.transmit(1500, Duration::ZERO, &mut r);
        let t = link.transmit(1500, Duration::ZERO, &mut r);
        assert_eq!(t, Transmit::Arrives(Duration::from_micros(34_800)));
    }

    #[test]
    fn total_loss() {
        let cfg = LinkConfig::new(5_000_000, Duration::from_millis(30)).with_loss(1.0);
        let mut link = SimLink::new(cfg);
        assert_eq!(
            link.transmit(1500, Duration::ZERO, &mut rng()),
            Transmit::Dropped(DropReason::Loss)
        );
    }

    #[test]
    fn drop_tail() {
        let cfg = LinkConfig::new(5_000_000, Duration::from_millis(30)).with_queue(2);
        let mut link = SimLink::new(cfg);
        let mut r = rng();
        assert!(matches!(
            link.transmit(1500, Duration::ZERO, &mut r),
            Transmit::Arrives(_)
        ));
        assert!(matches!(
            link.transmit(1500, Duration::ZERO, &mut r),
            Transmit::Arrives(_)
        ));
        assert_eq!(
            link.transmit(1500, Duration::ZERO, &mut r),
            Transmit::Dropped(DropReason::QueueFull)
        );
        // After the first packet departs there is room again.
        assert!(matches!(
            link.transmit(1500, Duration::from_micros(2_400), &mut r),
            Transmit::Arrives(_)
        ));
    }

    #[test]
    fn default_queue_is_one_bdp() {
        // 5 Mbit/s * 60 ms = 37500 bytes = 25 full packets.
        assert_eq!(LinkConfig::new(5_000_000, Duration::from_millis(30)).queue_packets, 25);
        assert_eq!(bdp_packets(5_000_000, Duration::from_millis(61)), 26);
    }
}

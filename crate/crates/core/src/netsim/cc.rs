/// Segment size used by the simulated transports.
pub const MSS: u32 = 1448;
pub const INITIAL_WINDOW: u32 = 10;
pub const MIN_WINDOW: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcState {
    SlowStart,
    Avoidance,
}

/// Slow start plus AIMD, counted in segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CongestionController {
    cwnd: u32,
    ssthresh: u32,
    state: CcState,
    /// Acked segments not yet turned into window growth in avoidance.
    acked_in_avoidance: u32,
}

impl Default for CongestionController {
    fn default() -> Self {
        CongestionController::new(INITIAL_WINDOW)
    }
}

impl CongestionController {
    pub fn new(initial_window: u32) -> Self {
        CongestionController {
            cwnd: initial_window.max(MIN_WINDOW),
            ssthresh: u32::MAX,
            state: CcState::SlowStart,
            acked_in_avoidance: 0,
        }
    }

    pub fn with_state(cwnd: u32, ssthresh: u32, state: CcState) -> Self {
        CongestionController {
            cwnd: cwnd.max(MIN_WINDOW),
            ssthresh: ssthresh.max(MIN_WINDOW),
            state,
            acked_in_avoidance: 0,
        }
    }

    pub fn cwnd(&self) -> u32 {
        self.cwnd
    }

    pub fn ssthresh(&self) -> u32 {
        self.ssthresh
    }

    pub fn state(&self) -> CcState {
        self.state
    }

    pub fn mss(&self) -> u32 {
        MSS
    }

    /// Slow start grows the window by one segment per acked segment;
    /// avoidance by one segment per window's worth of acks.
    pub fn on_ack(&mut self, acked_segments: u32) {
        for _ in 0..acked_segments {
            match self.state {
                CcState::SlowStart => {
                    self.cwnd = self.cwnd.saturating_add(1);
                    if self.cwnd >= self.ssthresh {
                        self.state = CcState::Avoidance;
                        self.acked_in_avoidance = 0;
                    }
                }
                CcState::Avoidance => {
                    self.acked_in_avoidance += 1;
                    if self.acked_in_avoidance >= self.cwnd {
                        self.acked_in_avoidance = 0;
                        self.cwnd = self.cwnd.saturating_add(1);
                    }
                }
            }
        }
    }

    pub fn on_loss(&mut self) {
        self.ssthresh = (self.cwnd / 2).max(MIN_WINDOW);
        self.cwnd = self.ssthresh;
        self.state = CcState::Avoidance;
        self.acked_in_avoidance = 0;
    }
}

//! Run clock: wall time for real execution, a discrete-event virtual clock
//! for simulated providers and benchmarks. Times are seconds since run
//! start either way, so traces are comparable.

use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Wall,
    Virtual,
}

#[derive(Debug)]
pub enum Clock {
    Wall { start: Instant },
    Virtual { now: f64 },
}

impl Clock {
    pub fn new(mode: ClockMode) -> Self {
        match mode {
            ClockMode::Wall => Clock::Wall { start: Instant::now() },
            ClockMode::Virtual => Clock::Virtual { now: 0.0 },
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual { .. })
    }

    pub fn now(&self) -> f64 {
        match self {
            Clock::Wall { start } => start.elapsed().as_secs_f64(),
            Clock::Virtual { now } => *now,
        }
    }

    /// Virtual time never runs backwards; advancing a wall clock is a bug.
    pub fn advance_to(&mut self, t: f64) {
        match self {
            Clock::Wall { .. } => panic!("cannot advance a wall clock"),
            Clock::Virtual { now } => {
                if t > *now {
                    *now = t;
                }
            }
        }
    }
}

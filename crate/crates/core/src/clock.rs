//! Timestamps and recurring local time-of-day.

use serde::{Deserialize, Serialize};

use crate::ValueError;

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const HALF_DAY_S: i64 = SECONDS_PER_DAY / 2;

/// UTC epoch seconds plus the local offset used for time-of-day derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    epoch_s: i64,
    tz_offset_min: i32,
}

impl Timestamp {
    pub fn new(epoch_s: i64, tz_offset_min: i32) -> Result<Self, ValueError> {
        if !(-840..=840).contains(&tz_offset_min) {
            return Err(ValueError::TzOffset(tz_offset_min));
        }
        Ok(Self { epoch_s, tz_offset_min })
    }

    pub fn utc(epoch_s: i64) -> Self {
        Self { epoch_s, tz_offset_min: 0 }
    }

    pub fn epoch_s(&self) -> i64 {
        self.epoch_s
    }

    pub fn tz_offset_min(&self) -> i32 {
        self.tz_offset_min
    }

    pub fn time_of_day(&self) -> TimeOfDay {
        time_of_day(*self)
    }

    /// Signed seconds elapsed from `earlier` to `self`.
    pub fn seconds_since(&self, earlier: Timestamp) -> i64 {
        self.epoch_s - earlier.epoch_s
    }
}

/// Seconds since local midnight, always in `[0, 86400)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(u32);

impl TimeOfDay {
    pub fn new(seconds: u32) -> Result<Self, ValueError> {
        if i64::from(seconds) >= SECONDS_PER_DAY {
            return Err(ValueError::TimeOfDay(seconds));
        }
        Ok(Self(seconds))
    }

    /// Wraps any signed second count onto the daily clock.
    pub fn wrapping(seconds: i64) -> Self {
        Self(seconds.rem_euclid(SECONDS_PER_DAY) as u32)
    }

    pub fn hms(h: u32, m: u32, s: u32) -> Result<Self, ValueError> {
        Self::new(h * 3600 + m * 60 + s)
    }

    pub fn seconds(&self) -> u32 {
        self.0
    }
}

pub fn time_of_day(t: Timestamp) -> TimeOfDay {
    TimeOfDay::wrapping(t.epoch_s + i64::from(t.tz_offset_min) * 60)
}

/// Shortest distance around the 24 h clock, in `[0, 43200]`.
pub fn circular_diff_s(a: TimeOfDay, b: TimeOfDay) -> u32 {
    let d = a.0.abs_diff(b.0);
    d.min(SECONDS_PER_DAY as u32 - d)
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ExclusionReason, Result};
use crate::ingest::actigraphy::MinuteIntensity;

const MINUTES_PER_DAY: i64 = 1440;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WearPolicy {
    /// Start of the excluded nightly window, minutes after local midnight.
    pub exclude_start: u32,
    /// End (exclusive) of the excluded window; may wrap past midnight.
    pub exclude_end: u32,
    pub required_days: u32,
    pub exclude_weekends: bool,
    /// Minimum covered minutes inside the allowed window for a day to qualify.
    pub min_day_minutes: u32,
    /// Offset of local clock from UTC, in minutes.
    pub utc_offset_minutes: i32,
}

impl Default for WearPolicy {
    fn default() -> Self {
        Self {
            exclude_start: 23 * 60,
            exclude_end: 5 * 60,
            required_days: 3,
            exclude_weekends: true,
            min_day_minutes: 600,
            utc_offset_minutes: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weekday {
    Mon,
    Tue,
    Wed,
    Thu,
    Fri,
    Sat,
    Sun,
}

impl Weekday {
    /// Weekday of a day count since 1970-01-01 (a Thursday).
    pub fn from_epoch_day(day: i64) -> Self {
        use Weekday::*;
        [Mon, Tue, Wed, Thu, Fri, Sat, Sun][(day + 3).rem_euclid(7) as usize]
    }

    pub fn is_weekend(self) -> bool {
        matches!(self, Weekday::Sat | Weekday::Sun)
    }
}

impl WearPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.exclude_start >= 1440 || self.exclude_end >= 1440 || self.exclude_start == self.exclude_end {
            return Err(Error::InvalidConfig(format!(
                "excluded window {}..{} is not a valid clock interval",
                self.exclude_start, self.exclude_end
            )));
        }
        if self.required_days == 0 {
            return Err(Error::InvalidConfig("required_days must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_excluded_clock(&self, minute_of_day: u32) -> bool {
        let (s, e) = (self.exclude_start, self.exclude_end);
        if s < e {
            (s..e).contains(&minute_of_day)
        } else {
            minute_of_day >= s || minute_of_day < e
        }
    }

    /// Allowed minutes-of-day in clock order starting after the excluded window.
    pub fn allowed_clock_minutes(&self) -> Vec<u32> {
        (0..1440).filter(|&m| !self.is_excluded_clock(m)).collect()
    }

    fn local(&self, utc_minute: i64) -> (i64, u32) {
        let local = utc_minute + self.utc_offset_minutes as i64;
        (local.div_euclid(MINUTES_PER_DAY), local.rem_euclid(MINUTES_PER_DAY) as u32)
    }

    pub fn local_clock(&self, utc_minute: i64) -> (Weekday, u32) {
        let (day, m) = self.local(utc_minute);
        (Weekday::from_epoch_day(day), m)
    }
}

/// Kept minutes in time order with their UTC minute stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct WornSeries {
    pub minutes: Vec<i64>,
    pub values: Vec<f64>,
}

/// Keeps the first run of `required_days` consecutive qualifying weekdays,
/// dropping the excluded nightly window. Gaps inside kept days become zeros.
pub fn apply_wear_policy(
    series: &[MinuteIntensity],
    policy: &WearPolicy,
) -> std::result::Result<WornSeries, ExclusionReason> {
    let allowed = policy.allowed_clock_minutes();
    let mut days: BTreeMap<i64, BTreeMap<u32, f64>> = BTreeMap::new();
    for s in series {
        let (day, clock) = policy.local(s.minute);
        if policy.is_excluded_clock(clock) {
            continue;
        }
        if policy.exclude_weekends && Weekday::from_epoch_day(day).is_weekend() {
            continue;
        }
        days.entry(day).or_default().insert(clock, s.intensity);
    }
    let qualifying: Vec<i64> = days
        .iter()
        .filter(|(_, m)| m.len() >= policy.min_day_minutes as usize)
        .map(|(&d, _)| d)
        .collect();

    let need = policy.required_days as usize;
    let mut run_start = 0;
    let mut chosen = None;
    for i in 0..qualifying.len() {
        if i > 0 && qualifying[i] != qualifying[i - 1] + 1 {
            run_start = i;
        }
        if i + 1 - run_start >= need {
            chosen = Some(&qualifying[run_start..run_start + need]);
            break;
        }
    }
    let chosen = chosen.ok_or(ExclusionReason::InsufficientConsecutiveDays)?;

    let mut out = WornSeries {
        minutes: Vec::with_capacity(need * allowed.len()),
        values: Vec::with_capacity(need * allowed.len()),
    };
    for &day in chosen {
        let covered = &days[&day];
        let base = day * MINUTES_PER_DAY - policy.utc_offset_minutes as i64;
        for &clock in &allowed {
            out.minutes.push(base + clock as i64);
            out.values.push(covered.get(&clock).copied().unwrap_or(0.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // 1970-01-05 is a Monday.
    const MONDAY: i64 = 4;

    fn full_days(days: &[i64]) -> Vec<MinuteIntensity> {
        days.iter()
            .flat_map(|&d| {
                (0..1440).map(move |m| MinuteIntensity {
                    minute: d * 1440 + m,
                    intensity: 1.0,
                })
            })
            .collect()
    }

    #[test]
    fn epoch_weekdays() {
        assert_eq!(Weekday::from_epoch_day(0), Weekday::Thu);
        assert_eq!(Weekday::from_epoch_day(MONDAY), Weekday::Mon);
        assert_eq!(Weekday::from_epoch_day(-1), Weekday::Wed);
    }

    #[test]
    fn three_full_weekdays_keep_eighteen_hours_each() {
        let s = full_days(&[MONDAY, MONDAY + 1, MONDAY + 2]);
        let w = apply_wear_policy(&s, &WearPolicy::default()).unwrap();
        assert_eq!(w.values.len(), 3 * 18 * 60);
        let p = WearPolicy::default();
        for &m in &w.minutes {
            let (day, clock) = p.local_clock(m);
            assert!(!day.is_weekend());
            assert!(!(clock >= 23 * 60 || clock < 5 * 60));
        }
    }

    #[test]
    fn weekend_only_is_excluded() {
        let s = full_days(&[MONDAY + 5, MONDAY + 6]);
        assert_eq!(
            apply_wear_policy(&s, &WearPolicy::default()),
            Err(ExclusionReason::InsufficientConsecutiveDays)
        );
    }

    #[test]
    fn non_consecutive_days_are_excluded() {
        let s = full_days(&[MONDAY, MONDAY + 1, MONDAY + 3]);
        assert_eq!(
            apply_wear_policy(&s, &WearPolicy::default()),
            Err(ExclusionReason::InsufficientConsecutiveDays)
        );
    }

    #[test]
    fn first_qualifying_run_is_chosen_and_gaps_zero_filled() {
        let mut s = full_days(&[MONDAY + 1, MONDAY + 2, MONDAY + 3, MONDAY + 4]);
        // knock out one allowed minute on the first kept day
        s.retain(|x| x.minute != (MONDAY + 1) * 1440 + 6 * 60);
        let w = apply_wear_policy(&s, &WearPolicy::default()).unwrap();
        assert_eq!(w.minutes[0], (MONDAY + 1) * 1440 + 5 * 60);
        assert_eq!(*w.minutes.last().unwrap(), (MONDAY + 3) * 1440 + 23 * 60 - 1);
        assert_eq!(w.values.iter().filter(|&&v| v == 0.0).count(), 1);
    }

    #[test]
    fn window_validation() {
        let mut p = WearPolicy::default();
        p.exclude_end = p.exclude_start;
        assert!(p.validate().is_err());
        p.exclude_end = 2000;
        assert!(p.validate().is_err());
        assert!(WearPolicy::default().validate().is_ok());
    }
}

//! Epidemiological week calendar (MMWR convention).
//!
//! Weeks run Sunday through Saturday and week 1 of a year is the week
//! containing January 4, matching the numbering used by SIVIGILA case
//! reports. Years have 52 or 53 weeks depending on where the Sundays fall.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Days, NaiveDate};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EpiWeek {
    year: i32,
    week: u8,
}

/// Sunday on or before January 4 of `year`: the first day of epi week 1.
fn first_week_start(year: i32) -> NaiveDate {
    let jan4 = NaiveDate::from_ymd_opt(year, 1, 4).expect("valid date");
    jan4 - Days::new(u64::from(jan4.weekday().num_days_from_sunday()))
}

impl EpiWeek {
    pub fn new(year: i32, week: u32) -> Result<Self> {
        let max = Self::weeks_in_year(year) as u32;
        if week == 0 || week > max {
            return Err(Error::InvalidEpiWeek {
                year,
                week,
                reason: format!("year {year} has {max} epi weeks"),
            });
        }
        Ok(EpiWeek { year, week: week as u8 })
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn week(&self) -> u8 {
        self.week
    }

    pub fn weeks_in_year(year: i32) -> u8 {
        let span = first_week_start(year + 1) - first_week_start(year);
        (span.num_days() / 7) as u8
    }

    /// Sunday that opens this week.
    pub fn start_date(&self) -> NaiveDate {
        first_week_start(self.year) + Days::new(7 * (self.week as u64 - 1))
    }

    /// Saturday that closes this week.
    pub fn end_date(&self) -> NaiveDate {
        self.start_date() + Days::new(6)
    }

    pub fn from_date(date: NaiveDate) -> Self {
        let mut year = date.year();
        if date >= first_week_start(year + 1) {
            year += 1;
        } else if date < first_week_start(year) {
            year -= 1;
        }
        let week = ((date - first_week_start(year)).num_days() / 7 + 1) as u8;
        EpiWeek { year, week }
    }

    pub fn succ(&self) -> Self {
        if self.week < Self::weeks_in_year(self.year) {
            EpiWeek { year: self.year, week: self.week + 1 }
        } else {
            EpiWeek { year: self.year + 1, week: 1 }
        }
    }

    /// Inclusive iterator from `self` through `last`.
    pub fn range_through(self, last: EpiWeek) -> impl Iterator<Item = EpiWeek> {
        let mut cur = self;
        let mut done = self > last;
        std::iter::from_fn(move || {
            if done {
                return None;
            }
            let out = cur;
            done = cur == last;
            cur = cur.succ();
            Some(out)
        })
    }
}

impl fmt::Display for EpiWeek {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-W{:02}", self.year, self.week)
    }
}

impl FromStr for EpiWeek {
    type Err = Error;

    /// Parses the `YYYY-Www` form, e.g. `2016-W05`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidEpiWeek {
            year: 0,
            week: 0,
            reason: format!("cannot parse `{s}` as YYYY-Www"),
        };
        let (y, w) = s.split_once("-W").ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let week: u32 = w.parse().map_err(|_| bad())?;
        EpiWeek::new(year, week)
    }
}

impl Serialize for EpiWeek {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EpiWeek {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn week_one_contains_january_fourth() {
        for year in 1990..2030 {
            let start = EpiWeek::new(year, 1).unwrap().start_date();
            let jan4 = NaiveDate::from_ymd_opt(year, 1, 4).unwrap();
            assert!(start <= jan4 && jan4 <= start + Days::new(6), "year {year}");
            assert_eq!(start.weekday(), chrono::Weekday::Sun);
        }
    }

    #[test]
    fn known_calendar_facts() {
        // MMWR 2014 ran 53 weeks, opening 2013-12-29; 2016 ran 52, opening 2016-01-03.
        assert_eq!(EpiWeek::weeks_in_year(2014), 53);
        assert_eq!(
            EpiWeek::new(2014, 1).unwrap().start_date(),
            NaiveDate::from_ymd_opt(2013, 12, 29).unwrap()
        );
        assert_eq!(EpiWeek::weeks_in_year(2016), 52);
        assert_eq!(
            EpiWeek::new(2016, 1).unwrap().start_date(),
            NaiveDate::from_ymd_opt(2016, 1, 3).unwrap()
        );
    }

    #[test]
    fn successor_rolls_over_year_boundaries() {
        let w = EpiWeek::new(2014, 53).unwrap();
        assert_eq!(w.succ(), EpiWeek::new(2015, 1).unwrap());
        let w = EpiWeek::new(2016, 52).unwrap();
        assert_eq!(w.succ(), EpiWeek::new(2017, 1).unwrap());
    }

    #[test]
    fn date_round_trip() {
        let mut d = NaiveDate::from_ymd_opt(2013, 6, 1).unwrap();
        let end = NaiveDate::from_ymd_opt(2019, 6, 1).unwrap();
        while d < end {
            let w = EpiWeek::from_date(d);
            assert!(w.start_date() <= d && d <= w.end_date(), "{d}");
            d = d + Days::new(1);
        }
    }

    #[test]
    fn early_january_may_belong_to_previous_year() {
        let w = EpiWeek::from_date(NaiveDate::from_ymd_opt(2015, 1, 1).unwrap());
        assert_eq!(w, EpiWeek::new(2014, 53).unwrap());
    }

    #[test]
    fn rejects_out_of_range_weeks() {
        assert!(EpiWeek::new(2016, 53).is_err());
        assert!(EpiWeek::new(2014, 53).is_ok());
        assert!(EpiWeek::new(2016, 0).is_err());
    }

    #[test]
    fn parses_and_formats() {
        let w: EpiWeek = "2016-W05".parse().unwrap();
        assert_eq!(w, EpiWeek::new(2016, 5).unwrap());
        assert_eq!(w.to_string(), "2016-W05");
        assert!("2016W05".parse::<EpiWeek>().is_err());
    }
}

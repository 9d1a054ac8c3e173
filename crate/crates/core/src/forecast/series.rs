use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::ForecastError;

pub const SLOTS_PER_DAY: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    Demand,
    Pv,
}

impl Channel {
    pub const ALL: [Channel; 2] = [Channel::Demand, Channel::Pv];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Demand => "demand",
            Channel::Pv => "pv",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Channel::Demand => 0,
            Channel::Pv => 1,
        }
    }
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Channel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "demand" => Ok(Channel::Demand),
            "pv" => Ok(Channel::Pv),
            _ => Err(format!("unknown channel `{s}` (expected demand or pv)")),
        }
    }
}

/// Half-hourly demand and PV per prosumer on a common daily calendar.
/// Missing readings are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    pub start: NaiveDate,
    pub days: usize,
    pub prosumers: Vec<u32>,
    /// `demand[p][day * 48 + slot]` in kW
    pub demand: Vec<Vec<f64>>,
    pub pv: Vec<Vec<f64>>,
}

impl SeriesFrame {
    pub fn new(start: NaiveDate, days: usize, prosumers: Vec<u32>) -> Self {
        let n = prosumers.len();
        Self {
            start,
            days,
            prosumers,
            demand: vec![vec![f64::NAN; days * SLOTS_PER_DAY]; n],
            pv: vec![vec![f64::NAN; days * SLOTS_PER_DAY]; n],
        }
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + Duration::days(day as i64)
    }

    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        let d = (date - self.start).num_days();
        (d >= 0 && (d as usize) < self.days).then_some(d as usize)
    }

    pub fn prosumer_index(&self, id: u32) -> Option<usize> {
        self.prosumers.iter().position(|&p| p == id)
    }

    pub fn channel(&self, c: Channel) -> &[Vec<f64>] {
        match c {
            Channel::Demand => &self.demand,
            Channel::Pv => &self.pv,
        }
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut [Vec<f64>] {
        match c {
            Channel::Demand => &mut self.demand,
            Channel::Pv => &mut self.pv,
        }
    }

    pub fn day_profile(&self, c: Channel, prosumer: usize, day: usize) -> &[f64] {
        &self.channel(c)[prosumer][day * SLOTS_PER_DAY..(day + 1) * SLOTS_PER_DAY]
    }

    pub fn is_day_complete(&self, day: usize) -> bool {
        (0..self.prosumers.len()).all(|p| {
            Channel::ALL
                .iter()
                .all(|&c| self.day_profile(c, p, day).iter().all(|v| v.is_finite()))
        })
    }

    pub fn incomplete_days(&self) -> Vec<NaiveDate> {
        (0..self.days)
            .filter(|&d| !self.is_day_complete(d))
            .map(|d| self.date(d))
            .collect()
    }

    /// Parse `prosumer_id,timestamp_iso8601,demand_kw,pv_kw`.
    pub fn read_csv(reader: impl Read) -> Result<Self, ForecastError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["prosumer_id", "timestamp_iso8601", "demand_kw", "pv_kw"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(ForecastError::Schema(format!(
                "expected header {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows: BTreeMap<u32, Vec<(NaiveDateTime, f64, f64)>> = BTreeMap::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let id: u32 = field(0).parse().map_err(|_| {
                ForecastError::Schema(format!("line {line}: bad prosumer_id `{}`", field(0)))
            })?;
            let ts = parse_timestamp(field(1)).ok_or_else(|| {
                ForecastError::Schema(format!("line {line}: bad timestamp `{}`", field(1)))
            })?;
            let num = |i: usize, name: &str| -> Result<f64, ForecastError> {
                let s = field(i);
                if s.is_empty() {
                    return Ok(f64::NAN);
                }
                let v: f64 = s.parse().map_err(|_| {
                    ForecastError::Schema(format!("line {line}: bad {name} `{s}`"))
                })?;
                if v < 0.0 {
                    return Err(ForecastError::Schema(format!("line {line}: negative {name} {v}")));
                }
                Ok(v)
            };
            rows.entry(id)
                .or_default()
                .push((ts, num(2, "demand_kw")?, num(3, "pv_kw")?));
        }
        if rows.is_empty() {
            return Err(ForecastError::Schema("series file has no rows".into()));
        }
        let mut first: Option<NaiveDate> = None;
        let mut last: Option<NaiveDate> = None;
        for (id, r) in &rows {
            for w in r.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(ForecastError::Schema(format!(
                        "prosumer {id}: timestamps not strictly increasing at {}",
                        w[1].0
                    )));
                }
            }
            let (a, b) = (r[0].0.date(), r[r.len() - 1].0.date());
            first = Some(first.map_or(a, |f| f.min(a)));
            last = Some(last.map_or(b, |l| l.max(b)));
        }
        let (start, end) = (first.unwrap(), last.unwrap());
        let days = (end - start).num_days() as usize + 1;
        let mut frame = SeriesFrame::new(start, days, rows.keys().copied().collect());
        for (p, (id, r)) in rows.into_iter().enumerate() {
            for (ts, d, pv) in r {
                let (h, m) = (ts.hour() as usize, ts.minute() as usize);
                if m % 30 != 0 || ts.second() != 0 {
                    return Err(ForecastError::Schema(format!(
                        "prosumer {id}: timestamp {ts} is not on the 30-minute grid"
                    )));
                }
                let idx = frame.day_index(ts.date()).expect("within span") * SLOTS_PER_DAY
                    + h * 2
                    + m / 30;
                frame.demand[p][idx] = d;
                frame.pv[p][idx] = pv;
            }
        }
        Ok(frame)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<(), ForecastError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["prosumer_id", "timestamp_iso8601", "demand_kw", "pv_kw"])?;
        for (p, id) in self.prosumers.iter().enumerate() {
            for day in 0..self.days {
                let date = self.date(day);
                for slot in 0..SLOTS_PER_DAY {
                    let i = day * SLOTS_PER_DAY + slot;
                    let (d, pv) = (self.demand[p][i], self.pv[p][i]);
                    if d.is_nan() && pv.is_nan() {
                        continue;
                    }
                    let ts = date
                        .and_hms_opt((slot / 2) as u32, (slot % 2 * 30) as u32, 0)
                        .expect("valid slot time");
                    let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v}") };
                    w.write_record([
                        id.to_string(),
                        ts.format("%Y-%m-%dT%H:%M:%S").to_string(),
                        fmt(d),
                        fmt(pv),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| ForecastError::Io(e.to_string()))?;
        Ok(())
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Day of week with Monday = 0.
pub fn weekday_index(date: NaiveDate) -> u32 {
    date.weekday().num_days_from_monday()
}

/// 1-based day within the meteorological season, seasons starting on
/// 1 March, 1 June, 1 September and 1 December.
pub fn day_of_season(date: NaiveDate) -> u32 {
    let (y, m) = (date.year(), date.month());
    let start = match m {
        3..=5 => NaiveDate::from_ymd_opt(y, 3, 1),
        6..=8 => NaiveDate::from_ymd_opt(y, 6, 1),
        9..=11 => NaiveDate::from_ymd_opt(y, 9, 1),
        12 => NaiveDate::from_ymd_opt(y, 12, 1),
        _ => NaiveDate::from_ymd_opt(y - 1, 12, 1),
    }
    .expect("valid season start");
    (date - start).num_days() as u32 + 1
}

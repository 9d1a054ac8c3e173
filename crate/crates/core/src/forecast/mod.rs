//! Demand/PV time series, dataset horizons, condition vectors, point
//! forecasts and residuals.

mod point;
mod series;

pub use point::{fit_point_model, PointForecaster, PointModel, RidgeChannel};
pub use series::{day_of_season, weekday_index, Channel, SeriesFrame, SLOTS_PER_DAY};

use chrono::{Months, NaiveDate};
use serde::{Deserialize, Serialize};

pub const LAGS: [usize; 6] = [1, 2, 3, 7, 14, 21];
pub const CONDITION_DIM: usize = LAGS.len() * SLOTS_PER_DAY + 2;

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error("series schema: {0}")]
    Schema(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(String),
    #[error("incomplete days: {}", format_dates(.0))]
    IncompleteDays(Vec<NaiveDate>),
    #[error("series spans {days} days from {start}; two full years are required")]
    TooShort { start: NaiveDate, days: usize },
    #[error("missing lag day {0} for the condition vector")]
    MissingLag(NaiveDate),
    #[error("unknown prosumer {0}")]
    UnknownProsumer(u32),
    #[error("date {0} outside the series")]
    DateOutOfRange(NaiveDate),
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("{0}")]
    Fit(String),
}

fn format_dates(d: &[NaiveDate]) -> String {
    const SHOW: usize = 20;
    let mut s: Vec<String> = d.iter().take(SHOW).map(|d| d.to_string()).collect();
    if d.len() > SHOW {
        s.push(format!("... ({} total)", d.len()));
    }
    s.join(", ")
}

/// Disjoint day-index sets of the three forecasting horizons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub t1: Vec<usize>,
    pub t2: Vec<usize>,
    pub t3: Vec<usize>,
}

pub const T3_DAYS_OF_MONTH: [u32; 3] = [7, 14, 28];

/// First year of the frame is T1; in the second year the 7th, 14th and 28th
/// of every month form T3 and the rest T2. Days beyond two years are left out.
pub fn split_dataset(frame: &SeriesFrame) -> Result<DatasetSplit, ForecastError> {
    use chrono::Datelike;
    let year1 = frame.start + Months::new(12);
    let year2 = frame.start + Months::new(24);
    let end1 = (year1 - frame.start).num_days() as usize;
    let end2 = (year2 - frame.start).num_days() as usize;
    if frame.days < end2 {
        return Err(ForecastError::TooShort {
            start: frame.start,
            days: frame.days,
        });
    }
    let incomplete: Vec<NaiveDate> = (0..end2)
        .filter(|&d| !frame.is_day_complete(d))
        .map(|d| frame.date(d))
        .collect();
    if !incomplete.is_empty() {
        return Err(ForecastError::IncompleteDays(incomplete));
    }
    let t1 = (0..end1).collect();
    let (mut t2, mut t3) = (Vec::new(), Vec::new());
    for d in end1..end2 {
        if T3_DAYS_OF_MONTH.contains(&frame.date(d).day()) {
            t3.push(d);
        } else {
            t2.push(d);
        }
    }
    Ok(DatasetSplit { t1, t2, t3 })
}

/// Per-(prosumer, channel) min-max extrema, frozen on the training horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub prosumers: Vec<u32>,
    /// `extrema[p][channel] = (min, max)`
    pub extrema: Vec<[(f64, f64); 2]>,
}

impl Normalizer {
    pub fn fit(frame: &SeriesFrame, days: &[usize]) -> Self {
        let extrema = (0..frame.prosumers.len())
            .map(|p| {
                let mut e = [(f64::INFINITY, f64::NEG_INFINITY); 2];
                for c in Channel::ALL {
                    for &d in days {
                        for &v in frame.day_profile(c, p, d) {
                            if v.is_finite() {
                                let (lo, hi) = &mut e[c.index()];
                                *lo = lo.min(v);
                                *hi = hi.max(v);
                            }
                        }
                    }
                    if !e[c.index()].0.is_finite() {
                        e[c.index()] = (0.0, 0.0);
                    }
                }
                e
            })
            .collect();
        Self {
            prosumers: frame.prosumers.clone(),
            extrema,
        }
    }

    pub fn range(&self, prosumer: usize, c: Channel) -> (f64, f64) {
        self.extrema[prosumer][c.index()]
    }

    /// Scale of the channel (max - min), or 0 for a constant channel.
    pub fn span(&self, prosumer: usize, c: Channel) -> f64 {
        let (lo, hi) = self.range(prosumer, c);
        hi - lo
    }

    pub fn normalize(&self, prosumer: usize, c: Channel, v: f64) -> f64 {
        let (lo, hi) = self.range(prosumer, c);
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn denormalize(&self, prosumer: usize, c: Channel, u: f64) -> f64 {
        let (lo, hi) = self.range(prosumer, c);
        lo + u * (hi - lo)
    }
}

/// The 290-dimensional conditioning input for one (prosumer, day, channel):
/// six normalized lag-day profiles, then the day-of-week and day-of-season
/// codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub prosumer: u32,
    pub channel: Channel,
    pub date: NaiveDate,
    pub values: Vec<f64>,
}

pub fn build_condition_vector(
    frame: &SeriesFrame,
    norm: &Normalizer,
    prosumer: u32,
    date: NaiveDate,
    channel: Channel,
) -> Result<ConditionVector, ForecastError> {
    let p = frame
        .prosumer_index(prosumer)
        .ok_or(ForecastError::UnknownProsumer(prosumer))?;
    let day = frame.day_index(date).ok_or(ForecastError::DateOutOfRange(date))?;
    let mut values = Vec::with_capacity(CONDITION_DIM);
    for lag in LAGS {
        let lag_date = date - chrono::Duration::days(lag as i64);
        if day < lag {
            return Err(ForecastError::MissingLag(lag_date));
        }
        let prof = frame.day_profile(channel, p, day - lag);
        if prof.iter().any(|v| !v.is_finite()) {
            return Err(ForecastError::MissingLag(lag_date));
        }
        values.extend(prof.iter().map(|&v| norm.normalize(p, channel, v)));
    }
    values.push(weekday_index(date) as f64 / 6.0);
    values.push(day_of_season(date) as f64 / 92.0);
    Ok(ConditionVector {
        prosumer,
        channel,
        date,
        values,
    })
}

/// Elementwise `actual - predicted`.
pub fn compute_residuals(actual: &[f64], predicted: &[f64]) -> Result<Vec<f64>, ForecastError> {
    if actual.len() != predicted.len() {
        return Err(ForecastError::Shape {
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    Ok(actual.iter().zip(predicted).map(|(a, p)| a - p).collect())
}

/// One day of residuals with the forecast it was computed against.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDay {
    pub prosumer: u32,
    pub channel: Channel,
    pub date: NaiveDate,
    pub predicted: Vec<f64>,
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualFrame {
    pub days: Vec<ResidualDay>,
}

impl ResidualFrame {
    /// Residuals of `model` on `days` for every prosumer and channel.
    pub fn compute(
        frame: &SeriesFrame,
        model: &dyn PointForecaster,
        norm: &Normalizer,
        days: &[usize],
    ) -> Result<Self, ForecastError> {
        let mut out = Vec::new();
        for &d in days {
            let date = frame.date(d);
            for (p, &id) in frame.prosumers.iter().enumerate() {
                for c in Channel::ALL {
                    let cond = build_condition_vector(frame, norm, id, date, c)?;
                    let predicted = model.predict(&cond);
                    let residual = compute_residuals(frame.day_profile(c, p, d), &predicted)?;
                    out.push(ResidualDay {
                        prosumer: id,
                        channel: c,
                        date,
                        predicted,
                        residual,
                    });
                }
            }
        }
        Ok(Self { days: out })
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> Result<(), ForecastError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["prosumer_id", "channel", "date", "slot", "predicted_kw", "residual_kw"])?;
        for r in &self.days {
            for t in 0..r.residual.len() {
                wr.write_record([
                    r.prosumer.to_string(),
                    r.channel.to_string(),
                    r.date.to_string(),
                    t.to_string(),
                    format!("{}", r.predicted[t]),
                    format!("{}", r.residual[t]),
                ])?;
            }
        }
        wr.flush().map_err(|e| ForecastError::Io(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv(r: impl std::io::Read) -> Result<Self, ForecastError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut days: Vec<ResidualDay> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| ForecastError::Schema(format!("residual line {}: bad {what}", k + 2));
            let prosumer: u32 = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("prosumer_id"))?;
            let channel: Channel = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("channel"))?;
            let date: NaiveDate = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("date"))?;
            let slot: usize = rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("slot"))?;
            let pred: f64 = rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(|| bad("predicted_kw"))?;
            let res: f64 = rec.get(5).and_then(|s| s.parse().ok()).ok_or_else(|| bad("residual_kw"))?;
            let same = days
                .last()
                .is_some_and(|d| d.prosumer == prosumer && d.channel == channel && d.date == date);
            if !same {
                if slot != 0 {
                    return Err(bad("slot order"));
                }
                days.push(ResidualDay {
                    prosumer,
                    channel,
                    date,
                    predicted: Vec::with_capacity(SLOTS_PER_DAY),
                    residual: Vec::with_capacity(SLOTS_PER_DAY),
                });
            }
            let d = days.last_mut().expect("pushed");
            if slot != d.residual.len() {
                return Err(bad("slot order"));
            }
            d.predicted.push(pred);
            d.residual.push(res);
        }
        Ok(Self { days })
    }
}

/// Slots where the prosumer's PV never exceeded zero over `days`.
pub fn pv_night_mask(frame: &SeriesFrame, prosumer: usize, days: &[usize]) -> Vec<bool> {
    (0..SLOTS_PER_DAY)
        .map(|t| {
            days.iter()
                .all(|&d| frame.day_profile(Channel::Pv, prosumer, d)[t] <= 0.0)
        })
        .collect()
}

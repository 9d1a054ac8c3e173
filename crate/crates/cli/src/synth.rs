//! Synthetic half-hourly demand and rooftop PV for prosumers `1..=P`.
//!
//! With `h` the slot-midpoint hour, `y` the day of year and `w = 2π/365.25`:
//!
//! demand = b_p · (1 + 0.25 cos(w(y − 196))) · (1 + 0.12 · weekend)
//!        + a_p · (0.5 g(h; 7.5, 1.2) + 1.2 g(h; 19, 2.0)) + ε_t,
//!   g(h; m, s) = exp(−((h − m)/s)²), ε an AR(1) over slots (φ = 0.6) with
//!   per-slot std 0.04 + 0.18 g(h; 19, 2.5)   (evening-peaked), floor 0.05 kW.
//!
//! pv = c_p · (0.75 + 0.25 cos(w(y − 355))) · bell(h) · k_d · (1 + 0.15 η_t),
//!   bell(h) = sin(π (h − rise)/L)^1.5 inside daylight and 0 outside,
//!   L = 12 + 2.5 cos(w(y − 355)) hours centred on 12:00, k_d a daily cloud
//!   factor (logistic of a shared AR(1) weather state plus a per-prosumer
//!   offset), η_t white noise drawn only in daylight; clamped to [0, c_p].

use chrono::{Datelike, NaiveDate, Weekday};
use gridflex::forecast::{SeriesFrame, SLOTS_PER_DAY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct SynthParams {
    pub seed: u64,
    pub years: u32,
    pub prosumers: usize,
    pub start: NaiveDate,
}

/// Readings are stored to 0.1 W so the CSV stays compact and round-trips.
fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn bump(h: f64, m: f64, s: f64) -> f64 {
    (-((h - m) / s).powi(2)).exp()
}

fn seasonal(day_of_year: f64, peak: f64) -> f64 {
    (2.0 * std::f64::consts::PI * (day_of_year - peak) / 365.25).cos()
}

/// Clear-sky shape at hour `h`, zero outside daylight.
fn pv_bell(h: f64, day_of_year: f64) -> f64 {
    let len = 12.0 + 2.5 * seasonal(day_of_year, 355.0);
    let rise = 12.0 - len / 2.0;
    let x = (h - rise) / len;
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        (std::f64::consts::PI * x).sin().powf(1.5)
    }
}

pub fn generate(params: &SynthParams) -> SeriesFrame {
    let end = params.start + chrono::Months::new(12 * params.years);
    let days = (end - params.start).num_days() as usize;
    let ids: Vec<u32> = (1..=params.prosumers as u32).collect();
    let mut frame = SeriesFrame::new(params.start, days, ids);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let gauss = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);

    struct Household {
        base: f64,
        peak: f64,
        cap: f64,
        cloud_offset: f64,
    }
    let homes: Vec<Household> = (0..params.prosumers)
        .map(|_| Household {
            base: rng.random_range(0.3..0.7),
            peak: rng.random_range(0.6..1.4),
            cap: rng.random_range(3.0..6.0),
            cloud_offset: 0.3 * gauss(&mut rng),
        })
        .collect();

    let mut weather = 0.0;
    for d in 0..days {
        let date = frame.date(d);
        let doy = date.ordinal() as f64;
        let weekend = matches!(date.weekday(), Weekday::Sat | Weekday::Sun);
        weather = 0.7 * weather + 0.7 * gauss(&mut rng);
        for (p, home) in homes.iter().enumerate() {
            let cloud = 1.0 / (1.0 + (-(1.2 + weather + home.cloud_offset)).exp());
            let mut eps = 0.0;
            for t in 0..SLOTS_PER_DAY {
                let h = (t as f64 + 0.5) / 2.0;
                let level = home.base * (1.0 + 0.25 * seasonal(doy, 196.0)) * if weekend { 1.12 } else { 1.0 };
                let shape = home.peak * (0.5 * bump(h, 7.5, 1.2) + 1.2 * bump(h, 19.0, 2.0));
                eps = 0.6 * eps + 0.8 * (0.04 + 0.18 * bump(h, 19.0, 2.5)) * gauss(&mut rng);
                let demand = (level + shape + eps).max(0.05);

                let bell = pv_bell(h, doy);
                let pv = if bell > 0.0 {
                    let noise = 1.0 + 0.15 * gauss(&mut rng);
                    let s = 0.75 + 0.25 * seasonal(doy, 355.0);
                    (home.cap * s * bell * cloud * noise).clamp(0.0, home.cap)
                } else {
                    0.0
                };
                let i = d * SLOTS_PER_DAY + t;
                frame.demand[p][i] = round4(demand);
                frame.pv[p][i] = round4(pv);
            }
        }
    }
    frame
}

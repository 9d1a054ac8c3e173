//! Operating envelopes for radial distribution networks under probabilistic
//! demand and solar forecasts.

pub mod ccopf;
pub mod cgan;
pub mod forecast;
pub mod metrics;
pub mod netmodel;

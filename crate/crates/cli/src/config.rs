use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use gridflex::ccopf::{BinaryStrategy, ChanceLevels, OpfConfig};
use gridflex::cgan::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};

/// Invalid or inconsistent run configuration (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed; stage seeds are fixed offsets from it.
    pub seed: u64,
    pub paths: Paths,
    pub synthgen: SynthSection,
    pub forecast: ForecastSection,
    pub cgan: CganSection,
    pub scenarios: ScenarioSection,
    pub opf: OpfSection,
    pub horizon: HorizonSection,
    pub validation: ValidationSection,
    pub tariff: Tariff,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Network JSON; the bundled 25-prosumer feeder when absent.
    pub network: Option<PathBuf>,
    /// Series CSV; generated into the run directory when absent.
    pub series: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub years: u32,
    pub prosumers: usize,
    pub start: NaiveDate,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            years: 2,
            prosumers: 25,
            start: NaiveDate::from_ymd_opt(2010, 7, 1).expect("date"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub ridge_alpha: f64,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self { ridge_alpha: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CganSection {
    pub noise_dim: usize,
    pub hidden_generator: usize,
    pub hidden_critic: usize,
    pub iterations: usize,
    pub critic_steps_per_gen: usize,
    pub batch_size: usize,
    pub gp_weight: f64,
    pub mode: Mode,
    pub clip_bound: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for CganSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            noise_dim: t.noise_dim,
            hidden_generator: t.hidden_generator,
            hidden_critic: t.hidden_critic,
            iterations: t.iterations,
            critic_steps_per_gen: t.critic_steps_per_gen,
            batch_size: t.batch_size,
            gp_weight: t.gp_weight,
            mode: t.mode,
            clip_bound: t.clip_bound,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
        }
    }
}

impl CganSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            noise_dim: self.noise_dim,
            hidden_generator: self.hidden_generator,
            hidden_critic: self.hidden_critic,
            iterations: self.iterations,
            critic_steps_per_gen: self.critic_steps_per_gen,
            batch_size: self.batch_size,
            gp_weight: self.gp_weight,
            mode: self.mode,
            clip_bound: self.clip_bound,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Scenarios per (day, prosumer, channel).
    pub n: usize,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self { n: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpfSection {
    pub xi_v: f64,
    pub xi_l: f64,
    pub xi_p: f64,
    pub export_cap_kw: f64,
    pub dt_hours: f64,
    pub fairness_tiebreak: f64,
    pub loss_weight: f64,
    /// `round-and-fix`, `relaxed` or `enumerate`.
    pub binary_strategy: String,
}

impl Default for OpfSection {
    fn default() -> Self {
        let l = ChanceLevels::default();
        let o = OpfConfig::default();
        Self {
            xi_v: l.xi_v,
            xi_l: l.xi_l,
            xi_p: l.xi_p,
            export_cap_kw: o.export_cap_kw,
            dt_hours: o.dt_hours,
            fairness_tiebreak: o.fairness_tiebreak,
            loss_weight: o.loss_weight,
            binary_strategy: "round-and-fix".into(),
        }
    }
}

impl OpfSection {
    pub fn levels(&self) -> ChanceLevels {
        ChanceLevels {
            xi_v: self.xi_v,
            xi_l: self.xi_l,
            xi_p: self.xi_p,
        }
    }

    pub fn opf_config(&self) -> OpfConfig {
        OpfConfig {
            export_cap_kw: self.export_cap_kw,
            dt_hours: self.dt_hours,
            fairness_tiebreak: self.fairness_tiebreak,
            loss_weight: self.loss_weight,
            ..OpfConfig::default()
        }
    }

    pub fn strategy(&self) -> BinaryStrategy {
        self.binary_strategy.parse().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonSection {
    /// First envelope day; the first T3 days when absent.
    pub start: Option<NaiveDate>,
    pub days: usize,
}

impl Default for HorizonSection {
    fn default() -> Self {
        Self { start: None, days: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSection {
    pub draws: usize,
}

impl Default for ValidationSection {
    fn default() -> Self {
        Self { draws: 10_000 }
    }
}

/// Informational tariff, carried into the manifest verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tariff {
    pub tou: Vec<TouBand>,
    pub fit_c_per_kwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TouBand {
    pub start_hour: u32,
    pub end_hour: u32,
    pub c_per_kwh: f64,
}

impl Default for Tariff {
    fn default() -> Self {
        let band = |start_hour, end_hour, c_per_kwh| TouBand {
            start_hour,
            end_hour,
            c_per_kwh,
        };
        Self {
            tou: vec![
                band(0, 7, 15.96),
                band(7, 15, 25.96),
                band(15, 21, 57.76),
                band(21, 22, 25.96),
                band(22, 24, 15.96),
            ],
            fit_c_per_kwh: 9.0,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            synthgen: SynthSection::default(),
            forecast: ForecastSection::default(),
            cgan: CganSection::default(),
            scenarios: ScenarioSection::default(),
            opf: OpfSection::default(),
            horizon: HorizonSection::default(),
            validation: ValidationSection::default(),
            tariff: Tariff::default(),
        }
    }
}

/// Stage seeds derived from the base seed.
pub struct Seeds {
    pub synthgen: u64,
    pub cgan: u64,
    pub scenarios: u64,
    pub validation: u64,
}

impl RunConfig {
    /// Parse a TOML document; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        for p in [&mut cfg.paths.network, &mut cfg.paths.series].into_iter().flatten() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            synthgen: self.seed,
            cgan: self.seed.wrapping_add(1),
            scenarios: self.seed.wrapping_add(2),
            validation: self.seed.wrapping_add(3),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for p in [&self.paths.network, &self.paths.series].into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("file {} does not exist", p.display()));
            }
        }
        if self.synthgen.years < 2 {
            return bad("synthgen.years must be >= 2");
        }
        if self.synthgen.prosumers == 0 {
            return bad("synthgen.prosumers must be >= 1");
        }
        if !(self.forecast.ridge_alpha >= 0.0) {
            return bad("forecast.ridge_alpha must be >= 0");
        }
        self.cgan
            .train_config(0)
            .validate()
            .map_err(|e| ConfigError(format!("cgan: {e}")))?;
        if self.scenarios.n < 2 {
            return bad("scenarios.n must be >= 2 to fit a standard deviation");
        }
        self.opf.levels().validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.opf.binary_strategy.parse::<BinaryStrategy>().is_err() {
            return bad(format!(
                "opf.binary_strategy `{}` is not one of round-and-fix, relaxed, enumerate",
                self.opf.binary_strategy
            ));
        }
        if !(self.opf.export_cap_kw >= 0.0) || !(self.opf.dt_hours > 0.0) {
            return bad("opf.export_cap_kw must be >= 0 and opf.dt_hours > 0");
        }
        if self.horizon.days == 0 {
            return bad("horizon.days must be >= 1");
        }
        if self.validation.draws < 1000 {
            return bad("validation.draws must be >= 1000");
        }
        let mut hour = 0;
        for b in &self.tariff.tou {
            if b.start_hour != hour || b.end_hour <= b.start_hour {
                return bad("tariff.tou bands must partition 0..24 h in order");
            }
            hour = b.end_hour;
        }
        if hour != 24 {
            return bad("tariff.tou bands must end at 24 h");
        }
        Ok(())
    }

    /// Canonical JSON rendering, the input of the configuration hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

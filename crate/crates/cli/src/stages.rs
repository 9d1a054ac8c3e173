use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use conic::InteriorPoint;
use gridflex::ccopf::{
    assemble_problem, build_margins, extract_envelopes, monte_carlo_validate, solve, verify_relaxation,
    EnvelopeSchedule, NodeForecast, UncertaintySpec, ViolationSummary,
};
use gridflex::cgan::{self, Cgan, TrainingSet, CHECKPOINT_VERSION};
use gridflex::forecast::{
    build_condition_vector, fit_point_model, pv_night_mask, split_dataset, Channel, DatasetSplit, Normalizer,
    PointForecaster, PointModel, ResidualFrame, SeriesFrame, SLOTS_PER_DAY,
};
use gridflex::metrics::{fit_gaussian, score_day, GaussianProfile};
use gridflex::netmodel::Network;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::synth::{self, SynthParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synthgen,
    Split,
    FitPoint,
    Residuals,
    TrainCgan,
    Sample,
    FitGauss,
    SolveEnvelopes,
    Validate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synthgen,
        Stage::Split,
        Stage::FitPoint,
        Stage::Residuals,
        Stage::TrainCgan,
        Stage::Sample,
        Stage::FitGauss,
        Stage::SolveEnvelopes,
        Stage::Validate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synthgen => "synthgen",
            Stage::Split => "split",
            Stage::FitPoint => "fit-point",
            Stage::Residuals => "residuals",
            Stage::TrainCgan => "train-cgan",
            Stage::Sample => "sample",
            Stage::FitGauss => "fit-gauss",
            Stage::SolveEnvelopes => "solve-envelopes",
            Stage::Validate => "validate",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {cause:#}")]
pub struct StageFailure {
    pub stage: &'static str,
    pub cause: anyhow::Error,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub name: &'static str,
    pub seconds: f64,
    pub cached: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<&'static str, u64>,
    pub versions: BTreeMap<&'static str, String>,
    pub horizon: Vec<NaiveDate>,
    pub stages: Vec<StageRecord>,
    pub outputs: BTreeMap<String, String>,
    pub tariff: crate::config::Tariff,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("missing input {}", path.display())
    })?))
}

/// Seed of the scenario set for one (day, prosumer, channel); independent of
/// which other days are sampled in the same run.
fn scenario_seed(base: u64, day: usize, prosumer: usize, c: Channel) -> u64 {
    let cell = ((day as u64) << 20) | ((prosumer as u64) << 1) | c.index() as u64;
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(cell)
}

pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub records: Vec<StageRecord>,
    pub outputs: BTreeMap<String, String>,
    frame: OnceCell<SeriesFrame>,
    network: OnceCell<Network>,
}

impl Run {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(out.join(".cache")).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            out,
            records: Vec::new(),
            outputs: BTreeMap::new(),
            frame: OnceCell::new(),
            network: OnceCell::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn series_path(&self) -> PathBuf {
        self.cfg.paths.series.clone().unwrap_or_else(|| self.path("series.csv"))
    }

    fn frame(&self) -> Result<&SeriesFrame> {
        if let Some(f) = self.frame.get() {
            return Ok(f);
        }
        let f = SeriesFrame::read_csv(open(&self.series_path())?)?;
        Ok(self.frame.get_or_init(|| f))
    }

    fn network(&self) -> Result<&Network> {
        if let Some(n) = self.network.get() {
            return Ok(n);
        }
        let n = match &self.cfg.paths.network {
            Some(p) => Network::from_path(p)?,
            None => Network::bundled(),
        };
        Ok(self.network.get_or_init(|| n))
    }

    fn network_digest(&self) -> Result<String> {
        match &self.cfg.paths.network {
            Some(p) => file_digest(p),
            None => Ok(sha256_hex(Network::bundled().to_json_string().as_bytes())),
        }
    }

    fn split(&self) -> Result<DatasetSplit> {
        Ok(serde_json::from_reader(open(&self.path("split.json"))?)?)
    }

    fn point_model(&self) -> Result<PointModel> {
        Ok(serde_json::from_reader(open(&self.path("point_model.json"))?)?)
    }

    fn cgan(&self, c: Channel) -> Result<Cgan> {
        let path = self.path(&format!("cgan_{}.json", c.name()));
        let text = std::fs::read_to_string(&path).with_context(|| format!("missing input {}", path.display()))?;
        Ok(Cgan::from_json(&text)?)
    }

    /// Envelope days: `horizon.days` consecutive days from `horizon.start`,
    /// by default the first T3 day.
    pub fn horizon(&self) -> Result<Vec<usize>> {
        let frame = self.frame()?;
        let start = match self.cfg.horizon.start {
            Some(d) => frame
                .day_index(d)
                .ok_or_else(|| anyhow!("horizon start {d} is outside the series"))?,
            None => *self.split()?.t3.first().ok_or_else(|| anyhow!("T3 is empty"))?,
        };
        let days: Vec<usize> = (start..start + self.cfg.horizon.days).collect();
        if let Some(&last) = days.last() {
            if last >= frame.days {
                bail!("horizon runs past the end of the series ({})", frame.date(frame.days - 1));
            }
        }
        Ok(days)
    }

    /// Run one stage unless its cache entry matches the current inputs and
    /// every recorded output is intact.
    fn stage(
        &mut self,
        stage: Stage,
        fragment: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[&str],
        body: impl FnOnce(&Self) -> Result<()>,
    ) -> Result<(), StageFailure> {
        let fail = |cause: anyhow::Error| StageFailure {
            stage: stage.name(),
            cause,
        };
        let started = Instant::now();
        let mut digests = BTreeMap::new();
        for p in inputs {
            digests.insert(p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()), file_digest(p).map_err(fail)?);
        }
        if stage >= Stage::SolveEnvelopes {
            digests.insert("network".into(), self.network_digest().map_err(fail)?);
        }
        let key = sha256_hex(
            json!({ "stage": stage.name(), "config": fragment, "inputs": digests })
                .to_string()
                .as_bytes(),
        );
        let cache_path = self.out.join(".cache").join(format!("{}.json", stage.name()));
        let hit = std::fs::read_to_string(&cache_path)
            .ok()
            .and_then(|s| serde_json::from_str::<CacheEntry>(&s).ok())
            .filter(|e| e.key == key)
            .filter(|e| {
                outputs.iter().all(|o| {
                    e.outputs.get(*o).is_some_and(|d| file_digest(&self.path(o)).ok().as_ref() == Some(d))
                })
            });
        let (produced, cached) = match hit {
            Some(e) => {
                log::info!("{}: up to date", stage.name());
                (e.outputs, true)
            }
            None => {
                log::info!("{}: running", stage.name());
                body(self).map_err(fail)?;
                let mut produced = BTreeMap::new();
                for o in outputs {
                    produced.insert(o.to_string(), file_digest(&self.path(o)).map_err(fail)?);
                }
                let entry = serde_json::to_string_pretty(&CacheEntry {
                    key,
                    outputs: produced.clone(),
                })
                .expect("cache entry serializes");
                std::fs::write(&cache_path, entry)
                    .with_context(|| format!("writing {}", cache_path.display()))
                    .map_err(fail)?;
                (produced, false)
            }
        };
        self.outputs.extend(produced);
        self.records.push(StageRecord {
            name: stage.name(),
            seconds: started.elapsed().as_secs_f64(),
            cached,
        });
        Ok(())
    }

    /// Execute every stage up to and including `last`.
    pub fn run_until(&mut self, last: Stage) -> Result<(), StageFailure> {
        for s in Stage::ALL.into_iter().filter(|&s| s <= last) {
            self.run_stage(s)?;
        }
        Ok(())
    }

    fn run_stage(&mut self, s: Stage) -> Result<(), StageFailure> {
        let seeds = self.cfg.seeds();
        let series = self.series_path();
        let p = |n: &str| self.path(n);
        match s {
            Stage::Synthgen => {
                if self.cfg.paths.series.is_some() {
                    return Ok(());
                }
                let frag = json!({ "seed": seeds.synthgen, "synthgen": self.cfg.synthgen });
                self.stage(s, frag, &[], &["series.csv"], |r| r.write_synthetic(&r.path("series.csv")))
            }
            Stage::Split => self.stage(s, json!({}), &[series], &["split.json"], Run::do_split),
            Stage::FitPoint => {
                let frag = json!(self.cfg.forecast);
                self.stage(s, frag, &[series, p("split.json")], &["point_model.json"], Run::do_fit_point)
            }
            Stage::Residuals => self.stage(
                s,
                json!({}),
                &[series, p("split.json"), p("point_model.json")],
                &["residuals_t2.csv", "residuals_t3.csv"],
                Run::do_residuals,
            ),
            Stage::TrainCgan => {
                let frag = json!({ "seed": seeds.cgan, "cgan": self.cfg.cgan });
                self.stage(
                    s,
                    frag,
                    &[series, p("point_model.json"), p("residuals_t2.csv")],
                    &["cgan_demand.json", "cgan_pv.json", "loss_demand.csv", "loss_pv.csv"],
                    Run::do_train,
                )
            }
            Stage::Sample => {
                let frag = json!({ "seed": seeds.scenarios, "n": self.cfg.scenarios.n, "horizon": self.cfg.horizon });
                self.stage(
                    s,
                    frag,
                    &[series, p("split.json"), p("point_model.json"), p("cgan_demand.json"), p("cgan_pv.json")],
                    &["scenarios.csv"],
                    Run::do_sample,
                )
            }
            Stage::FitGauss => self.stage(
                s,
                json!({}),
                &[series, p("point_model.json"), p("scenarios.csv")],
                &["gaussians.csv"],
                Run::do_fit_gauss,
            ),
            Stage::SolveEnvelopes => {
                let frag = json!(self.cfg.opf);
                self.stage(
                    s,
                    frag,
                    &[p("gaussians.csv")],
                    &["envelopes.csv", "dispatch.csv", "flows.csv", "solver_log.csv"],
                    Run::do_solve,
                )
            }
            Stage::Validate => {
                let frag = json!({ "seed": seeds.validation, "draws": self.cfg.validation.draws });
                self.stage(
                    s,
                    frag,
                    &[p("gaussians.csv"), p("dispatch.csv")],
                    &["validation.csv", "validation_summary.json"],
                    Run::do_validate,
                )
            }
            Stage::Evaluate => {
                let frag = json!({ "seed": seeds.scenarios, "n": self.cfg.scenarios.n });
                self.stage(
                    s,
                    frag,
                    &[series, p("split.json"), p("point_model.json"), p("cgan_demand.json"), p("cgan_pv.json")],
                    &["evaluation.csv", "evaluation_summary.json"],
                    Run::do_evaluate,
                )
            }
        }
    }

    pub fn write_synthetic(&self, path: &Path) -> Result<()> {
        let frame = synth::generate(&SynthParams {
            seed: self.cfg.seeds().synthgen,
            years: self.cfg.synthgen.years,
            prosumers: self.cfg.synthgen.prosumers,
            start: self.cfg.synthgen.start,
        });
        frame.write_csv(create(path)?)?;
        Ok(())
    }

    fn do_split(&self) -> Result<()> {
        let split = split_dataset(self.frame()?)?;
        log::info!("split: T1 {} days, T2 {}, T3 {}", split.t1.len(), split.t2.len(), split.t3.len());
        write_json(&self.path("split.json"), &split)
    }

    fn do_fit_point(&self) -> Result<()> {
        let frame = self.frame()?;
        let split = self.split()?;
        let norm = Normalizer::fit(frame, &split.t1);
        let model = fit_point_model(frame, &norm, &split.t1, self.cfg.forecast.ridge_alpha)?;
        log::info!(
            "fit-point: in-sample MAE demand {:.4} kW, pv {:.4} kW",
            model.in_sample_mae[0],
            model.in_sample_mae[1]
        );
        write_json(&self.path("point_model.json"), &model)
    }

    fn do_residuals(&self) -> Result<()> {
        let frame = self.frame()?;
        let split = self.split()?;
        let model = self.point_model()?;
        for (days, name) in [(&split.t2, "residuals_t2.csv"), (&split.t3, "residuals_t3.csv")] {
            let res = ResidualFrame::compute(frame, &model, &model.normalizer, days)?;
            res.write_csv(create(&self.path(name))?)?;
        }
        Ok(())
    }

    /// One generator per channel, trained on T2 residuals scaled by the
    /// prosumer's T1 range.
    fn do_train(&self) -> Result<()> {
        let frame = self.frame()?;
        let model = self.point_model()?;
        let norm = &model.normalizer;
        let res = ResidualFrame::read_csv(open(&self.path("residuals_t2.csv"))?)?;
        for c in Channel::ALL {
            let mut set = TrainingSet {
                samples: Vec::new(),
                conditions: Vec::new(),
            };
            for day in res.days.iter().filter(|d| d.channel == c) {
                let p = frame
                    .prosumer_index(day.prosumer)
                    .ok_or_else(|| anyhow!("unknown prosumer {}", day.prosumer))?;
                let span = norm.span(p, c);
                set.samples.push(day.residual.iter().map(|r| r / span).collect());
                set.conditions
                    .push(build_condition_vector(frame, norm, day.prosumer, day.date, c)?.values);
            }
            let tc = self.cfg.cgan.train_config(self.cfg.seeds().cgan.wrapping_add(c.index() as u64));
            let every = (tc.iterations / 10).max(1);
            let (gan, history) = cgan::train_with_callback(&set, &tc, |r| {
                if (r.iteration + 1) % every == 0 {
                    log::info!(
                        "train-cgan {c}: iteration {} L_G {:.4} L_D {:.4} GP {:.4}",
                        r.iteration + 1,
                        r.l_g,
                        r.l_d,
                        r.gp
                    );
                }
            })?;
            std::fs::write(self.path(&format!("cgan_{}.json", c.name())), gan.to_json())?;
            cgan::write_loss_csv(&history, create(&self.path(&format!("loss_{}.csv", c.name())))?)?;
        }
        Ok(())
    }

    /// Residual scenarios in kW for one (day, prosumer, channel); PV
    /// residuals are zero in slots that never produced during T1.
    fn scenarios_for(
        &self,
        gan: &Cgan,
        model: &PointModel,
        night: &[bool],
        day: usize,
        p: usize,
        c: Channel,
    ) -> Result<Vec<Vec<f64>>> {
        let frame = self.frame()?;
        let id = frame.prosumers[p];
        let cond = build_condition_vector(frame, &model.normalizer, id, frame.date(day), c)?;
        let seed = scenario_seed(self.cfg.seeds().scenarios, day, p, c);
        let set = cgan::sample_scenarios(&gan.generator, gan.noise_dim, &cond.values, self.cfg.scenarios.n, seed)?;
        let span = model.normalizer.span(p, c);
        Ok(set
            .scenarios
            .into_iter()
            .map(|s| {
                s.iter()
                    .enumerate()
                    .map(|(t, v)| if c == Channel::Pv && night[t] { 0.0 } else { v * span })
                    .collect()
            })
            .collect())
    }

    fn night_masks(&self) -> Result<Vec<Vec<bool>>> {
        let frame = self.frame()?;
        let t1 = self.split()?.t1;
        Ok((0..frame.prosumers.len()).map(|p| pv_night_mask(frame, p, &t1)).collect())
    }

    fn do_sample(&self) -> Result<()> {
        let frame = self.frame()?;
        let model = self.point_model()?;
        let gans = [self.cgan(Channel::Demand)?, self.cgan(Channel::Pv)?];
        let night = self.night_masks()?;
        let mut w = csv::Writer::from_writer(create(&self.path("scenarios.csv"))?);
        let mut header = vec!["prosumer_id".to_string(), "date".into(), "channel".into(), "scenario".into()];
        header.extend((0..SLOTS_PER_DAY).map(|t| format!("s{t}")));
        w.write_record(&header)?;
        for day in self.horizon()? {
            for (p, id) in frame.prosumers.iter().enumerate() {
                for c in Channel::ALL {
                    let sc = self.scenarios_for(&gans[c.index()], &model, &night[p], day, p, c)?;
                    for (j, s) in sc.iter().enumerate() {
                        let mut rec = vec![id.to_string(), frame.date(day).to_string(), c.to_string(), j.to_string()];
                        rec.extend(s.iter().map(|v| format!("{v:?}")));
                        w.write_record(&rec)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    fn do_fit_gauss(&self) -> Result<()> {
        let frame = self.frame()?;
        let model = self.point_model()?;
        let scen = read_scenarios(&self.path("scenarios.csv"))?;
        let mut w = csv::Writer::from_writer(create(&self.path("gaussians.csv"))?);
        w.write_record(GAUSS_HEADER)?;
        for ((id, date, c), rows) in &scen {
            let p = frame.prosumer_index(*id).ok_or_else(|| anyhow!("unknown prosumer {id}"))?;
            let day = frame.day_index(*date).ok_or_else(|| anyhow!("date {date} outside the series"))?;
            let cond = build_condition_vector(frame, &model.normalizer, *id, *date, *c)?;
            let point = model.predict(&cond);
            let g = fit_gaussian(rows, &point)?;
            let actual = frame.day_profile(*c, p, day);
            for t in 0..SLOTS_PER_DAY {
                w.write_record([
                    id.to_string(),
                    date.to_string(),
                    c.to_string(),
                    t.to_string(),
                    format!("{:?}", actual[t]),
                    format!("{:?}", point[t]),
                    format!("{:?}", g.mu[t]),
                    format!("{:?}", g.sigma[t]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn do_solve(&self) -> Result<()> {
        let net = self.network()?;
        let gauss = read_gaussians(&self.path("gaussians.csv"))?;
        let sens = net.path_sensitivities()?;
        let levels = self.cfg.opf.levels();
        let opf = self.cfg.opf.opf_config();
        let backend = InteriorPoint::new(opf.solver.clone());
        let tree = net.tree()?;

        let mut env_w = csv::Writer::from_writer(create(&self.path("envelopes.csv"))?);
        env_w.write_record(EnvelopeSchedule::csv_header())?;
        let mut disp_w = csv::Writer::from_writer(create(&self.path("dispatch.csv"))?);
        disp_w.write_record(DISPATCH_HEADER)?;
        let mut flow_w = csv::Writer::from_writer(create(&self.path("flows.csv"))?);
        flow_w.write_record(["from", "to", "slot", "p_kw", "q_kvar", "current_sq_pu", "v_to_pu"])?;
        let mut log_w = csv::Writer::from_writer(create(&self.path("solver_log.csv"))?);
        log_w.write_record([
            "date",
            "status",
            "objective_kw",
            "solves",
            "iterations",
            "primal_residual",
            "dual_residual",
            "gap",
            "max_relaxation_residual",
            "ac_voltage_mismatch",
            "seconds",
        ])?;

        for (i, (date, nodes)) in gauss.iter().enumerate() {
            let started = Instant::now();
            let forecasts: Vec<NodeForecast> = net
                .prosumer_buses()
                .iter()
                .map(|&b| {
                    let id = net.buses[b].id;
                    nodes
                        .get(&id)
                        .cloned()
                        .ok_or_else(|| anyhow!("no forecast for prosumer bus {id} on {date}"))
                })
                .collect::<Result<_>>()?;
            let unc = UncertaintySpec::from_forecasts(&forecasts);
            let margins = build_margins(net, &unc, &sens, &levels)?;
            let problem = assemble_problem(net, &forecasts, &margins, &opf)?;
            let sol = solve(&problem, &backend, self.cfg.opf.strategy())?;
            if !sol.is_optimal() {
                let hint = sol.hint.map_or(String::new(), |h| format!(" ({h:?})"));
                bail!("{date}: solver returned {}{hint}", sol.status);
            }
            let rel = verify_relaxation(&sol, &problem);
            if !rel.is_exact() {
                log::warn!("{date}: relaxation inexact, max residual {:.3e}", rel.max_residual);
            }
            let env = extract_envelopes(&sol, &problem)?;
            let offset = i * SLOTS_PER_DAY;
            env.write_csv(&mut env_w, offset)?;
            for (k, id) in env.bus_ids.iter().enumerate() {
                for t in 0..env.slots() {
                    disp_w.write_record([
                        id.to_string(),
                        (offset + t).to_string(),
                        format!("{:?}", env.export_kw[k][t]),
                        format!("{:?}", env.reactive_kvar[k][t]),
                        format!("{:?}", env.pv_kw[k][t]),
                        format!("{:?}", env.charge_kw[k][t]),
                        format!("{:?}", env.discharge_kw[k][t]),
                        format!("{:?}", env.soc_kwh[k][t]),
                        format!("{:?}", forecasts[k].demand.mu[t]),
                    ])?;
                }
            }
            let lay = &problem.layout;
            for t in 0..lay.slots {
                for (l, line) in net.lines.iter().enumerate() {
                    let child = tree.line_child[l];
                    let v = lay.v(t, child).map_or(net.slack_v, |c| sol.x[c]);
                    flow_w.write_record([
                        line.from.to_string(),
                        line.to.to_string(),
                        (offset + t).to_string(),
                        format!("{:.6}", net.pu_to_kw(sol.x[lay.p(t, l)])),
                        format!("{:.6}", net.pu_to_kw(sol.x[lay.q(t, l)])),
                        format!("{:.9}", sol.x[lay.ell(t, l)]),
                        format!("{:.6}", v.max(0.0).sqrt()),
                    ])?;
                }
            }
            log_w.write_record([
                date.to_string(),
                sol.status.to_string(),
                format!("{:.6}", net.pu_to_kw(sol.objective)),
                sol.solves.to_string(),
                sol.iterations.to_string(),
                format!("{:.3e}", sol.pres),
                format!("{:.3e}", sol.dres),
                format!("{:.3e}", sol.gap),
                format!("{:.3e}", rel.max_residual),
                format!("{:.3e}", rel.ac_voltage_mismatch),
                // Wall time varies between runs; the digest covers the rest.
                String::new(),
            ])?;
            log::info!(
                "solve-envelopes {date}: objective {:.3} kW in {} solves, {:.1} s",
                net.pu_to_kw(sol.objective),
                sol.solves,
                started.elapsed().as_secs_f64()
            );
        }
        for w in [&mut env_w, &mut disp_w, &mut flow_w, &mut log_w] {
            w.flush()?;
        }
        Ok(())
    }

    fn do_validate(&self) -> Result<()> {
        let net = self.network()?;
        let gauss = read_gaussians(&self.path("gaussians.csv"))?;
        let schedules = read_dispatch(&self.path("dispatch.csv"), gauss.len())?;
        let mut w = csv::Writer::from_writer(create(&self.path("validation.csv"))?);
        w.write_record(["constraint", "slot", "violation_rate", "ci_halfwidth"])?;
        let mut per_day = Vec::new();
        let mut overall: Option<ViolationSummary> = None;
        for (i, ((date, nodes), env)) in gauss.iter().zip(&schedules).enumerate() {
            let forecasts: Vec<NodeForecast> = env
                .bus_ids
                .iter()
                .map(|id| nodes.get(id).cloned().ok_or_else(|| anyhow!("no forecast for {id} on {date}")))
                .collect::<Result<_>>()?;
            let unc = UncertaintySpec::from_forecasts(&forecasts);
            let seed = self.cfg.seeds().validation.wrapping_add(i as u64);
            let mc = monte_carlo_validate(net, env, &unc, self.cfg.validation.draws, seed)?;
            mc.append_csv(&mut w, i * SLOTS_PER_DAY)?;
            per_day.push(json!({
                "date": date,
                "max_rate": mc.max_rate(),
                "max_rate_v_max": mc.max_rate_of("v_max"),
                "max_rate_v_min": mc.max_rate_of("v_min"),
                "max_rate_s_max": mc.max_rate_of("s_max"),
                "divergences": mc.divergences.iter().sum::<usize>(),
            }));
            log::info!("validate {date}: max violation rate {:.4}", mc.max_rate());
            if overall.as_ref().is_none_or(|o| mc.max_rate() > o.max_rate()) {
                overall = Some(mc);
            }
        }
        w.flush()?;
        let summary = json!({
            "draws": self.cfg.validation.draws,
            "xi_v": self.cfg.opf.xi_v,
            "xi_l": self.cfg.opf.xi_l,
            "max_rate": overall.map_or(0.0, |o| o.max_rate()),
            "days": per_day,
        });
        write_json(&self.path("validation_summary.json"), &summary)
    }

    /// CRPS and pinball losses of the scenario ensembles (point forecast plus
    /// residual scenario, floored at zero) on every T3 day.
    fn do_evaluate(&self) -> Result<()> {
        let frame = self.frame()?;
        let split = self.split()?;
        let model = self.point_model()?;
        let gans = [self.cgan(Channel::Demand)?, self.cgan(Channel::Pv)?];
        let night = self.night_masks()?;
        let mut w = csv::Writer::from_writer(create(&self.path("evaluation.csv"))?);
        w.write_record(["prosumer_id", "date", "channel", "crps_kw", "pl_q10_kw", "pl_q50_kw", "pl_q90_kw"])?;
        let mut totals = [[0.0f64; 4]; 2];
        let mut count = [0usize; 2];
        for &day in &split.t3 {
            for (p, id) in frame.prosumers.iter().enumerate() {
                for c in Channel::ALL {
                    let cond = build_condition_vector(frame, &model.normalizer, *id, frame.date(day), c)?;
                    let point = model.predict(&cond);
                    let ensemble: Vec<Vec<f64>> = self
                        .scenarios_for(&gans[c.index()], &model, &night[p], day, p, c)?
                        .into_iter()
                        .map(|s| s.iter().zip(&point).map(|(r, f)| (f + r).max(0.0)).collect())
                        .collect();
                    let scores = score_day(&ensemble, frame.day_profile(c, p, day))?;
                    let n = scores.len() as f64;
                    let mean = [
                        scores.iter().map(|s| s.crps).sum::<f64>() / n,
                        scores.iter().map(|s| s.pl_q10).sum::<f64>() / n,
                        scores.iter().map(|s| s.pl_q50).sum::<f64>() / n,
                        scores.iter().map(|s| s.pl_q90).sum::<f64>() / n,
                    ];
                    for (a, m) in totals[c.index()].iter_mut().zip(mean) {
                        *a += m;
                    }
                    count[c.index()] += 1;
                    let mut rec = vec![id.to_string(), frame.date(day).to_string(), c.to_string()];
                    rec.extend(mean.iter().map(|m| format!("{m:.6}")));
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        let summary: BTreeMap<&str, serde_json::Value> = Channel::ALL
            .iter()
            .map(|c| {
                let n = count[c.index()].max(1) as f64;
                let t = totals[c.index()];
                (
                    c.name(),
                    json!({
                        "crps_kw": t[0] / n,
                        "pl_q10_kw": t[1] / n,
                        "pl_q50_kw": t[2] / n,
                        "pl_q90_kw": t[3] / n,
                        "days": count[c.index()],
                    }),
                )
            })
            .collect();
        write_json(&self.path("evaluation_summary.json"), &summary)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let seeds = self.cfg.seeds();
        let horizon = if self.out.join("split.json").exists() || self.cfg.horizon.start.is_some() {
            let frame = self.frame()?;
            self.horizon()?.into_iter().map(|d| frame.date(d)).collect()
        } else {
            Vec::new()
        };
        Ok(RunManifest {
            config_hash: sha256_hex(self.cfg.canonical_json().as_bytes()),
            config: serde_json::to_value(&self.cfg)?,
            seeds: BTreeMap::from([
                ("base", self.cfg.seed),
                ("synthgen", seeds.synthgen),
                ("cgan", seeds.cgan),
                ("scenarios", seeds.scenarios),
                ("validation", seeds.validation),
            ]),
            versions: BTreeMap::from([
                ("gridflex", env!("CARGO_PKG_VERSION").to_string()),
                ("cgan_checkpoint", CHECKPOINT_VERSION.to_string()),
            ]),
            horizon,
            stages: self.records.clone(),
            outputs: self.outputs.clone(),
            tariff: self.cfg.tariff.clone(),
        })
    }

    pub fn write_manifest(&self) -> Result<RunManifest> {
        let m = self.manifest()?;
        write_json(&self.path("manifest.json"), &m)?;
        Ok(m)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub const GAUSS_HEADER: [&str; 8] = [
    "prosumer_id",
    "date",
    "channel",
    "slot",
    "actual_kw",
    "point_kw",
    "mu_kw",
    "sigma_kw",
];

pub const DISPATCH_HEADER: [&str; 9] = [
    "prosumer_id",
    "slot",
    "export_limit_kw",
    "reactive_kvar",
    "pv_kw",
    "charge_kw",
    "discharge_kw",
    "soc_kwh",
    "demand_mu_kw",
];

type ScenarioKey = (u32, NaiveDate, Channel);

/// Scenario rows grouped by (prosumer, date, channel), in file order.
pub fn read_scenarios(path: &Path) -> Result<Vec<(ScenarioKey, Vec<Vec<f64>>)>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out: Vec<(ScenarioKey, Vec<Vec<f64>>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let key: ScenarioKey = (rec[0].parse()?, rec[1].parse()?, rec[2].parse().map_err(|e: String| anyhow!(e))?);
        let vals: Vec<f64> = rec.iter().skip(4).map(str::parse).collect::<Result<_, _>>()?;
        if vals.len() != SLOTS_PER_DAY {
            bail!("scenario row with {} slots", vals.len());
        }
        match out.last_mut() {
            Some((k, rows)) if *k == key => rows.push(vals),
            _ => out.push((key, vec![vals])),
        }
    }
    Ok(out)
}

/// Per-date forecasts keyed by prosumer id, dates ascending.
pub fn read_gaussians(path: &Path) -> Result<Vec<(NaiveDate, BTreeMap<u32, NodeForecast>)>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut by_date: BTreeMap<NaiveDate, BTreeMap<u32, NodeForecast>> = BTreeMap::new();
    let empty = || GaussianProfile {
        mu: Vec::new(),
        sigma: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let id: u32 = rec[0].parse()?;
        let date: NaiveDate = rec[1].parse()?;
        let c: Channel = rec[2].parse().map_err(|e: String| anyhow!(e))?;
        let node = by_date.entry(date).or_default().entry(id).or_insert_with(|| NodeForecast {
            bus_id: id,
            demand: empty(),
            pv: empty(),
        });
        let prof = match c {
            Channel::Demand => &mut node.demand,
            Channel::Pv => &mut node.pv,
        };
        prof.mu.push(rec[6].parse()?);
        prof.sigma.push(rec[7].parse()?);
    }
    Ok(by_date.into_iter().collect())
}

/// Rebuild the per-day schedules from `dispatch.csv`.
fn read_dispatch(path: &Path, days: usize) -> Result<Vec<EnvelopeSchedule>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut rows: BTreeMap<u32, Vec<[f64; 6]>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id: u32 = rec[0].parse()?;
        let slot: usize = rec[1].parse()?;
        let v: Vec<f64> = (2..8).map(|i| rec[i].parse()).collect::<Result<_, _>>()?;
        let r = rows.entry(id).or_default();
        if slot != r.len() {
            bail!("dispatch.csv: slots of prosumer {id} out of order");
        }
        r.push([v[0], v[1], v[2], v[3], v[4], v[5]]);
    }
    let bus_ids: Vec<u32> = rows.keys().copied().collect();
    (0..days)
        .map(|d| {
            let span = d * SLOTS_PER_DAY..(d + 1) * SLOTS_PER_DAY;
            let col = |i: usize| -> Result<Vec<Vec<f64>>> {
                rows.values()
                    .map(|r| {
                        r.get(span.clone())
                            .map(|s| s.iter().map(|x| x[i]).collect())
                            .ok_or_else(|| anyhow!("dispatch.csv is missing day {d}"))
                    })
                    .collect()
            };
            let export_kw = col(0)?;
            let gamma_kw = (0..SLOTS_PER_DAY)
                .map(|t| export_kw.iter().map(|e| e[t]).fold(f64::INFINITY, f64::min))
                .collect();
            Ok(EnvelopeSchedule {
                bus_ids: bus_ids.clone(),
                export_kw,
                gamma_kw,
                reactive_kvar: col(1)?,
                pv_kw: col(2)?,
                charge_kw: col(3)?,
                discharge_kw: col(4)?,
                soc_kwh: col(5)?,
            })
        })
        .collect()
}

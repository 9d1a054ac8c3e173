//! CSV data behind the loss, scenario, Gaussian-fit and weekly envelope
//! figures of a completed run. Nothing is rendered.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use gridflex::forecast::{Channel, SLOTS_PER_DAY};

use crate::stages::read_scenarios;

fn reader(dir: &Path, name: &str) -> Result<csv::Reader<File>> {
    let path = dir.join(name);
    csv::Reader::from_path(&path).with_context(|| format!("missing stage output {}", path.display()))
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<File>> {
    let path = dir.join(name);
    csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))
}

/// Writes `plots/fig{3,4,5,7}_*.csv` under `run`; returns the file names.
pub fn plot_data(run: &Path) -> Result<Vec<String>> {
    let dir = run.join("plots");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();

    // Loss curves: channel,iteration,L_G,L_D,GP
    let mut w = writer(&dir, "fig3_losses.csv")?;
    w.write_record(["channel", "iteration", "L_G", "L_D", "GP"])?;
    for c in Channel::ALL {
        let mut r = reader(run, &format!("loss_{}.csv", c.name()))?;
        for rec in r.records() {
            let rec = rec?;
            let mut row = vec![c.name()];
            row.extend(rec.iter());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    written.push("fig3_losses.csv".to_string());

    // Actual, point and mean/std per slot for every (prosumer, date, channel).
    let mut gauss: BTreeMap<(String, String, String), Vec<[String; 4]>> = BTreeMap::new();
    for rec in reader(run, "gaussians.csv")?.records() {
        let rec = rec?;
        gauss
            .entry((rec[0].to_string(), rec[1].to_string(), rec[2].to_string()))
            .or_default()
            .push([rec[4].to_string(), rec[5].to_string(), rec[6].to_string(), rec[7].to_string()]);
    }
    let scen = read_scenarios(&run.join("scenarios.csv"))?;
    let (first_id, first_date, _) = scen.first().map(|(k, _)| *k).ok_or_else(|| anyhow!("scenarios.csv is empty"))?;

    // Scenarios against the realized day for the first prosumer and date.
    let mut w = writer(&dir, "fig4_scenarios.csv")?;
    w.write_record(["channel", "prosumer_id", "date", "slot", "actual_kw", "point_kw", "scenario", "scenario_kw"])?;
    for ((id, date, c), rows) in scen.iter().filter(|((i, d, _), _)| *i == first_id && *d == first_date) {
        let g = &gauss[&(id.to_string(), date.to_string(), c.to_string())];
        let point: Vec<f64> = g.iter().map(|r| r[1].parse()).collect::<Result<_, _>>()?;
        for (j, s) in rows.iter().enumerate() {
            for t in 0..SLOTS_PER_DAY {
                w.write_record([
                    c.to_string(),
                    id.to_string(),
                    date.to_string(),
                    t.to_string(),
                    g[t][0].clone(),
                    g[t][1].clone(),
                    j.to_string(),
                    format!("{:.6}", point[t] + s[t]),
                ])?;
            }
        }
    }
    w.flush()?;
    written.push("fig4_scenarios.csv".to_string());

    // Per-slot Gaussian fit for the same prosumer and date.
    let mut w = writer(&dir, "fig5_gaussian.csv")?;
    w.write_record(["channel", "slot", "actual_kw", "mu_kw", "sigma_kw"])?;
    for c in Channel::ALL {
        let g = &gauss[&(first_id.to_string(), first_date.to_string(), c.to_string())];
        for (t, r) in g.iter().enumerate() {
            w.write_record([c.to_string(), t.to_string(), r[0].clone(), r[2].clone(), r[3].clone()])?;
        }
    }
    w.flush()?;
    written.push("fig5_gaussian.csv".to_string());

    // Envelopes per prosumer and slot, with day and hour of day.
    let mut w = writer(&dir, "fig7_envelopes.csv")?;
    w.write_record(["prosumer_id", "slot", "day", "hour", "export_limit_kw"])?;
    for rec in reader(run, "envelopes.csv")?.records() {
        let rec = rec?;
        let slot: usize = rec[1].parse()?;
        w.write_record([
            rec[0].to_string(),
            slot.to_string(),
            (slot / SLOTS_PER_DAY).to_string(),
            format!("{:.1}", (slot % SLOTS_PER_DAY) as f64 / 2.0),
            rec[2].to_string(),
        ])?;
    }
    w.flush()?;
    written.push("fig7_envelopes.csv".to_string());

    // Envelope statistics and line flows per slot.
    #[derive(Default)]
    struct Acc {
        n: usize,
        export: f64,
        min_export: f64,
        lines: usize,
        line_p: f64,
        head_p: f64,
    }
    let mut acc: BTreeMap<usize, Acc> = BTreeMap::new();
    for rec in reader(run, "dispatch.csv")?.records() {
        let rec = rec?;
        let slot: usize = rec[1].parse()?;
        let export: f64 = rec[2].parse()?;
        let a = acc.entry(slot).or_insert(Acc {
            min_export: f64::INFINITY,
            ..Acc::default()
        });
        a.n += 1;
        a.export += export;
        a.min_export = a.min_export.min(export);
    }
    let flows: Vec<csv::StringRecord> = reader(run, "flows.csv")?.records().collect::<Result<_, _>>()?;
    let receiving: std::collections::BTreeSet<&str> = flows.iter().map(|r| &r[1]).collect();
    for rec in &flows {
        let slot: usize = rec[2].parse()?;
        let p: f64 = rec[3].parse()?;
        let a = acc.entry(slot).or_default();
        a.lines += 1;
        a.line_p += p;
        if !receiving.contains(&rec[0]) {
            a.head_p += p;
        }
    }
    let mut w = writer(&dir, "fig7_flows.csv")?;
    w.write_record([
        "slot",
        "day",
        "hour",
        "mean_export_limit_kw",
        "min_export_limit_kw",
        "mean_line_p_kw",
        "feeder_head_p_kw",
    ])?;
    for (slot, a) in &acc {
        w.write_record([
            slot.to_string(),
            (slot / SLOTS_PER_DAY).to_string(),
            format!("{:.1}", (slot % SLOTS_PER_DAY) as f64 / 2.0),
            format!("{:.6}", a.export / a.n.max(1) as f64),
            format!("{:.6}", a.min_export),
            format!("{:.6}", a.line_p / a.lines.max(1) as f64),
            format!("{:.6}", a.head_p),
        ])?;
    }
    w.flush()?;
    written.push("fig7_flows.csv".to_string());
    Ok(written)
}

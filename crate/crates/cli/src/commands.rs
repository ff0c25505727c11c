use std::path::Path;

use adann::chansim::{read_stream, write_stream, SymbolStream};
use adann::experiment::{compare as run_compare, offline_stage, CompareReport, ExperimentConfig};
use adann::pipeline::{run_online as run_online_pipeline, weight_change_ratios, TraceSummary, WeightChangeReport};
use adann::Mlp;
use serde::Deserialize;

use crate::config::config_hash;
use crate::error::{CliError, CliResult};
use crate::manifest::{OutputDir, RunManifest};

const MODEL_FILE: &str = "model.json";

fn load_streams(data: &Path) -> CliResult<(SymbolStream, SymbolStream)> {
    Ok((read_stream(&data.join("set1.json"))?, read_stream(&data.join("set2.json"))?))
}

fn load_model(path: &Path) -> CliResult<Mlp> {
    if !path.is_file() {
        return Err(CliError::io(path, std::io::ErrorKind::NotFound.into()));
    }
    Ok(Mlp::load(path)?)
}

fn write_datasets(out: &mut OutputDir, set1: &SymbolStream, set2: &SymbolStream) -> CliResult<()> {
    let dir = out.path("data");
    for (name, stream) in [("set1", set1), ("set2", set2)] {
        write_stream(&dir, name, stream)?;
        out.record(name, &format!("data/{name}.json"));
        out.record(&format!("{name}_samples"), &format!("data/{name}.f64"));
        out.record(&format!("{name}_labels"), &format!("data/{name}.labels.u8"));
    }
    Ok(())
}

fn write_model(out: &mut OutputDir, key: &str, rel: &str, model: &Mlp) -> CliResult<()> {
    model.save(&out.path(rel))?;
    out.record(key, rel);
    Ok(())
}

/// Train the offline model and record its artifacts.
fn train(out: &mut OutputDir, cfg: &ExperimentConfig, set1: &SymbolStream) -> CliResult<Mlp> {
    let offline = offline_stage(cfg, set1)?;
    let mut losses = String::from("epoch,loss\n");
    for (i, l) in offline.report.epoch_losses.iter().enumerate() {
        losses.push_str(&format!("{},{l}\n", i + 1));
    }
    out.write("offline_losses", "offline_losses.csv", losses)?;
    write_model(out, "model", MODEL_FILE, &offline.model)?;
    let range = &offline.report.train_range;
    out.manifest.note("held_out_ber", offline.held_out_ber);
    out.manifest.note("train_symbols", [range.start, range.end]);
    out.manifest
        .note("final_epoch_loss", offline.report.epoch_losses.last().copied());
    Ok(offline.model)
}

pub fn simulate(cfg: &ExperimentConfig, out_dir: &Path) -> CliResult<()> {
    let mut out = OutputDir::create(out_dir, RunManifest::new("simulate", Some(cfg)))?;
    let (set1, set2) = cfg.scenario.generate()?;
    write_datasets(&mut out, &set1, &set2)?;
    out.manifest.note("n_seq", cfg.scenario.n_seq);
    out.finish()?;
    Ok(())
}

/// Returns the held-out BER.
pub fn train_offline(cfg: &ExperimentConfig, data: &Path, out_dir: &Path) -> CliResult<f64> {
    let mut manifest = RunManifest::new("train-offline", Some(cfg));
    manifest.input("data", data);
    let mut out = OutputDir::create(out_dir, manifest)?;
    let set1 = read_stream(&data.join("set1.json"))?;
    train(&mut out, cfg, &set1)?;
    let ber = out.manifest.summary["held_out_ber"].as_f64().unwrap_or(f64::NAN);
    out.finish()?;
    Ok(ber)
}

fn write_summary(out: &mut OutputDir, dir: &str, summary: &TraceSummary, cfg: &ExperimentConfig) -> CliResult<()> {
    let summary = TraceSummary {
        config_hash: config_hash(cfg),
        ..summary.clone()
    };
    out.write_json(&format!("{}_summary", summary.method), &format!("{dir}summary.json"), &summary)?;
    Ok(())
}

fn write_weights(out: &mut OutputDir, weights: &WeightChangeReport) -> CliResult<()> {
    out.write("weights", "weights.csv", weights.to_csv())?;
    Ok(())
}

pub fn run_online(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path, out_dir: &Path) -> CliResult<TraceSummary> {
    let mut manifest = RunManifest::new("run-online", Some(cfg));
    manifest.input("checkpoint", checkpoint);
    manifest.input("data", data);
    let mut out = OutputDir::create(out_dir, manifest)?;
    let model = load_model(checkpoint)?;
    let (set1, set2) = load_streams(data)?;
    let run = &cfg.online;
    let outcome = run_online_pipeline(&model, &set1, &set2, run)?;
    let method = if run.adaptive { "adann" } else { "non_adaptive" };
    let summary = TraceSummary::from_trace(
        method,
        run.loss.loss.name(),
        run.adaptive,
        &outcome.trace,
        run.ber_threshold,
    );
    out.write(&format!("{method}_trace"), "trace.csv", outcome.trace.to_csv())?;
    write_summary(&mut out, "", &summary, cfg)?;
    if run.adaptive {
        write_weights(&mut out, &weight_change_ratios(&outcome.initial, &outcome.final_model)?)?;
        write_model(&mut out, "final_model", "final_model.json", &outcome.final_model)?;
    }
    out.manifest.note("fallbacks", outcome.fallbacks);
    out.manifest.note("updates", outcome.updates);
    out.finish()?;
    Ok(summary)
}

pub fn compare(cfg: &ExperimentConfig, checkpoint: Option<&Path>, data: Option<&Path>, out_dir: &Path) -> CliResult<CompareReport> {
    let mut manifest = RunManifest::new("compare", Some(cfg));
    if let Some(c) = checkpoint {
        manifest.input("checkpoint", c);
    }
    if let Some(d) = data {
        manifest.input("data", d);
    }
    let mut out = OutputDir::create(out_dir, manifest)?;
    let (set1, set2) = match data {
        Some(d) => load_streams(d)?,
        None => {
            let (s1, s2) = cfg.scenario.generate()?;
            write_datasets(&mut out, &s1, &s2)?;
            (s1, s2)
        }
    };
    let model = match checkpoint {
        Some(c) => load_model(c)?,
        None => train(&mut out, cfg, &set1)?,
    };
    let report = run_compare(cfg, &model, &set1, &set2)?;
    for m in &report.methods {
        let dir = format!("methods/{}/", m.name);
        out.write(&format!("{}_trace", m.name), &format!("{dir}trace.csv"), m.trace.to_csv())?;
        write_summary(&mut out, &dir, &m.summary, cfg)?;
    }
    out.write("table", "summary.csv", report.table_csv())?;
    write_weights(&mut out, &report.weights)?;
    out.finish()?;
    Ok(report)
}

#[derive(Deserialize)]
struct SumsRow {
    #[serde(rename = "S_init")]
    s_init: f64,
    #[serde(rename = "S_delta")]
    s_delta: f64,
}

/// Where the per-layer sums come from.
pub enum WeightSource<'a> {
    Checkpoints { initial: &'a Path, last: &'a Path },
    /// CSV with `S_init` and `S_delta` columns, one row per layer.
    Sums(&'a Path),
}

pub fn analyze_weights(source: WeightSource<'_>, out_dir: &Path) -> CliResult<WeightChangeReport> {
    let mut manifest = RunManifest::new("analyze-weights", None);
    let report = match source {
        WeightSource::Checkpoints { initial, last } => {
            manifest.input("initial", initial);
            manifest.input("final", last);
            weight_change_ratios(&load_model(initial)?, &load_model(last)?)?
        }
        WeightSource::Sums(path) => {
            manifest.input("sums", path);
            let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
            let sums = reader
                .deserialize::<SumsRow>()
                .map(|row| row.map(|r| (r.s_init, r.s_delta)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| csv_error(path, e))?;
            WeightChangeReport::from_sums(&sums)?
        }
    };
    let mut out = OutputDir::create(out_dir, manifest)?;
    write_weights(&mut out, &report)?;
    out.finish()?;
    Ok(report)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => adann::Error::Format(format!("{}: {other:?}", path.display())).into(),
    }
}

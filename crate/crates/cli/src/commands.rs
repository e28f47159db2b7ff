use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use radnet::data::{
    load_dataset, save_dataset, stats as dataset_stats, synth_traffic, FeatureSeries,
};
use radnet::eval::{evaluate as score, format_table, EvalReport};
use radnet::graph::RoadGraph;
use radnet::incident::IncidentLabels;
use radnet::model::{RadNet, Variant};
use radnet::pipeline::{
    chrono_split, detect as run_detection, fit_holdout, forecast_sweep, Detection,
};
use radnet::training::{forecast_mse, split_folds, write_loss_csv};
use serde::Serialize;

use crate::config::RunConfig;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn load(cfg: &RunConfig) -> Result<(FeatureSeries, RoadGraph, String)> {
    let dir = cfg.data_dir()?;
    let (series, graph, meta) =
        load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok((series, graph, meta.name))
}

fn load_model(cfg: &RunConfig, horizon: usize) -> Result<RadNet> {
    let dir = cfg.checkpoint_dir(horizon);
    RadNet::load(&dir).with_context(|| {
        format!(
            "no usable checkpoint for horizon {horizon} at {}; run `radnet train` first",
            dir.display()
        )
    })
}

fn labels_path(cfg: &RunConfig, kind: &str, horizon: usize) -> PathBuf {
    cfg.out.join(format!("labels_{kind}_h{horizon}.csv"))
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let data = synth_traffic(&cfg.synth)?;
    let meta = save_dataset(&cfg.out, "synthetic", &data.series, &data.graph)?;
    write_json(&cfg.out.join("incidents.json"), &data.incidents)?;
    println!(
        "wrote {} steps x {} links x {} features with {} incidents to {}",
        meta.timesteps,
        meta.n_nodes,
        meta.n_features,
        data.incidents.len(),
        cfg.out.display()
    );
    Ok(())
}

pub fn stats(cfg: &RunConfig) -> Result<()> {
    let (series, graph, name) = load(cfg)?;
    let st = dataset_stats(&name, &series, &graph);
    let text = st.to_text();
    write_json(&cfg.out.join("stats.json"), &st)?;
    write_text(&cfg.out.join("stats.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let (series, graph, _) = load(cfg)?;
    let split = chrono_split(series.len(), cfg.detect.train_fraction)?;
    for &h in &cfg.horizons {
        let mc = cfg.model_config(series.n_nodes(), series.n_features(), h);
        let (model, report) = fit_holdout(&mc, &series, &graph, split.train.end, &cfg.train)
            .with_context(|| format!("training horizon {h}"))?;
        let dir = cfg.checkpoint_dir(h);
        fs::create_dir_all(&dir)?;
        model.save(&dir)?;
        let mut w = create(&cfg.out.join(format!("loss_h{h}.csv")))?;
        write_loss_csv(&report.history, &mut w)?;
        w.flush()?;
        println!(
            "horizon {h}: best epoch {} validation loss {:.6}, {} parameters",
            report.best_epoch,
            report.best_val_loss,
            model.count_parameters()
        );
    }
    Ok(())
}

pub fn forecast(cfg: &RunConfig) -> Result<()> {
    let (series, graph, _) = load(cfg)?;
    let split = chrono_split(series.len(), cfg.detect.train_fraction)?;
    for &h in &cfg.horizons {
        let model = load_model(cfg, h)?;
        let first = split.test.start.max(model.config.window - 1 + h);
        let targets: Vec<usize> = (first..series.len()).collect();
        let frames = forecast_sweep(&model, &series, &graph, &targets, cfg.train.exec)?;
        let mut w = create(&cfg.out.join(format!("forecast_h{h}.csv")))?;
        writeln!(w, "timestep,link_id,feature,prediction,truth")?;
        let d = series.n_features();
        for (&t, f) in targets.iter().zip(&frames) {
            for (k, (p, x)) in f.data().iter().zip(series.frame_slice(t)).enumerate() {
                writeln!(w, "{t},{},{},{p},{x}", k / d, series.feature_names[k % d])?;
            }
        }
        w.flush()?;
        println!("horizon {h}: {} forecasts", targets.len());
    }
    Ok(())
}

fn detection(
    cfg: &RunConfig,
    series: &FeatureSeries,
    graph: &RoadGraph,
    index: usize,
    h: usize,
) -> Result<Detection> {
    let model = load_model(cfg, h)?;
    Ok(run_detection(
        &model,
        series,
        graph,
        &cfg.detect_for(index),
        cfg.train.exec,
    )?)
}

pub fn detect(cfg: &RunConfig) -> Result<()> {
    let (series, graph, _) = load(cfg)?;
    for (i, &h) in cfg.horizons.iter().enumerate() {
        let det = detection(cfg, &series, &graph, i, h)?;
        for (kind, labels) in [("pred", &det.predicted), ("true", &det.truth)] {
            let mut w = create(&labels_path(cfg, kind, h))?;
            labels.write_csv(&mut w)?;
            w.flush()?;
        }
        let flagged = det.predicted.network.labels.iter().filter(|&&b| b).count();
        println!(
            "horizon {h}: {flagged} of {} steps flagged, forecast MSE {:.4}",
            det.predicted.timesteps.len(),
            det.forecast_mse
        );
    }
    Ok(())
}

fn read_labels(path: &Path, horizon: usize) -> Result<IncidentLabels> {
    let f = File::open(path)
        .with_context(|| format!("opening {}; run `radnet detect` first", path.display()))?;
    IncidentLabels::read_csv(BufReader::new(f), horizon)
        .with_context(|| format!("reading {}", path.display()))
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let mut reports = Vec::new();
    for &h in &cfg.horizons {
        let pred = read_labels(&labels_path(cfg, "pred", h), h)?;
        let truth = read_labels(&labels_path(cfg, "true", h), h)?;
        reports.push(score(&pred, &truth)?);
    }
    let elapsed = started.elapsed().as_secs_f64();
    for r in &mut reports {
        r.runtime_seconds = Some(elapsed);
    }
    let table = format_table(&reports);
    write_json(&cfg.out.join("eval.json"), &reports)?;
    write_text(&cfg.out.join("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: Variant,
    validation_mse: f64,
    test_mse: f64,
    parameters: usize,
    report: EvalReport,
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let (series, graph, _) = load(cfg)?;
    let h = cfg.horizons[0];
    let split = chrono_split(series.len(), cfg.detect.train_fraction)?;
    let train_part = series.slice(split.train.clone())?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mc = radnet::model::RadNetConfig {
            variant,
            ..cfg.model_config(series.n_nodes(), series.n_features(), h)
        };
        let (model, _) = fit_holdout(&mc, &series, &graph, split.train.end, &cfg.train)
            .with_context(|| format!("training variant {variant}"))?;
        let folds = split_folds(train_part.len(), cfg.train.folds, mc.window, h)?;
        let val = &folds.last().expect("folds").validation_samples;
        let validation_mse = forecast_mse(&model, &train_part, &graph, val, cfg.train.exec)?;
        let det = run_detection(&model, &series, &graph, &cfg.detect_for(0), cfg.train.exec)?;
        rows.push(AblationRow {
            variant,
            validation_mse,
            test_mse: det.forecast_mse,
            parameters: model.count_parameters(),
            report: score(&det.predicted, &det.truth)?,
        });
    }
    let mut text = format!(
        "{:<8} {:>12} {:>12} {:>8} {:>8} {:>10}\n",
        "variant", "val MSE", "test MSE", "F1", "H@1", "params"
    );
    for r in &rows {
        text += &format!(
            "{:<8} {:>12.5} {:>12.5} {:>8.4} {:>8.4} {:>10}\n",
            r.variant.as_str(),
            r.validation_mse,
            r.test_mse,
            r.report.f1,
            r.report.hitrate.get(&100).copied().unwrap_or(0.0),
            r.parameters
        );
    }
    write_json(&cfg.out.join("ablation.json"), &rows)?;
    write_text(&cfg.out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let (series, graph, _) = load(cfg)?;
    for (i, &h) in cfg.horizons.iter().enumerate() {
        let det = detection(cfg, &series, &graph, i, h)?;
        let path = cfg.out.join(format!("report_h{h}.csv"));
        let mut w = create(&path)?;
        det.write_report_csv(&series, &mut w)?;
        w.flush()?;
        println!("horizon {h}: wrote {}", path.display());
    }
    Ok(())
}

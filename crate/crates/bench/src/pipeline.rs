//! The four pipeline stages. Each stage reads its inputs from the output
//! directory and writes its results there, so any stage can be rerun alone.
//!
//! ```text
//! <out>/<dataset>.dataset                           cached windows
//! <out>/checkpoints/<dataset>__<model>__clean.ckpt  train
//! <out>/logs/<dataset>__<model>__clean.json
//! <out>/attack_metrics.csv                          attack
//! <out>/checkpoints/<dataset>__<model>__<attack>.ckpt  defend
//! <out>/logs/<dataset>__<model>__<attack>.json
//! <out>/report.{csv,md,json}                        report
//! <out>/timeseries_overlay.svg                      report, optional
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info, warn};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tsadv_core::attack::{attack_dataset, AttackKind};
use tsadv_core::data::{cache, WindowedDataset};
use tsadv_core::defense::{defense_config, fit, TrainConfig, TrainReport};
use tsadv_core::metrics::{build_report, evaluate, overlay_svg, Fingerprint, Metric, ModelSet, ABSENT};
use tsadv_core::model::{checkpoint, Architecture, Model, ModelSpec};

use crate::config::ExperimentConfig;
use crate::CliError;

/// One JSON object per line on stdout when enabled.
#[derive(Clone, Copy, Debug, Default)]
pub struct Progress {
    pub enabled: bool,
}

impl Progress {
    pub fn emit(&self, event: serde_json::Value) {
        if self.enabled {
            println!("{event}");
        }
    }
}

/// Cells attempted and failed by one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageSummary {
    pub total: usize,
    pub failed: usize,
}

impl StageSummary {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        if !ok {
            self.failed += 1;
        }
    }

    fn merge(&mut self, other: StageSummary) {
        self.total += other.total;
        self.failed += other.failed;
    }

    pub fn into_result(self) -> Result<StageSummary, CliError> {
        if self.failed > 0 {
            Err(CliError::Partial { failed: self.failed, total: self.total })
        } else {
            Ok(self)
        }
    }
}

/// The persisted part of a [`TrainReport`]; wall time is left out so that
/// reruns produce identical files.
#[derive(Serialize)]
struct TrainLog<'a> {
    epoch_loss: &'a [f64],
    steps: usize,
    config: &'a TrainConfig,
}

const ATTACK_CHUNK: usize = 256;

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub progress: Progress,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: PathBuf, progress: Progress) -> Self {
        Self { cfg, out, progress }
    }

    fn name(&self) -> &str {
        &self.cfg.dataset.name
    }

    pub fn clean_path(&self, arch: Architecture) -> PathBuf {
        self.out.join("checkpoints").join(format!("{}__{}__clean.ckpt", self.name(), arch))
    }

    pub fn defended_path(&self, arch: Architecture, attack: AttackKind) -> PathBuf {
        self.out.join("checkpoints").join(format!("{}__{}__{}.ckpt", self.name(), arch, attack))
    }

    fn log_path(&self, arch: Architecture, tag: &str) -> PathBuf {
        self.out.join("logs").join(format!("{}__{}__{}.json", self.name(), arch, tag))
    }

    fn mkdirs(&self) -> Result<(), CliError> {
        for dir in [self.out.clone(), self.out.join("checkpoints"), self.out.join("logs")] {
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        Ok(())
    }

    fn write(&self, path: &Path, contents: &str) -> Result<(), CliError> {
        fs::write(path, contents).map_err(|e| CliError::io(path, e))
    }

    fn write_log(&self, path: &Path, report: &TrainReport) -> Result<(), CliError> {
        let log = TrainLog { epoch_loss: &report.epoch_loss, steps: report.steps, config: &report.config };
        let mut text = serde_json::to_string_pretty(&log).expect("serializable");
        text.push('\n');
        self.write(path, &text)
    }

    /// Train and test windows, from the cache when it matches the config.
    pub fn dataset(&self) -> Result<(WindowedDataset, WindowedDataset), CliError> {
        self.mkdirs()?;
        let path = self.out.join(format!("{}.dataset", self.name()));
        let key = self.cfg.dataset_key();
        if path.exists() {
            match cache::load(&path) {
                Ok((k, train, test)) if k == key => return Ok((train, test)),
                Ok(_) => info!("{}: dataset config changed, rebuilding", path.display()),
                Err(e) => warn!("{}: {e}, rebuilding", path.display()),
            }
        }
        let (train, test) = self.cfg.build_dataset()?;
        info!("{}: {} train and {} test windows", self.name(), train.len(), test.len());
        cache::save(&path, &key, &train, &test)?;
        Ok((train, test))
    }

    fn expected_spec(&self, arch: Architecture, data: &WindowedDataset) -> ModelSpec {
        let entry = self.cfg.model_entry(arch).expect("configured model");
        self.cfg.model_spec(entry, data.channels(), data.task)
    }

    /// Load a checkpoint and check it was built for the current config.
    fn load_model(&self, path: &Path, spec: &ModelSpec) -> Result<Model, CliError> {
        let model = checkpoint::load(path)?;
        if model.spec != *spec {
            return Err(CliError::Config(format!(
                "{} was trained for a different model config; rerun the stage that writes it",
                path.display()
            )));
        }
        Ok(model)
    }

    pub fn train(&self) -> Result<StageSummary, CliError> {
        let (train, _) = self.dataset()?;
        let results: Vec<(Architecture, Result<(), CliError>)> = self
            .cfg
            .models
            .par_iter()
            .map(|entry| {
                let arch = entry.architecture;
                let start = Instant::now();
                let spec = self.cfg.model_spec(entry, train.channels(), train.task);
                let cfg = self.cfg.clean_config(entry);
                let outcome = Model::init(spec).map_err(CliError::from).and_then(|mut model| {
                    let report = fit(&mut model, &train, &cfg)?;
                    checkpoint::save(&model, &self.clean_path(arch))?;
                    self.write_log(&self.log_path(arch, "clean"), &report)?;
                    let last = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
                    self.progress.emit(json!({
                        "stage": "train", "model": arch.name(), "status": "ok",
                        "epochs": report.epoch_loss.len(), "loss": last,
                        "secs": start.elapsed().as_secs_f64(),
                    }));
                    Ok(())
                });
                (arch, outcome)
            })
            .collect();
        let mut summary = StageSummary::default();
        for (arch, outcome) in results {
            if let Err(e) = &outcome {
                error!("train {arch}: {e}");
                self.progress
                    .emit(json!({"stage": "train", "model": arch.name(), "status": "error", "error": e.to_string()}));
            }
            summary.add(outcome.is_ok());
        }
        Ok(summary)
    }

    /// Clean and attacked metric of every base model under every attack.
    pub fn attack(&self) -> Result<StageSummary, CliError> {
        let (_, test) = self.dataset()?;
        let metric = Metric::for_task(test.task);
        let attacks = self.cfg.attack_configs();
        let models: Vec<(Architecture, Result<Model, CliError>)> = self
            .cfg
            .architectures()
            .into_iter()
            .map(|a| (a, self.load_model(&self.clean_path(a), &self.expected_spec(a, &test))))
            .collect();

        let cells: Vec<(usize, usize)> =
            (0..models.len()).flat_map(|m| (0..attacks.len()).map(move |a| (m, a))).collect();
        let values: Vec<Result<(f64, f64), String>> = cells
            .par_iter()
            .map(|&(m, a)| {
                let model = models[m].1.as_ref().map_err(|e| e.to_string())?;
                let attack = &attacks[a];
                let clean = evaluate(model, &test.x, &test.y).map_err(|e| e.to_string())?;
                let adv = attack_dataset(model, &test.x, &test.y, attack, ATTACK_CHUNK).map_err(|e| e.to_string())?;
                let attacked = evaluate(model, &adv.perturbed, &test.y).map_err(|e| e.to_string())?;
                Ok((clean, attacked))
            })
            .collect();

        let mut csv = String::from("dataset,model,attack,metric,clean,attacked,n\n");
        let mut summary = StageSummary::default();
        for (&(m, a), value) in cells.iter().zip(&values) {
            let arch = models[m].0;
            let kind = attacks[a].kind;
            let (clean, attacked, n) = match value {
                Ok((c, v)) => (format!("{c:?}"), format!("{v:?}"), test.len()),
                Err(e) => {
                    error!("attack {arch} / {kind}: {e}");
                    (ABSENT.to_string(), ABSENT.to_string(), 0)
                }
            };
            let _ = writeln!(csv, "{},{arch},{kind},{},{clean},{attacked},{n}", self.name(), metric.name());
            self.progress.emit(json!({
                "stage": "attack", "model": arch.name(), "attack": kind.name(),
                "status": if value.is_ok() { "ok" } else { "error" },
                "clean": value.as_ref().ok().map(|v| v.0), "attacked": value.as_ref().ok().map(|v| v.1),
            }));
            summary.add(value.is_ok());
        }
        self.write(&self.out.join("attack_metrics.csv"), &csv)?;
        Ok(summary)
    }

    /// Adversarially fine-tune every base model against every attack.
    pub fn defend(&self) -> Result<StageSummary, CliError> {
        let (train, _) = self.dataset()?;
        let attacks = self.cfg.attack_configs();
        let base = self.cfg.defense_base();
        let mut summary = StageSummary::default();
        let mut bases = Vec::new();
        for arch in self.cfg.architectures() {
            match self.load_model(&self.clean_path(arch), &self.expected_spec(arch, &train)) {
                Ok(m) => bases.push(m),
                Err(e) => {
                    error!("defend {arch}: {e}");
                    for a in &attacks {
                        self.progress.emit(json!({
                            "stage": "defend", "model": arch.name(), "attack": a.kind.name(),
                            "status": "error", "error": e.to_string(),
                        }));
                        summary.add(false);
                    }
                }
            }
        }

        let cells: Vec<(&Model, _)> = bases.iter().flat_map(|m| attacks.iter().map(move |a| (m, a))).collect();
        let outcomes: Vec<(Architecture, AttackKind, Result<(), CliError>)> = cells
            .into_par_iter()
            .map(|(base_model, attack)| {
                let arch = base_model.spec.architecture;
                let start = Instant::now();
                let cfg = defense_config(&base, arch, attack);
                let mut model = base_model.clone();
                let outcome = fit(&mut model, &train, &cfg).map_err(CliError::from).and_then(|report| {
                    checkpoint::save(&model, &self.defended_path(arch, attack.kind))?;
                    self.write_log(&self.log_path(arch, attack.kind.name()), &report)?;
                    self.progress.emit(json!({
                        "stage": "defend", "model": arch.name(), "attack": attack.kind.name(), "status": "ok",
                        "loss": report.epoch_loss.last(), "secs": start.elapsed().as_secs_f64(),
                    }));
                    Ok(())
                });
                (arch, attack.kind, outcome)
            })
            .collect();
        for (arch, kind, outcome) in outcomes {
            if let Err(e) = &outcome {
                error!("defend {arch} / {kind}: {e}");
                self.progress.emit(json!({
                    "stage": "defend", "model": arch.name(), "attack": kind.name(),
                    "status": "error", "error": e.to_string(),
                }));
            }
            summary.add(outcome.is_ok());
        }
        Ok(summary)
    }

    /// Evaluate whatever checkpoints exist and write the report files.
    pub fn report(&self) -> Result<StageSummary, CliError> {
        let (_, test) = self.dataset()?;
        let archs = self.cfg.architectures();
        let attacks = self.cfg.attack_configs();
        let mut set = ModelSet::default();
        for &arch in &archs {
            let spec = self.expected_spec(arch, &test);
            match self.load_model(&self.clean_path(arch), &spec) {
                Ok(m) => {
                    set.clean.insert(arch, m);
                }
                Err(e) => warn!("report {arch}: {e}"),
            }
            for a in &attacks {
                match self.load_model(&self.defended_path(arch, a.kind), &spec) {
                    Ok(m) => {
                        set.defended.insert((arch, a.kind), m);
                    }
                    Err(e) => warn!("report {arch} / {}: {e}", a.kind),
                }
            }
        }

        let (seeds, settings) = self.cfg.fingerprint_parts();
        let fingerprint = Fingerprint { seeds, settings, ..Fingerprint::default() };
        let report = build_report(self.name(), &test, &archs, &attacks, &set, fingerprint, self.cfg.eval_mode)?;
        self.write(&self.out.join("report.csv"), &report.to_csv())?;
        self.write(&self.out.join("report.md"), &report.to_markdown())?;
        self.write(&self.out.join("report.json"), &report.to_json())?;
        if self.cfg.overlay {
            if let Some(model) = archs.iter().find_map(|a| set.clean.get(a)) {
                let pred = model.predict_chunked(&test.x, ATTACK_CHUNK)?;
                let title = format!("{} {} (test)", self.name(), model.spec.architecture);
                self.write(&self.out.join("timeseries_overlay.svg"), &overlay_svg(&title, test.y.data(), &pred))?;
            }
        }
        let filled = report.filled();
        let total = report.cell_count();
        self.progress.emit(json!({"stage": "report", "status": "ok", "cells": total, "filled": filled}));
        info!("report: {filled} of {total} cells filled");
        Ok(StageSummary { total, failed: total - filled })
    }

    /// Every stage in order. Partial failures do not stop later stages.
    pub fn all(&self) -> Result<StageSummary, CliError> {
        let mut summary = StageSummary::default();
        for stage in [Self::train, Self::attack, Self::defend, Self::report] {
            summary.merge(stage(self)?);
        }
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> Pipeline {
        let text = r#"
seed = 5
[dataset]
name = "tiny"
synth = { kind = "sine", length = 120, noise = 0.01 }
[train]
epochs = 1
batch_size = 16
learning_rate = 0.01
optimizer = "adam"
[defense]
epochs = 1
batch_size = 16
[[models]]
architecture = "RNN"
hidden = 3
[[attacks]]
kind = "FGSM"
"#;
        Pipeline::new(ExperimentConfig::parse(text).unwrap(), dir.to_path_buf(), Progress::default())
    }

    #[test]
    fn dataset_cache_is_reused_and_invalidated() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = tiny(dir.path());
        let first = p.dataset().unwrap();
        let cache_file = dir.path().join("tiny.dataset");
        let stamp = fs::read(&cache_file).unwrap();
        assert_eq!(p.dataset().unwrap(), first);
        p.cfg.dataset.split = 0.7;
        let second = p.dataset().unwrap();
        assert_ne!(second.0.len(), first.0.len());
        assert_ne!(fs::read(&cache_file).unwrap(), stamp);
    }

    #[test]
    fn stale_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = tiny(dir.path());
        assert_eq!(p.train().unwrap(), StageSummary { total: 1, failed: 0 });
        p.cfg.models[0].hidden = Some(4);
        assert_eq!(p.attack().unwrap(), StageSummary { total: 1, failed: 1 });
        let csv = fs::read_to_string(dir.path().join("attack_metrics.csv")).unwrap();
        assert!(csv.contains(",absent,absent,0"), "{csv}");
    }

    #[test]
    fn summary_maps_to_partial_error() {
        assert!(StageSummary { total: 3, failed: 0 }.into_result().is_ok());
        let err = StageSummary { total: 3, failed: 1 }.into_result().unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

//! Experiment orchestration: features, FVAE training, normalization,
//! HMM-VAE training, decoding and evaluation, per seed, target corpus and
//! input condition.
//!
//! Every stage writes its outputs into a run directory and is skipped when
//! they already exist, so an interrupted run continues where it stopped.
//! When a stage recomputes its outputs, everything downstream of it is
//! removed.
//!
//! ```text
//! <output_dir>/config.txt
//! <output_dir>/features/vc_stats.json, features/vc/<stem>.feat
//! <output_dir>/seed-<s>/fvae.ckpt
//! <output_dir>/seed-<s>/<target>/styles.txt, medoid.json
//! <output_dir>/seed-<s>/<target>/<condition>/converted/
//! <output_dir>/seed-<s>/<target>/<condition>/hmmvae.ckpt, units.txt, metrics.json
//! <output_dir>/report/
//! ```

pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

pub use config::{Condition, ExperimentConfig, TargetCorpus, DEFAULT_FVAE_STEPS, DEFAULT_SEEDS};
pub use report::{build_report, collect_metrics, Report, ReportRow, RunMetrics, Summary, METRICS_FILE};

use crate::checkpoint::file_sha256;
use crate::dataio::{build_language_batches, load_manifest, load_waveform, read_wav, CorpusManifest};
use crate::features::{
    aud_features_from_logmel, cache_stem, compute_logmel_aud, compute_logmel_vc, normalize_per_band, regroup_logmel,
    CorpusNormStats, LogMelSpectrogram, NormAccumulator, Recipe, AUD_BANDS, AUD_WIDTH, VC_BANDS,
};
use crate::fvae::{Fvae, FvaeTrainer};
use crate::hmmvae::{self, HmmVae, HmmVaeTrainer};
use crate::metrics::{self, Transcriptions};
use crate::normalizer::{
    self, cached_outputs, ConversionMode, ConversionRoute, MedoidRecord, NormalizeOptions, StyleTable,
};
use crate::{Error, Result, HOP_SECONDS};

/// Model label in reports.
pub const MODEL_NAME: &str = "HMMVAE";

const FVAE_SAVE_EVERY: usize = 50;
const FVAE_LOG_EVERY: usize = 10;
const HMMVAE_SAVE_EVERY: usize = 500;
const FVAE_SHA_FILE: &str = "fvae.sha256";

/// What a stage did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    /// Outputs were already present.
    Cached,
    /// Nothing to do for this condition.
    PassThrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: &'static str,
    pub seed: Option<u64>,
    pub target: Option<String>,
    pub condition: Option<Condition>,
    pub status: StageStatus,
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn vc_stats(&self) -> PathBuf {
        self.root.join("features").join("vc_stats.json")
    }

    pub fn vc_features(&self, utterance_id: &str) -> PathBuf {
        self.root.join("features").join("vc").join(format!("{}.feat", cache_stem(utterance_id)))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn fvae_checkpoint(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("fvae.ckpt")
    }

    pub fn target_dir(&self, seed: u64, target: &str) -> PathBuf {
        self.seed_dir(seed).join(target)
    }

    pub fn styles(&self, seed: u64, target: &str) -> PathBuf {
        self.target_dir(seed, target).join(normalizer::STYLE_TABLE_FILE)
    }

    pub fn medoid(&self, seed: u64, target: &str) -> PathBuf {
        self.target_dir(seed, target).join(normalizer::MEDOID_FILE)
    }

    pub fn condition_dir(&self, seed: u64, target: &str, condition: Condition) -> PathBuf {
        self.target_dir(seed, target).join(condition.as_str())
    }

    pub fn converted_dir(&self, seed: u64, target: &str, condition: Condition) -> PathBuf {
        self.condition_dir(seed, target, condition).join("converted")
    }

    pub fn hmmvae_checkpoint(&self, seed: u64, target: &str, condition: Condition) -> PathBuf {
        self.condition_dir(seed, target, condition).join("hmmvae.ckpt")
    }

    pub fn units(&self, seed: u64, target: &str, condition: Condition) -> PathBuf {
        self.condition_dir(seed, target, condition).join("units.txt")
    }

    pub fn metrics(&self, seed: u64, target: &str, condition: Condition) -> PathBuf {
        self.condition_dir(seed, target, condition).join(METRICS_FILE)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match std::fs::metadata(path) {
        Ok(m) if m.is_dir() => std::fs::remove_dir_all(path)?,
        Ok(_) => std::fs::remove_file(path)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

/// Names the file in errors that would otherwise not mention it.
fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn stage_error(stage: &str, message: impl Into<String>) -> Error {
    Error::Stage {
        stage: stage.into(),
        message: message.into(),
    }
}

/// Restricts which seeds, targets and conditions a command touches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selection {
    pub seeds: Option<Vec<u64>>,
    pub targets: Option<Vec<String>>,
    pub conditions: Option<Vec<Condition>>,
}

impl Selection {
    fn resolve<T: Clone + PartialEq + std::fmt::Debug>(what: &str, all: &[T], pick: &Option<Vec<T>>) -> Result<Vec<T>> {
        match pick {
            None => Ok(all.to_vec()),
            Some(p) => {
                if let Some(bad) = p.iter().find(|x| !all.contains(x)) {
                    return Err(Error::Config(format!("{what} {bad:?} is not part of the configuration")));
                }
                Ok(p.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Allows continuing into a run directory that already has outputs.
    pub resume: bool,
    pub selection: Selection,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stages: Vec<StageRecord>,
    pub metrics: Vec<RunMetrics>,
    pub report: Report,
}

/// A configured experiment bound to its run directory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub layout: RunLayout,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let layout = RunLayout::new(&config.output_dir);
        Ok(Self { config, layout })
    }

    pub fn seeds(&self, sel: &Selection) -> Result<Vec<u64>> {
        Selection::resolve("seed", &self.config.seeds, &sel.seeds)
    }

    pub fn targets(&self, sel: &Selection) -> Result<Vec<String>> {
        let names: Vec<String> = self.config.targets.iter().map(|t| t.name.clone()).collect();
        Selection::resolve("target", &names, &sel.targets)
    }

    pub fn conditions(&self, sel: &Selection) -> Result<Vec<Condition>> {
        Selection::resolve("condition", &self.config.conditions, &sel.conditions)
    }

    fn needs_fvae(&self) -> bool {
        self.config.conditions.iter().any(|c| c.needs_fvae())
    }

    /// Records the configuration in the run directory, refusing a directory
    /// created with a different one.
    pub fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.layout.root)?;
        let text = self.config.render();
        let path = self.layout.config_file();
        match std::fs::read_to_string(&path) {
            Ok(existing) if existing == text => Ok(()),
            Ok(_) => Err(Error::Config(format!(
                "{} was created with a different configuration; use another experiment.output_dir",
                self.layout.root.display()
            ))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                std::fs::write(&path, text)?;
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn load_checked(path: &Path) -> Result<CorpusManifest> {
        let m = load_manifest(path).map_err(|e| with_path(e, path))?;
        if let Some(id) = m.missing_audio.first() {
            return Err(Error::Config(format!(
                "{}: {} records have no audio file (first: `{id}`)",
                path.display(),
                m.missing_audio.len()
            )));
        }
        Ok(m)
    }

    /// All FVAE training corpora pooled into one manifest.
    pub fn vc_manifest(&self) -> Result<CorpusManifest> {
        let parts: Vec<CorpusManifest> = self
            .config
            .vc_manifests
            .iter()
            .map(|p| Self::load_checked(p))
            .collect::<Result<_>>()?;
        CorpusManifest::pooled("vc", &parts)
    }

    pub fn target_manifest(&self, target: &str) -> Result<CorpusManifest> {
        let t = self.config.target(target)?;
        let mut m = Self::load_checked(&t.manifest)?;
        m.name = t.name.clone();
        Ok(m)
    }

    pub fn reference(&self, target: &str) -> Result<Transcriptions> {
        let path = &self.config.target(target)?.reference;
        metrics::read_transcriptions(path).map_err(|e| with_path(e, path))
    }

    fn vc_stats(&self) -> Result<CorpusNormStats> {
        CorpusNormStats::load(&self.layout.vc_stats())
            .map_err(|e| stage_error("ingest", format!("no feature statistics ({e}); run ingest first")))
    }

    /// Validates every manifest and reference, then caches raw 80-band
    /// log-mel of the FVAE training pool and its per-band statistics.
    pub fn ingest(&self) -> Result<StageStatus> {
        for t in &self.config.targets {
            let m = self.target_manifest(&t.name)?;
            let reference = self.reference(&t.name)?;
            if let Some(r) = m.records.iter().find(|r| !reference.contains_key(&r.utterance_id)) {
                return Err(Error::Config(format!(
                    "{}: utterance `{}` has no reference transcription",
                    t.reference.display(),
                    r.utterance_id
                )));
            }
        }
        if !self.needs_fvae() {
            return Ok(StageStatus::PassThrough);
        }
        let manifest = self.vc_manifest()?;
        let pending: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| !self.layout.vc_features(&r.utterance_id).exists())
            .collect();
        if pending.is_empty() && self.layout.vc_stats().exists() {
            return Ok(StageStatus::Cached);
        }
        std::fs::create_dir_all(self.layout.root.join("features").join("vc"))?;
        pending.par_iter().try_for_each(|r| -> Result<()> {
            let wave = load_waveform(r)?;
            let feat = compute_logmel_vc(&wave)
                .map_err(|e| Error::for_utterance(&r.utterance_id, e))?
                .with_id(&r.utterance_id);
            feat.save(&self.layout.vc_features(&r.utterance_id))
        })?;
        let mut acc = NormAccumulator::default();
        for r in &manifest.records {
            acc.add(&LogMelSpectrogram::load(&self.layout.vc_features(&r.utterance_id))?)?;
        }
        acc.finish()?.save(&self.layout.vc_stats())?;
        log::info!("ingest: {} utterances in the FVAE training pool", manifest.len());
        for seed in &self.config.seeds {
            self.invalidate_seed(*seed)?;
        }
        Ok(StageStatus::Ran)
    }

    fn invalidate_seed(&self, seed: u64) -> Result<()> {
        remove_if_exists(&self.layout.fvae_checkpoint(seed))?;
        self.invalidate_fvae_outputs(seed)
    }

    fn invalidate_fvae_outputs(&self, seed: u64) -> Result<()> {
        for t in &self.config.targets {
            remove_if_exists(&self.layout.styles(seed, &t.name))?;
            remove_if_exists(&self.layout.medoid(seed, &t.name))?;
            for c in Condition::ALL.into_iter().filter(|c| c.needs_fvae()) {
                remove_if_exists(&self.layout.condition_dir(seed, &t.name, c))?;
            }
        }
        Ok(())
    }

    fn invalidate_after_conversion(&self, seed: u64, target: &str, condition: Condition) -> Result<()> {
        remove_if_exists(&self.layout.hmmvae_checkpoint(seed, target, condition))?;
        self.invalidate_after_training(seed, target, condition)
    }

    fn invalidate_after_training(&self, seed: u64, target: &str, condition: Condition) -> Result<()> {
        remove_if_exists(&self.layout.units(seed, target, condition))?;
        remove_if_exists(&self.layout.metrics(seed, target, condition))
    }

    fn vc_training_features(&self, ids: &[&str], stats: &CorpusNormStats) -> Result<Vec<LogMelSpectrogram>> {
        ids.iter()
            .map(|id| normalize_per_band(&LogMelSpectrogram::load(&self.layout.vc_features(id))?, stats))
            .collect()
    }

    /// Trains (or continues training) the FVAE of one seed on the pooled
    /// corpus with language-homogeneous batches.
    pub fn train_vc(&self, seed: u64) -> Result<StageStatus> {
        let path = self.layout.fvae_checkpoint(seed);
        let target_steps = self.config.fvae_steps as u64;
        let mut trainer = if path.exists() {
            let t = FvaeTrainer::load(&path, seed)?;
            if t.steps >= target_steps {
                return Ok(StageStatus::Cached);
            }
            log::info!("train-vc seed {seed}: resuming at step {}", t.steps);
            t
        } else {
            let mut cfg = self.config.fvae.clone();
            cfg.n_mels = VC_BANDS;
            cfg.hop_seconds = HOP_SECONDS;
            FvaeTrainer::new(Fvae::new(cfg, seed)?, seed)
        };
        self.invalidate_fvae_outputs(seed)?;
        let manifest = self.vc_manifest()?;
        let stats = self.vc_stats()?;
        std::fs::create_dir_all(self.layout.seed_dir(seed))?;
        let mut epoch_batches: Option<(u64, Vec<crate::dataio::Batch>)> = None;
        while trainer.steps < target_steps {
            let step = trainer.steps;
            let per_epoch = manifest.len().div_ceil(self.config.fvae_batch_size) as u64;
            let epoch = step / per_epoch;
            if epoch_batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let order_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch;
                epoch_batches = Some((epoch, build_language_batches(&manifest, self.config.fvae_batch_size, order_seed)?));
            }
            let batches = &epoch_batches.as_ref().expect("set above").1;
            let batch = &batches[(step % per_epoch) as usize % batches.len()];
            let ids: Vec<&str> = batch.records.iter().map(|r| r.utterance_id.as_str()).collect();
            let feats = self.vc_training_features(&ids, &stats)?;
            let losses = trainer.training_step(&feats).map_err(|e| {
                stage_error("train-vc", format!("seed {seed}, step {step}: {e}; last checkpoint kept"))
            })?;
            if !losses.total.is_finite() {
                return Err(stage_error(
                    "train-vc",
                    format!("seed {seed}, step {step}: non-finite loss; last checkpoint kept"),
                ));
            }
            if step % FVAE_LOG_EVERY as u64 == 0 {
                log::info!(
                    "train-vc seed {seed} step {step} [{}]: rec {:.4} kld {:.4} cpc {:.4}",
                    batch.language,
                    losses.rec,
                    losses.kld,
                    losses.cpc
                );
            }
            if trainer.steps % FVAE_SAVE_EVERY as u64 == 0 || trainer.steps == target_steps {
                trainer.save(&path)?;
            }
        }
        if !path.exists() {
            trainer.save(&path)?;
        }
        Ok(StageStatus::Ran)
    }

    fn fvae(&self, seed: u64) -> Result<(Fvae, PathBuf)> {
        let path = self.layout.fvae_checkpoint(seed);
        if !path.exists() {
            return Err(stage_error("train-vc", format!("no FVAE checkpoint for seed {seed}; run train-vc first")));
        }
        let trainer = FvaeTrainer::load(&path, seed)?;
        if trainer.steps < self.config.fvae_steps as u64 {
            return Err(stage_error(
                "train-vc",
                format!(
                    "FVAE of seed {seed} is at step {} of {}; resume train-vc first",
                    trainer.steps, self.config.fvae_steps
                ),
            ));
        }
        Ok((trainer.model, path))
    }

    /// Style vector of every utterance of a target corpus.
    pub fn extract_styles(&self, seed: u64, target: &str) -> Result<(StageStatus, StyleTable)> {
        let path = self.layout.styles(seed, target);
        if path.exists() {
            return Ok((StageStatus::Cached, StyleTable::load(&path)?));
        }
        let (fvae, _) = self.fvae(seed)?;
        let table = normalizer::extract_styles_from_manifest(&self.target_manifest(target)?, &self.vc_stats()?, &fvae)?;
        std::fs::create_dir_all(self.layout.target_dir(seed, target))?;
        table.save(&path)?;
        Ok((StageStatus::Ran, table))
    }

    /// The style medoid of a target corpus.
    pub fn medoid(&self, seed: u64, target: &str) -> Result<(StageStatus, MedoidRecord)> {
        let path = self.layout.medoid(seed, target);
        if path.exists() {
            return Ok((StageStatus::Cached, MedoidRecord::load(&path)?));
        }
        let (_, table) = self.extract_styles(seed, target)?;
        let id = normalizer::find_style_medoid(&table)?;
        let mean_distance = normalizer::mean_distances(&table)
            .into_iter()
            .find(|(k, _)| *k == id)
            .map_or(f64::NAN, |(_, d)| d);
        let record = MedoidRecord {
            corpus: target.to_string(),
            utterance_id: id,
            mean_distance,
            checkpoint_sha256: Some(file_sha256(&self.layout.fvae_checkpoint(seed))?),
        };
        record.save(&path)?;
        Ok((StageStatus::Ran, record))
    }

    /// Converts a target corpus for one condition. Clean input passes
    /// through without touching any FVAE.
    pub fn convert(&self, seed: u64, target: &str, condition: Condition) -> Result<StageStatus> {
        let mode = match condition {
            Condition::Clean => return Ok(StageStatus::PassThrough),
            Condition::Rec => ConversionMode::Rec,
            Condition::Vc => ConversionMode::Vc,
        };
        let dir = self.layout.converted_dir(seed, target, condition);
        let (fvae, ckpt) = self.fvae(seed)?;
        let sha = file_sha256(&ckpt)?;
        let sha_file = dir.join(FVAE_SHA_FILE);
        match std::fs::read_to_string(&sha_file) {
            Ok(old) if old.trim() != sha => {
                log::warn!("{}: FVAE checkpoint changed, discarding conversions", dir.display());
                remove_if_exists(&dir)?;
                self.invalidate_after_conversion(seed, target, condition)?;
            }
            _ => {}
        }
        let manifest = self.target_manifest(target)?;
        let complete = manifest.records.iter().all(|r| {
            let (f, a) = cached_outputs(&dir, &r.utterance_id, self.config.route);
            f.exists() && a.is_none_or(|a| a.exists())
        }) && (mode == ConversionMode::Rec || dir.join(normalizer::MEDOID_FILE).exists());
        if complete {
            return Ok(StageStatus::Cached);
        }
        self.invalidate_after_conversion(seed, target, condition)?;
        std::fs::create_dir_all(&dir)?;
        std::fs::write(&sha_file, &sha)?;
        let mut opts = NormalizeOptions::new(mode, self.config.route, &dir);
        opts.griffin_lim_iterations = self.config.griffin_lim_iterations;
        opts.checkpoint = Some(ckpt);
        let summary = normalizer::normalize_corpus(&manifest, &fvae, &self.vc_stats()?, &opts)?;
        if let Some((id, message)) = summary.failures.first() {
            return Err(stage_error(
                "convert",
                format!(
                    "{} of {} utterances failed (first `{id}`: {message}); converted ones are kept",
                    summary.failures.len(),
                    manifest.len()
                ),
            ));
        }
        Ok(StageStatus::Ran)
    }

    /// Unit-discovery features of a target corpus under one condition.
    pub fn aud_features(&self, seed: u64, target: &str, condition: Condition) -> Result<Vec<LogMelSpectrogram>> {
        let manifest = self.target_manifest(target)?;
        let dir = self.layout.converted_dir(seed, target, condition);
        let route = self.config.route;
        manifest
            .records
            .par_iter()
            .map(|r| {
                let values: Result<Array2<f64>> = (|| match (condition, route) {
                    (Condition::Clean, _) => Ok(compute_logmel_aud(&load_waveform(r)?)?.values),
                    (_, ConversionRoute::Audio) => {
                        let (_, audio) = cached_outputs(&dir, &r.utterance_id, route);
                        let audio = audio.expect("audio route has an audio path");
                        Ok(compute_logmel_aud(&read_wav(&audio)?)?.values)
                    }
                    (_, ConversionRoute::Feature) => {
                        let (feat, _) = cached_outputs(&dir, &r.utterance_id, route);
                        let raw = LogMelSpectrogram::load(&feat)?;
                        Ok(aud_features_from_logmel(&regroup_logmel(&raw.values, AUD_BANDS)))
                    }
                })();
                values
                    .map(|v| LogMelSpectrogram::new(v, AUD_BANDS, Recipe::Aud).with_id(&r.utterance_id))
                    .map_err(|e| Error::for_utterance(&r.utterance_id, e))
            })
            .collect()
    }

    /// Random-alignment pretraining followed by Viterbi training.
    pub fn train_aud(&self, seed: u64, target: &str, condition: Condition) -> Result<StageStatus> {
        let path = self.layout.hmmvae_checkpoint(seed, target, condition);
        let mut cfg = self.config.hmmvae.clone();
        cfg.feature_dim = AUD_WIDTH;
        let (pre, train) = (cfg.pretrain_iterations, cfg.train_iterations);
        let existing = if path.exists() {
            let t = HmmVaeTrainer::load(&path, seed)?;
            if t.pretrain_steps >= pre && t.train_steps >= train {
                return Ok(StageStatus::Cached);
            }
            Some(t)
        } else {
            None
        };
        self.invalidate_after_training(seed, target, condition)?;
        let corpus = self.aud_features(seed, target, condition)?;
        std::fs::create_dir_all(self.layout.condition_dir(seed, target, condition))?;
        let fail = |e: Error| stage_error("train-aud", format!("{target}/{condition} seed {seed}: {e}"));
        if self.config.hmmvae_restarts > 1 {
            let seeds: Vec<u64> = (0..self.config.hmmvae_restarts as u64)
                .map(|k| seed.wrapping_add(k << 32))
                .collect();
            let picked = hmmvae::train_with_restarts(&cfg, &corpus, &seeds, pre, train).map_err(fail)?;
            log::info!(
                "train-aud {target}/{condition} seed {seed}: kept restart seed {} of losses {:?}",
                picked.seed,
                picked.losses
            );
            picked.trainer.save(&path)?;
            return Ok(StageStatus::Ran);
        }
        let mut trainer = match existing {
            Some(t) => t,
            None => HmmVaeTrainer::new(HmmVae::new(cfg, seed)?, seed),
        };
        if trainer.pretrain_steps < pre {
            // Pretraining draws one random alignment per utterance per call,
            // so it runs in a single call.
            trainer.pretrain(&corpus, pre - trainer.pretrain_steps).map_err(fail)?;
            trainer.save(&path)?;
        }
        while trainer.train_steps < train {
            let chunk = (train - trainer.train_steps).min(HMMVAE_SAVE_EVERY);
            trainer.train(&corpus, chunk).map_err(fail)?;
            trainer.save(&path)?;
            if let Some(last) = trainer.log.last() {
                log::info!(
                    "train-aud {target}/{condition} seed {seed} step {}: loss {:.4}",
                    trainer.train_steps,
                    last.loss
                );
            }
        }
        if !path.exists() {
            trainer.save(&path)?;
        }
        Ok(StageStatus::Ran)
    }

    /// Viterbi unit transcription of the target corpus.
    pub fn decode(&self, seed: u64, target: &str, condition: Condition) -> Result<StageStatus> {
        let out = self.layout.units(seed, target, condition);
        if out.exists() {
            return Ok(StageStatus::Cached);
        }
        let ckpt = self.layout.hmmvae_checkpoint(seed, target, condition);
        if !ckpt.exists() {
            return Err(stage_error("decode", format!("no HMM-VAE checkpoint at {}; run train-aud first", ckpt.display())));
        }
        remove_if_exists(&self.layout.metrics(seed, target, condition))?;
        let model = HmmVae::load(&ckpt)?;
        let corpus = self.aud_features(seed, target, condition)?;
        let transcriptions: Transcriptions = hmmvae::decode_to_units(&corpus, &model)?
            .into_iter()
            .map(|t| (t.utterance_id.clone(), t.to_segments()))
            .collect();
        metrics::write_transcriptions(&out, &transcriptions)?;
        Ok(StageStatus::Ran)
    }

    /// NMI, cluster purity and boundary F-score against the reference.
    pub fn evaluate(&self, seed: u64, target: &str, condition: Condition) -> Result<(StageStatus, RunMetrics)> {
        let out = self.layout.metrics(seed, target, condition);
        if out.exists() {
            return Ok((StageStatus::Cached, RunMetrics::load(&out)?));
        }
        let units = self.layout.units(seed, target, condition);
        if !units.exists() {
            return Err(stage_error("evaluate", format!("no transcription at {}; run decode first", units.display())));
        }
        let hyp = metrics::read_transcriptions(&units)?;
        let scores = metrics::evaluate(&hyp, &self.reference(target)?, &self.config.boundary)?;
        let m = RunMetrics {
            language: target.to_string(),
            model: MODEL_NAME.into(),
            condition,
            seed,
            nmi: scores.nmi,
            purity: scores.purity,
            boundary: scores.boundary,
            frames: scores.frames,
        };
        m.save(&out)?;
        log::info!(
            "evaluate {target}/{condition} seed {seed}: NMI {:.2} CP {:.2} BFS {:.2}",
            m.nmi,
            100.0 * m.purity,
            100.0 * m.boundary.fscore
        );
        Ok((StageStatus::Ran, m))
    }

    /// Table and plots over every completed run in the directory.
    pub fn report(&self) -> Result<Report> {
        let report = build_report(collect_metrics(std::slice::from_ref(&self.layout.root))?)?;
        report.write(&self.layout.report_dir())?;
        Ok(report)
    }

    /// Runs every stage for the selected seeds, targets and conditions.
    pub fn run(&self, opts: &RunOptions) -> Result<RunSummary> {
        if self.layout.config_file().exists() && !opts.resume {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume to continue it",
                self.layout.root.display()
            )));
        }
        self.prepare()?;
        let seeds = self.seeds(&opts.selection)?;
        let targets = self.targets(&opts.selection)?;
        let conditions = self.conditions(&opts.selection)?;
        let mut stages = Vec::new();
        let mut record = |stage, seed, target: Option<&str>, condition, status| {
            stages.push(StageRecord {
                stage,
                seed,
                target: target.map(String::from),
                condition,
                status,
            })
        };
        record("ingest", None, None, None, self.ingest()?);
        let mut metrics = Vec::new();
        for &seed in &seeds {
            if conditions.iter().any(|c| c.needs_fvae()) {
                record("train-vc", Some(seed), None, None, self.train_vc(seed)?);
            }
            for target in &targets {
                if conditions.contains(&Condition::Vc) {
                    let t = Some(target.as_str());
                    record("extract-styles", Some(seed), t, None, self.extract_styles(seed, target)?.0);
                    record("medoid", Some(seed), t, None, self.medoid(seed, target)?.0);
                }
                for &c in &conditions {
                    let t = Some(target.as_str());
                    record("convert", Some(seed), t, Some(c), self.convert(seed, target, c)?);
                    record("train-aud", Some(seed), t, Some(c), self.train_aud(seed, target, c)?);
                    record("decode", Some(seed), t, Some(c), self.decode(seed, target, c)?);
                    let (status, m) = self.evaluate(seed, target, c)?;
                    record("evaluate", Some(seed), t, Some(c), status);
                    metrics.push(m);
                }
            }
        }
        let report = self.report()?;
        Ok(RunSummary {
            stages,
            metrics,
            report,
        })
    }
}

/// Runs a whole experiment.
pub fn run_experiment(config: ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    Experiment::new(config)?.run(opts)
}


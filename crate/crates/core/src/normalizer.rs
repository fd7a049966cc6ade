//! Corpus-level speaker normalization by conversion to the style medoid.
//!
//! Every utterance of a corpus gets a style vector from a trained FVAE. The
//! medoid (the real utterance whose style has the smallest mean Euclidean
//! distance to all others) becomes the single conversion target, so the
//! downstream unit discovery sees one voice per corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_waveform, write_wav, CorpusManifest, UtteranceRecord};
use crate::features::{
    cache_stem, compute_logmel_vc, denormalize_per_band, invert_logmel, normalize_per_band, CorpusNormStats,
    LogMelSpectrogram, Recipe, GRIFFIN_LIM_ITERATIONS,
};
use crate::fvae::{Fvae, StyleEmbedding};
use crate::{Error, Result};

/// Style vectors of one corpus keyed by utterance id.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTable {
    pub corpus: String,
    entries: BTreeMap<String, Array1<f64>>,
}

impl StyleTable {
    pub fn new(corpus: impl Into<String>) -> Self {
        Self {
            corpus: corpus.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, utterance_id: impl Into<String>, vector: Array1<f64>) -> Result<()> {
        if let Some(d) = self.dim() {
            if vector.len() != d {
                return Err(Error::Shape(format!("style length {} in a table of length {d}", vector.len())));
            }
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("style vector".into()));
        }
        self.entries.insert(utterance_id.into(), vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|v| v.len())
    }

    pub fn get(&self, utterance_id: &str) -> Option<&Array1<f64>> {
        self.entries.get(utterance_id)
    }

    pub fn embedding(&self, utterance_id: &str) -> Option<StyleEmbedding> {
        self.get(utterance_id).map(|v| StyleEmbedding {
            vector: v.clone(),
            utterance_id: utterance_id.to_string(),
        })
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array1<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// One line per utterance: id followed by the vector components.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = format!("# corpus {}\n", self.corpus);
        for (id, v) in &self.entries {
            s.push_str(id);
            for x in v {
                write!(s, " {x}").expect("writing to a String");
            }
            s.push('\n');
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut table = Self::new(path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        for (i, line) in text.lines().enumerate() {
            if let Some(name) = line.strip_prefix("# corpus ") {
                table.corpus = name.trim().to_string();
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let mut fields = line.split_whitespace();
            let id = fields.next().expect("non-empty line");
            let v = fields
                .map(|f| f.parse::<f64>().map_err(|_| err(format!("`{f}` is not a number"))))
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                return Err(err("missing vector".into()));
            }
            table.insert(id, Array1::from(v)).map_err(|e| err(e.to_string()))?;
        }
        Ok(table)
    }
}

/// Normalized 80-band features of one record.
pub fn vc_features(record: &UtteranceRecord, stats: &CorpusNormStats) -> Result<LogMelSpectrogram> {
    let wave = load_waveform(record)?;
    let raw = compute_logmel_vc(&wave)?.with_id(&record.utterance_id);
    normalize_per_band(&raw, stats)
}

/// Style vector of every utterance in `feats`.
pub fn extract_styles(corpus: &str, feats: &[LogMelSpectrogram], fvae: &Fvae) -> Result<StyleTable> {
    let vectors: Vec<Array1<f64>> = feats
        .par_iter()
        .map(|f| fvae.encode_style(&f.values).map_err(|e| Error::for_utterance(&f.utterance_id, e)))
        .collect::<Result<_>>()?;
    let mut table = StyleTable::new(corpus);
    for (f, v) in feats.iter().zip(vectors) {
        table.insert(&f.utterance_id, v)?;
    }
    Ok(table)
}

/// Style vectors for every record of a manifest, computed from its audio.
pub fn extract_styles_from_manifest(manifest: &CorpusManifest, stats: &CorpusNormStats, fvae: &Fvae) -> Result<StyleTable> {
    let vectors: Vec<Array1<f64>> = manifest
        .records
        .par_iter()
        .map(|r| {
            vc_features(r, stats)
                .and_then(|f| fvae.encode_style(&f.values))
                .map_err(|e| Error::for_utterance(&r.utterance_id, e))
        })
        .collect::<Result<_>>()?;
    let mut table = StyleTable::new(&manifest.name);
    for (r, v) in manifest.records.iter().zip(vectors) {
        table.insert(&r.utterance_id, v)?;
    }
    Ok(table)
}

/// Mean Euclidean distance of every entry to all entries (itself included).
pub fn mean_distances(table: &StyleTable) -> Vec<(String, f64)> {
    let rows: Vec<(&str, &Array1<f64>)> = table.iter().collect();
    let n = rows.len() as f64;
    rows.par_iter()
        .map(|(id, a)| {
            let total: f64 = rows
                .iter()
                .map(|(_, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .sum();
            (id.to_string(), total / n)
        })
        .collect()
}

/// Utterance whose style minimizes the mean distance to the whole table.
/// Ties go to the lexicographically smallest id.
pub fn find_style_medoid(table: &StyleTable) -> Result<String> {
    if table.is_empty() {
        return Err(Error::InvalidArgument(format!("style table of `{}` is empty", table.corpus)));
    }
    // Ids arrive sorted, so a strict comparison keeps the first of equals.
    // Differences at rounding level count as ties.
    let mut best: Option<(String, f64)> = None;
    for (id, d) in mean_distances(table) {
        if best.as_ref().is_none_or(|(_, bd)| d < *bd - 1e-12 * bd.abs().max(1.0)) {
            best = Some((id, d));
        }
    }
    Ok(best.expect("non-empty table").0)
}

/// Converted (normalized) features: content means of `feat` decoded with
/// `style`, or with the utterance's own style when `style` is `None`.
pub fn convert_utterance(fvae: &Fvae, feat: &Array2<f64>, style: Option<&Array1<f64>>) -> Result<Array2<f64>> {
    let content = fvae.encode_content(feat)?;
    let own;
    let style = match style {
        Some(s) => s,
        None => {
            own = fvae.encode_style(feat)?;
            &own
        }
    };
    fvae.decode(&content.means, style, feat.nrows())
}

/// Which style every utterance is decoded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConversionMode {
    /// The corpus medoid's style.
    Vc,
    /// The utterance's own style (reconstruction).
    Rec,
}

/// How converted spectra reach the unit-discovery front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConversionRoute {
    /// Resynthesize audio and recompute features from it.
    Audio,
    /// Regroup the converted 80-band log-mel into 40 bands directly.
    Feature,
}

impl ConversionRoute {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Audio => "audio",
            Self::Feature => "feature",
        }
    }
}

impl std::str::FromStr for ConversionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vc" => Ok(Self::Vc),
            "rec" => Ok(Self::Rec),
            _ => Err(Error::InvalidArgument(format!("unknown conversion mode `{s}` (vc, rec)"))),
        }
    }
}

impl std::str::FromStr for ConversionRoute {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Self::Audio),
            "feature" => Ok(Self::Feature),
            _ => Err(Error::InvalidArgument(format!("unknown conversion route `{s}` (audio, feature)"))),
        }
    }
}

/// Medoid choice recorded next to the converted corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedoidRecord {
    pub corpus: String,
    pub utterance_id: String,
    pub mean_distance: f64,
    pub checkpoint_sha256: Option<String>,
}

impl MedoidRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct NormalizeOptions {
    pub mode: ConversionMode,
    pub route: ConversionRoute,
    pub cache_dir: PathBuf,
    pub griffin_lim_iterations: usize,
    /// Recorded in the medoid file when set.
    pub checkpoint: Option<PathBuf>,
}

impl NormalizeOptions {
    pub fn new(mode: ConversionMode, route: ConversionRoute, cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            route,
            cache_dir: cache_dir.into(),
            griffin_lim_iterations: GRIFFIN_LIM_ITERATIONS,
            checkpoint: None,
        }
    }
}

/// Cached outputs of one converted utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedUtterance {
    pub utterance_id: String,
    /// Converted log-mel in raw (denormalized) scale.
    pub features: PathBuf,
    /// Resynthesized audio, audio route only.
    pub audio: Option<PathBuf>,
    /// True when the outputs already existed and were left untouched.
    pub reused: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationSummary {
    pub converted: Vec<ConvertedUtterance>,
    /// Utterance id and error message of every failed conversion.
    pub failures: Vec<(String, String)>,
    pub medoid: Option<MedoidRecord>,
}

impl NormalizationSummary {
    pub fn reused(&self) -> usize {
        self.converted.iter().filter(|c| c.reused).count()
    }
}

pub const STYLE_TABLE_FILE: &str = "styles.txt";
pub const MEDOID_FILE: &str = "medoid.json";

/// Output paths of one utterance in the cache directory.
pub fn cached_outputs(cache_dir: &Path, utterance_id: &str, route: ConversionRoute) -> (PathBuf, Option<PathBuf>) {
    let stem = cache_stem(utterance_id);
    let feat = cache_dir.join(format!("{stem}.feat"));
    let audio = (route == ConversionRoute::Audio).then(|| cache_dir.join(format!("{stem}.wav")));
    (feat, audio)
}

fn outputs_exist(feat: &Path, audio: &Option<PathBuf>) -> bool {
    feat.exists() && audio.as_ref().is_none_or(|a| a.exists())
}

/// Converts every utterance of `manifest` into `opts.cache_dir`.
///
/// Utterances whose outputs already exist are skipped. Failures of single
/// utterances are collected in the summary; the error path is reserved for
/// problems that affect the whole corpus (for example an empty style table
/// in vc mode).
pub fn normalize_corpus(
    manifest: &CorpusManifest,
    fvae: &Fvae,
    stats: &CorpusNormStats,
    opts: &NormalizeOptions,
) -> Result<NormalizationSummary> {
    std::fs::create_dir_all(&opts.cache_dir)?;
    let pending: Vec<&UtteranceRecord> = manifest
        .records
        .iter()
        .filter(|r| {
            let (f, a) = cached_outputs(&opts.cache_dir, &r.utterance_id, opts.route);
            !outputs_exist(&f, &a)
        })
        .collect();

    let medoid_path = opts.cache_dir.join(MEDOID_FILE);
    let mut failures = Vec::new();
    let mut medoid = None;
    let mut target: Option<Array1<f64>> = None;
    if opts.mode == ConversionMode::Vc {
        if pending.is_empty() && medoid_path.exists() {
            medoid = Some(MedoidRecord::load(&medoid_path)?);
        } else {
            let (table, failed) = styles_collecting_failures(manifest, stats, fvae);
            failures.extend(failed);
            let id = find_style_medoid(&table)?;
            let mean_distance = mean_distances(&table)
                .into_iter()
                .find(|(k, _)| *k == id)
                .map_or(f64::NAN, |(_, d)| d);
            let record = MedoidRecord {
                corpus: manifest.name.clone(),
                utterance_id: id.clone(),
                mean_distance,
                checkpoint_sha256: opts
                    .checkpoint
                    .as_deref()
                    .map(crate::checkpoint::file_sha256)
                    .transpose()?,
            };
            table.save(&opts.cache_dir.join(STYLE_TABLE_FILE))?;
            record.save(&medoid_path)?;
            log::info!("{}: style medoid is `{id}`", manifest.name);
            target = table.get(&id).cloned();
            medoid = Some(record);
        }
    }

    let failed_ids: std::collections::HashSet<String> = failures.iter().map(|(id, _)| id.clone()).collect();
    let results: Vec<(String, Result<()>)> = pending
        .par_iter()
        .filter(|r| !failed_ids.contains(&r.utterance_id))
        .map(|r| (r.utterance_id.clone(), convert_record(r, fvae, stats, target.as_ref(), opts)))
        .collect();
    let mut fresh = std::collections::HashSet::new();
    for (id, res) in results {
        match res {
            Ok(()) => {
                fresh.insert(id);
            }
            Err(e) => {
                log::warn!("conversion of `{id}` failed: {e}");
                failures.push((id, e.to_string()));
            }
        }
    }
    let converted = manifest
        .records
        .iter()
        .filter_map(|r| {
            let (features, audio) = cached_outputs(&opts.cache_dir, &r.utterance_id, opts.route);
            outputs_exist(&features, &audio).then(|| ConvertedUtterance {
                utterance_id: r.utterance_id.clone(),
                reused: !fresh.contains(&r.utterance_id),
                features,
                audio,
            })
        })
        .collect();
    if !failures.is_empty() {
        log::warn!("{}: {} of {} conversions failed", manifest.name, failures.len(), manifest.len());
    }
    Ok(NormalizationSummary {
        converted,
        failures,
        medoid,
    })
}

fn styles_collecting_failures(
    manifest: &CorpusManifest,
    stats: &CorpusNormStats,
    fvae: &Fvae,
) -> (StyleTable, Vec<(String, String)>) {
    let results: Vec<Result<Array1<f64>>> = manifest
        .records
        .par_iter()
        .map(|r| vc_features(r, stats).and_then(|f| fvae.encode_style(&f.values)))
        .collect();
    let mut table = StyleTable::new(&manifest.name);
    let mut failures = Vec::new();
    for (r, res) in manifest.records.iter().zip(results) {
        match res.and_then(|v| table.insert(&r.utterance_id, v)) {
            Ok(()) => {}
            Err(e) => failures.push((r.utterance_id.clone(), e.to_string())),
        }
    }
    (table, failures)
}

fn convert_record(
    record: &UtteranceRecord,
    fvae: &Fvae,
    stats: &CorpusNormStats,
    target: Option<&Array1<f64>>,
    opts: &NormalizeOptions,
) -> Result<()> {
    let feat = vc_features(record, stats)?;
    let converted = convert_utterance(fvae, &feat.values, target)?;
    let converted = LogMelSpectrogram::new(converted, stats.bands(), Recipe::VcNormalized).with_id(&record.utterance_id);
    let mut raw = denormalize_per_band(&converted, stats)?;
    raw.recipe = Recipe::Converted;
    let (feat_path, audio_path) = cached_outputs(&opts.cache_dir, &record.utterance_id, opts.route);
    if let Some(audio_path) = audio_path {
        let wave = invert_logmel(&raw, opts.griffin_lim_iterations)?;
        write_wav(&audio_path, &wave)?;
    }
    // Features last: their presence marks a complete entry.
    raw.save(&feat_path)
}

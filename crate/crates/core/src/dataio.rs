//! Corpus ingestion: JSON-lines manifests, 16-bit PCM WAV audio and
//! language-homogeneous batching.
//!
//! Speaker labels travel with each record for evaluation bookkeeping only.
//! They sit behind [`UtteranceRecord::speaker_id`], which counts every read
//! so tests can assert that no training path consults them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, SAMPLE_RATE};

/// Batch size used for FVAE training.
pub const DEFAULT_BATCH_SIZE: usize = 16;

static SPEAKER_ID_READS: AtomicUsize = AtomicUsize::new(0);

/// Number of times any [`UtteranceRecord::speaker_id`] has been read in
/// this process.
pub fn speaker_id_reads() -> usize {
    SPEAKER_ID_READS.load(Ordering::SeqCst)
}

/// One audio file of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub language: String,
    speaker_id: Option<String>,
    pub audio_path: PathBuf,
    pub num_samples: u64,
    pub sample_rate: u32,
}

impl UtteranceRecord {
    pub fn new(
        utterance_id: impl Into<String>,
        language: impl Into<String>,
        speaker_id: Option<String>,
        audio_path: impl Into<PathBuf>,
        num_samples: u64,
        sample_rate: u32,
    ) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            language: language.into(),
            speaker_id,
            audio_path: audio_path.into(),
            num_samples,
            sample_rate,
        }
    }

    /// Evaluation-only speaker label. Every call is counted.
    pub fn speaker_id(&self) -> Option<&str> {
        SPEAKER_ID_READS.fetch_add(1, Ordering::SeqCst);
        self.speaker_id.as_deref()
    }
}

/// A validated corpus manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub name: String,
    pub records: Vec<UtteranceRecord>,
    pub language_set: BTreeSet<String>,
    /// Ids whose audio file did not exist at load time.
    pub missing_audio: Vec<String>,
}

impl CorpusManifest {
    /// Builds a manifest from records, checking id uniqueness.
    pub fn from_records(name: impl Into<String>, records: Vec<UtteranceRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("manifest has no records".into()));
        }
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.utterance_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate utterance id `{}`",
                    r.utterance_id
                )));
            }
        }
        let language_set = records.iter().map(|r| r.language.clone()).collect();
        Ok(Self {
            name: name.into(),
            records,
            language_set,
            missing_audio: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, utterance_id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.utterance_id == utterance_id)
    }

    /// Concatenates several manifests (e.g. all VC training corpora).
    pub fn pooled(name: impl Into<String>, manifests: &[CorpusManifest]) -> Result<Self> {
        let records = manifests
            .iter()
            .flat_map(|m| m.records.iter().cloned())
            .collect();
        Self::from_records(name, records)
    }

    /// Writes the manifest in the JSON-lines format read by [`load_manifest`].
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Loads a JSON-lines manifest.
///
/// Relative audio paths are resolved against the manifest's directory. Audio
/// headers are read for every existing file; records whose file is absent are
/// kept and listed in `missing_audio`. Records are normalized to 16 kHz: the
/// sample count is rewritten to the post-resampling length.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let file = File::open(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut missing_audio = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: UtteranceRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.utterance_id.is_empty() {
            return Err(parse_err(lineno, "empty utterance_id".into()));
        }
        if rec.sample_rate == 0 {
            return Err(parse_err(lineno, "sample_rate must be positive".into()));
        }
        if !seen.insert(rec.utterance_id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: lineno,
                id: rec.utterance_id,
            });
        }
        if rec.audio_path.is_relative() {
            rec.audio_path = base.join(&rec.audio_path);
        }
        if rec.audio_path.exists() {
            let reader = hound::WavReader::open(&rec.audio_path).map_err(|e| Error::Audio {
                path: rec.audio_path.clone(),
                message: e.to_string(),
            })?;
            let spec = reader.spec();
            rec.sample_rate = spec.sample_rate;
            rec.num_samples = u64::from(reader.duration());
        } else {
            log::warn!(
                "{}:{}: audio file {} is missing",
                path.display(),
                lineno,
                rec.audio_path.display()
            );
            missing_audio.push(rec.utterance_id.clone());
        }
        if rec.sample_rate != SAMPLE_RATE {
            rec.num_samples = resampled_len(rec.num_samples as usize, rec.sample_rate, SAMPLE_RATE) as u64;
            rec.sample_rate = SAMPLE_RATE;
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(parse_err(0, "manifest has no records".into()));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into());
    let language_set = records.iter().map(|r| r.language.clone()).collect();
    Ok(CorpusManifest {
        name,
        records,
        language_set,
        missing_audio,
    })
}

/// Reads a WAV file as mono samples in [-1, 1], resampled to 16 kHz.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let audio_err = |message: String| Error::Audio {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| audio_err(e.to_string()))?,
        (hound::SampleFormat::Int, bits) if bits <= 32 => {
            let scale = f64::from(1u32 << (bits - 1).min(31));
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| audio_err(e.to_string()))?
        }
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| audio_err(e.to_string()))?,
        (fmt, bits) => return Err(audio_err(format!("unsupported format {fmt:?}/{bits} bit"))),
    };
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok(resample_polyphase(&mono, spec.sample_rate, SAMPLE_RATE))
}

/// Loads the waveform of a record at 16 kHz.
pub fn load_waveform(record: &UtteranceRecord) -> Result<Vec<f64>> {
    read_wav(&record.audio_path).map_err(|e| Error::for_utterance(&record.utterance_id, e))
}

/// Writes 16 kHz mono 16-bit PCM. Samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let audio_err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(audio_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(audio_err)?;
    }
    writer.finalize().map_err(audio_err)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn resampled_len(n: usize, from: u32, to: u32) -> usize {
    ((n as u64 * u64::from(to)).div_ceil(u64::from(from))) as usize
}

/// Rational-factor polyphase resampler with a Blackman-windowed sinc
/// anti-aliasing filter.
pub fn resample_polyphase(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let g = gcd(u64::from(from), u64::from(to));
    let up = (u64::from(to) / g) as usize;
    let down = (u64::from(from) / g) as usize;
    // Cutoff in cycles per sample at the upsampled rate.
    let cutoff = 0.5 / up.max(down) as f64 * 0.95;
    let taps_per_phase = 32;
    let half = taps_per_phase * up.max(down) / 2;
    let len = 2 * half + 1;
    let filter: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 - half as f64;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * t)
            };
            let w = 0.42 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()
                + 0.08 * (4.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos();
            up as f64 * sinc * w
        })
        .collect();

    let out_len = resampled_len(x.len(), from, to);
    (0..out_len)
        .map(|m| {
            // y[m] = sum_k x[k] h[m*down - k*up + half]
            let center = m * down + half;
            let k_max = (center / up).min(x.len() - 1);
            let k_min = center.saturating_sub(len - 1).div_ceil(up);
            (k_min..=k_max)
                .map(|k| x[k] * filter[center - k * up])
                .sum()
        })
        .collect()
}

/// A language-homogeneous batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub language: String,
    pub records: Vec<UtteranceRecord>,
}

/// Splits one epoch of a manifest into single-language batches.
///
/// Records of each language are shuffled and chunked; the last chunk of a
/// language may be smaller than `batch_size`. The batch order is shuffled
/// across languages. Output is a pure function of the inputs and `seed`.
pub fn build_language_batches(
    manifest: &CorpusManifest,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_size must be at least 2 for contrastive negatives, got {batch_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_language: BTreeMap<&str, Vec<&UtteranceRecord>> = BTreeMap::new();
    for r in &manifest.records {
        by_language.entry(&r.language).or_default().push(r);
    }
    let mut batches = Vec::new();
    for (language, mut records) in by_language {
        records.shuffle(&mut rng);
        for chunk in records.chunks(batch_size) {
            batches.push(Batch {
                language: language.to_string(),
                records: chunk.iter().map(|r| (*r).clone()).collect(),
            });
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

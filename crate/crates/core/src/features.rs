//! Log-mel front ends.
//!
//! Two recipes share one analysis configuration (Blackman window of 400
//! samples, shift 160, FFT size 512, 16 kHz, no padding):
//!
//! - the voice-conversion recipe: 80 log-mel bands, normalized per band with
//!   corpus-level statistics ([`CorpusNormStats`]);
//! - the unit-discovery recipe: 40 log-mel bands plus deltas and
//!   delta-deltas, normalized per feature map within each utterance.
//!
//! [`invert_logmel`] maps 80-band log-mel back to a waveform via a
//! non-negative least-squares inverse of the filterbank followed by
//! Griffin-Lim phase retrieval.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{Error, Result, HOP_SECONDS, SAMPLE_RATE};

pub const WINDOW_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const VC_BANDS: usize = 80;
pub const AUD_BANDS: usize = 40;
pub const AUD_WIDTH: usize = 3 * AUD_BANDS;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MEL_FMIN: f64 = 0.0;
pub const MEL_FMAX: f64 = 8000.0;
pub const DELTA_WINDOW: usize = 2;
pub const GRIFFIN_LIM_ITERATIONS: usize = 60;
const NNLS_ITERATIONS: usize = 100;
const GRIFFIN_LIM_MOMENTUM: f64 = 0.99;

/// Which front end produced a feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Recipe {
    /// 80-band log-mel, not normalized.
    VcRaw,
    /// 80-band log-mel, corpus-normalized.
    VcNormalized,
    /// 40 bands + deltas + delta-deltas, per-utterance normalized.
    Aud,
    /// FVAE output in the normalized 80-band domain.
    Converted,
}

impl Recipe {
    pub fn tag(self) -> &'static str {
        match self {
            Recipe::VcRaw => "vc-raw",
            Recipe::VcNormalized => "vc-norm",
            Recipe::Aud => "aud",
            Recipe::Converted => "converted",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "vc-raw" => Recipe::VcRaw,
            "vc-norm" => Recipe::VcNormalized,
            "aud" => Recipe::Aud,
            "converted" => Recipe::Converted,
            _ => return None,
        })
    }
}

/// Frames x feature-map matrix with hop metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Array2<f64>,
    pub hop_seconds: f64,
    /// Number of mel bands (the matrix may be wider when deltas are appended).
    pub band_count: usize,
    pub utterance_id: String,
    pub recipe: Recipe,
}

impl LogMelSpectrogram {
    pub fn new(values: Array2<f64>, band_count: usize, recipe: Recipe) -> Self {
        Self {
            values,
            hop_seconds: HOP_SECONDS,
            band_count,
            utterance_id: String::new(),
            recipe,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.utterance_id = id.into();
        self
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Writes the cache file. Values are stored as raw IEEE-754 bits.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        write_str(&mut w, self.recipe.tag())?;
        write_str(&mut w, &self.utterance_id)?;
        w.write_all(&(self.band_count as u64).to_le_bytes())?;
        w.write_all(&self.hop_seconds.to_bits().to_le_bytes())?;
        w.write_all(&(self.values.nrows() as u64).to_le_bytes())?;
        w.write_all(&(self.values.ncols() as u64).to_le_bytes())?;
        for v in self.values.iter() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(bad("not a feature cache file"));
        }
        let version = read_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let recipe = Recipe::from_tag(&read_str(&mut r)?).ok_or_else(|| bad("unknown recipe"))?;
        let utterance_id = read_str(&mut r)?;
        let band_count = read_u64(&mut r)? as usize;
        let hop_seconds = f64::from_bits(read_u64(&mut r)?);
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_bits(read_u64(&mut r)?));
        }
        let values = Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))?;
        Ok(Self {
            values,
            hop_seconds,
            band_count,
            utterance_id,
            recipe,
        })
    }
}

const CACHE_MAGIC: &[u8; 8] = b"AUDFEAT\0";
const CACHE_VERSION: u32 = 1;

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// Per-band mean and standard deviation over a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusNormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl CorpusNormStats {
    const MIN_STD: f64 = 1e-5;

    /// Pools all frames of all spectrograms.
    pub fn from_spectrograms<'a>(
        feats: impl IntoIterator<Item = &'a LogMelSpectrogram>,
    ) -> Result<Self> {
        let mut acc = NormAccumulator::default();
        for f in feats {
            acc.add(f)?;
        }
        acc.finish()
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// Writes the statistics as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "mean": self.mean.to_vec(),
            "std": self.std.to_vec(),
        });
        std::fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Doc {
            mean: Vec<f64>,
            std: Vec<f64>,
        }
        let doc: Doc = serde_json::from_slice(&std::fs::read(path)?)?;
        if doc.mean.len() != doc.std.len() || doc.mean.is_empty() {
            return Err(Error::Shape(format!("{}: mean and std lengths differ", path.display())));
        }
        Ok(Self {
            mean: Array1::from(doc.mean),
            std: Array1::from(doc.std),
        })
    }
}

/// File name stem for a per-utterance cache entry. Ids that are not plain
/// file names get a hash suffix so distinct ids never collide.
pub fn cache_stem(utterance_id: &str) -> String {
    let clean: String = utterance_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    if clean == utterance_id && !clean.starts_with('.') && !clean.is_empty() {
        return clean;
    }
    use sha2::Digest;
    let h = sha2::Sha256::digest(utterance_id.as_bytes());
    format!("{clean}-{:02x}{:02x}{:02x}{:02x}", h[0], h[1], h[2], h[3])
}

/// Streaming accumulator for [`CorpusNormStats`].
#[derive(Debug, Default, Clone)]
pub struct NormAccumulator {
    sum: Option<Array1<f64>>,
    sum_sq: Option<Array1<f64>>,
    count: usize,
}

impl NormAccumulator {
    pub fn add(&mut self, feat: &LogMelSpectrogram) -> Result<()> {
        let b = feat.width();
        let sum = self.sum.get_or_insert_with(|| Array1::zeros(b));
        if sum.len() != b {
            return Err(Error::Shape(format!("band count {b} != {}", sum.len())));
        }
        *sum += &feat.values.sum_axis(Axis(0));
        let sq = self.sum_sq.get_or_insert_with(|| Array1::zeros(b));
        *sq += &feat.values.mapv(|v| v * v).sum_axis(Axis(0));
        self.count += feat.frames();
        Ok(())
    }

    pub fn finish(self) -> Result<CorpusNormStats> {
        let (Some(sum), Some(sum_sq)) = (self.sum, self.sum_sq) else {
            return Err(Error::InvalidArgument("no frames to compute statistics".into()));
        };
        if self.count == 0 {
            return Err(Error::InvalidArgument("no frames to compute statistics".into()));
        }
        let n = self.count as f64;
        let mean = &sum / n;
        let var = &sum_sq / n - &mean * &mean;
        let std = var.mapv(|v| v.max(0.0).sqrt().max(CorpusNormStats::MIN_STD));
        Ok(CorpusNormStats { mean, std })
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangular filterbank, `bands x (FFT_SIZE/2 + 1)`.
pub fn mel_filterbank(bands: usize) -> Array2<f64> {
    let bins = FFT_SIZE / 2 + 1;
    let mel_lo = hz_to_mel(MEL_FMIN);
    let mel_hi = hz_to_mel(MEL_FMAX);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (bands + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((bands, bins));
    for b in 0..bands {
        let (lo, center, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..bins {
            let f = k as f64 * f64::from(SAMPLE_RATE) / FFT_SIZE as f64;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[b, k]] = w;
        }
    }
    fb
}

/// Periodic Blackman window.
pub fn blackman_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = 2.0 * PI * i as f64 / n as f64;
            0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
        })
        .collect()
}

/// Number of frames produced for `num_samples` input samples.
pub fn frame_count(num_samples: usize) -> Option<usize> {
    (num_samples >= WINDOW_LENGTH).then(|| 1 + (num_samples - WINDOW_LENGTH) / HOP_LENGTH)
}

/// Short-time Fourier analysis/synthesis with the fixed front-end geometry.
pub struct Stft {
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: blackman_window(WINDOW_LENGTH),
            forward: planner.plan_fft_forward(FFT_SIZE),
            inverse: planner.plan_fft_inverse(FFT_SIZE),
        }
    }

    /// Complex half spectrum, `frames x (FFT_SIZE/2 + 1)`.
    pub fn analyze(&self, wave: &[f64]) -> Result<Array2<Complex64>> {
        let frames = frame_count(wave.len()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "waveform has {} samples, at least {WINDOW_LENGTH} required",
                wave.len()
            ))
        })?;
        let bins = FFT_SIZE / 2 + 1;
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); FFT_SIZE];
        for t in 0..frames {
            let start = t * HOP_LENGTH;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < WINDOW_LENGTH {
                    Complex64::new(wave[start + i] * self.window[i], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                out[[t, k]] = buf[k];
            }
        }
        Ok(out)
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`].
    pub fn synthesize(&self, spec: &Array2<Complex64>) -> Vec<f64> {
        let frames = spec.nrows();
        if frames == 0 {
            return Vec::new();
        }
        let len = (frames - 1) * HOP_LENGTH + WINDOW_LENGTH;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); FFT_SIZE];
        for t in 0..frames {
            for k in 0..=FFT_SIZE / 2 {
                buf[k] = spec[[t, k]];
            }
            for k in FFT_SIZE / 2 + 1..FFT_SIZE {
                buf[k] = spec[[t, FFT_SIZE - k]].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * HOP_LENGTH;
            for i in 0..WINDOW_LENGTH {
                let w = self.window[i];
                out[start + i] += buf[i].re / FFT_SIZE as f64 * w;
                norm[start + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

fn log_mel(stft: &Stft, wave: &[f64], bank: &Array2<f64>) -> Result<Array2<f64>> {
    let spec = stft.analyze(wave)?;
    let power = spec.mapv(|c| c.norm_sqr());
    let mel = power.dot(&bank.t());
    Ok(mel.mapv(|p| p.max(LOG_FLOOR).ln()))
}

/// 80-band log-mel of a 16 kHz waveform, not normalized.
pub fn compute_logmel_vc(wave: &[f64]) -> Result<LogMelSpectrogram> {
    let values = log_mel(&Stft::new(), wave, &mel_filterbank(VC_BANDS))?;
    Ok(LogMelSpectrogram::new(values, VC_BANDS, Recipe::VcRaw))
}

/// `(x - mean) / std` per band.
pub fn normalize_per_band(feat: &LogMelSpectrogram, stats: &CorpusNormStats) -> Result<LogMelSpectrogram> {
    check_bands(feat, stats)?;
    let values = (&feat.values - &stats.mean) / &stats.std;
    Ok(LogMelSpectrogram {
        values,
        recipe: Recipe::VcNormalized,
        ..feat.clone()
    })
}

/// Inverse of [`normalize_per_band`].
pub fn denormalize_per_band(feat: &LogMelSpectrogram, stats: &CorpusNormStats) -> Result<LogMelSpectrogram> {
    check_bands(feat, stats)?;
    let values = &feat.values * &stats.std + &stats.mean;
    Ok(LogMelSpectrogram {
        values,
        recipe: Recipe::VcRaw,
        ..feat.clone()
    })
}

fn check_bands(feat: &LogMelSpectrogram, stats: &CorpusNormStats) -> Result<()> {
    if feat.width() != stats.bands() {
        return Err(Error::Shape(format!(
            "feature has {} bands, statistics have {}",
            feat.width(),
            stats.bands()
        )));
    }
    Ok(())
}

/// Regression deltas over `±DELTA_WINDOW` frames with edge replication.
pub fn deltas(x: &Array2<f64>) -> Array2<f64> {
    let t_len = x.nrows();
    let mut out = Array2::zeros(x.raw_dim());
    if t_len == 0 {
        return out;
    }
    let n = DELTA_WINDOW as isize;
    let denom = 2.0 * (1..=n).map(|k| (k * k) as f64).sum::<f64>();
    let clamp = |t: isize| t.clamp(0, t_len as isize - 1) as usize;
    for t in 0..t_len as isize {
        let mut row = out.row_mut(t as usize);
        for k in 1..=n {
            let ahead = x.row(clamp(t + k));
            let behind = x.row(clamp(t - k));
            row.scaled_add(k as f64 / denom, &(&ahead - &behind));
        }
    }
    out
}

/// Appends deltas and delta-deltas to 40-band log-mel and normalizes each
/// feature map to zero mean, unit variance within the utterance.
pub fn aud_features_from_logmel(logmel40: &Array2<f64>) -> Array2<f64> {
    let d1 = deltas(logmel40);
    let d2 = deltas(&d1);
    let t_len = logmel40.nrows();
    let mut out = Array2::zeros((t_len, logmel40.ncols() * 3));
    out.slice_mut(s![.., ..logmel40.ncols()]).assign(logmel40);
    out.slice_mut(s![.., logmel40.ncols()..2 * logmel40.ncols()]).assign(&d1);
    out.slice_mut(s![.., 2 * logmel40.ncols()..]).assign(&d2);
    standardize_columns(&mut out);
    out
}

/// In-place per-column z-normalization. Constant columns are only centred.
pub fn standardize_columns(x: &mut Array2<f64>) {
    let n = x.nrows() as f64;
    if n == 0.0 {
        return;
    }
    for mut col in x.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-8 {
            col.mapv_inplace(|v| (v - mean) / std);
        } else {
            col.fill(0.0);
        }
    }
}

/// 40-band log-mel, deltas and delta-deltas (`T x 120`), per-utterance normalized.
pub fn compute_logmel_aud(wave: &[f64]) -> Result<LogMelSpectrogram> {
    let lm = log_mel(&Stft::new(), wave, &mel_filterbank(AUD_BANDS))?;
    Ok(LogMelSpectrogram::new(aud_features_from_logmel(&lm), AUD_BANDS, Recipe::Aud))
}

/// Non-negative least squares estimate of linear power from mel power
/// (`frames x bands` -> `frames x bins`) by multiplicative updates.
pub fn mel_power_to_linear(mel_power: &Array2<f64>, bank: &Array2<f64>) -> Array2<f64> {
    let frames = mel_power.nrows();
    let bins = bank.ncols();
    let target_proj = mel_power.dot(bank); // frames x bins
    // Start from the transpose-normalized back projection.
    let col_mass = bank.sum_axis(Axis(0));
    let mut p = Array2::zeros((frames, bins));
    for ((t, k), v) in p.indexed_iter_mut() {
        *v = if col_mass[k] > 0.0 {
            target_proj[[t, k]] / col_mass[k]
        } else {
            0.0
        };
    }
    for _ in 0..NNLS_ITERATIONS {
        let recon = p.dot(&bank.t()).dot(bank);
        ndarray::Zip::from(&mut p)
            .and(&target_proj)
            .and(&recon)
            .for_each(|pv, &num, &den| {
                *pv *= num / (den + 1e-30);
            });
    }
    p
}

/// Resynthesizes a waveform from raw (denormalized) 80-band log-mel.
pub fn invert_logmel(feat: &LogMelSpectrogram, iterations: usize) -> Result<Vec<f64>> {
    if feat.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("log-mel of `{}`", feat.utterance_id)));
    }
    let bank = mel_filterbank(feat.width());
    let linear = mel_power_to_linear(&feat.values.mapv(f64::exp), &bank);
    let magnitude = linear.mapv(f64::sqrt);
    Ok(griffin_lim(&magnitude, iterations))
}

/// Fast Griffin-Lim phase retrieval for a `frames x bins` magnitude.
pub fn griffin_lim(magnitude: &Array2<f64>, iterations: usize) -> Vec<f64> {
    let stft = Stft::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut spec = magnitude.mapv(|m| Complex64::from_polar(m, rng.gen_range(-PI..PI)));
    let mut prev_proj = spec.clone();
    for _ in 0..iterations {
        let wave = stft.synthesize(&spec);
        let proj = match stft.analyze(&wave) {
            Ok(p) => p,
            Err(_) => break,
        };
        // Accelerated update, then project back onto the target magnitude.
        ndarray::Zip::from(&mut spec)
            .and(&proj)
            .and(&prev_proj)
            .and(magnitude)
            .for_each(|s, &p, &pp, &m| {
                let accel = p + (p - pp) * GRIFFIN_LIM_MOMENTUM;
                let norm = accel.norm();
                *s = if norm > 1e-30 {
                    accel / norm * m
                } else {
                    Complex64::new(m, 0.0)
                };
            });
        prev_proj = proj;
    }
    stft.synthesize(&spec)
}

/// Maps raw 80-band log-mel to raw 40-band log-mel through the linear
/// spectrum estimate.
pub fn regroup_logmel(raw_logmel: &Array2<f64>, target_bands: usize) -> Array2<f64> {
    let bank_in = mel_filterbank(raw_logmel.ncols());
    let bank_out = mel_filterbank(target_bands);
    let linear = mel_power_to_linear(&raw_logmel.mapv(f64::exp), &bank_in);
    linear.dot(&bank_out.t()).mapv(|p| p.max(LOG_FLOOR).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tone(freq: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / f64::from(SAMPLE_RATE)).sin())
            .collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = compute_logmel_vc(&vec![0.1; 16000]).unwrap();
        assert_eq!(f.frames(), 98);
        assert_eq!(f.width(), 80);
    }

    #[test]
    fn framing_matches_formula() {
        for n in [400, 401, 559, 560, 561, 12345] {
            let f = compute_logmel_vc(&tone(300.0, n, 0.3)).unwrap();
            assert_eq!(f.frames(), 1 + (n - 400) / 160, "n = {n}");
            let a = compute_logmel_aud(&tone(300.0, n, 0.3)).unwrap();
            assert_eq!(a.frames(), f.frames());
        }
    }

    #[test]
    fn too_short_waveform_rejected() {
        assert!(compute_logmel_vc(&[0.0; 399]).is_err());
        assert!(compute_logmel_aud(&[0.0; 10]).is_err());
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let f = compute_logmel_vc(&vec![0.0; 4000]).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(f.values.iter().all(|&v| v == floor));
    }

    /// Triangle response at `freq` evaluated from the analytic mel edge
    /// frequencies, independent of the tabulated filterbank.
    fn analytic_band_for(freq: f64, bands: usize) -> usize {
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let top = mel(8000.0);
        let edge = |i: usize| inv(top * i as f64 / (bands + 1) as f64);
        (0..bands)
            .map(|b| {
                let (lo, c, hi) = (edge(b), edge(b + 1), edge(b + 2));
                let r = if freq > lo && freq <= c {
                    (freq - lo) / (c - lo)
                } else if freq > c && freq < hi {
                    (hi - freq) / (hi - c)
                } else {
                    0.0
                };
                (b, r)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn one_khz_tone_peaks_in_its_band() {
        let expected = analytic_band_for(1000.0, VC_BANDS);
        let f = compute_logmel_vc(&tone(1000.0, 8000, 0.5)).unwrap();
        for row in f.values.rows() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, expected);
        }
    }

    fn feat(rows: Vec<[f64; 2]>) -> LogMelSpectrogram {
        let n = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        LogMelSpectrogram::new(Array2::from_shape_vec((n, 2), flat).unwrap(), 2, Recipe::VcRaw)
    }

    #[test]
    fn stats_match_hand_computation() {
        // Three frames across two utterances.
        let a = feat(vec![[1.0, 10.0], [3.0, 10.0]]);
        let b = feat(vec![[5.0, 13.0]]);
        let stats = CorpusNormStats::from_spectrograms([&a, &b]).unwrap();
        // band 0: mean 3, var ((4+0+4)/3); band 1: mean 11, var ((1+1+4)/3)
        assert_abs_diff_eq!(stats.mean[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.mean[1], 11.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.std[0], (8.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(stats.std[1], 2.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn mean_frames_normalize_to_zero_and_round_trip() {
        let stats = CorpusNormStats {
            mean: Array1::from(vec![2.0, -1.0]),
            std: Array1::from(vec![0.5, 3.0]),
        };
        let at_mean = feat(vec![[2.0, -1.0]; 4]);
        let z = normalize_per_band(&at_mean, &stats).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));

        let x = feat(vec![[0.3, 7.0], [-4.0, 1e3]]);
        let back = denormalize_per_band(&normalize_per_band(&x, &stats).unwrap(), &stats).unwrap();
        for (a, b) in x.values.iter().zip(back.values.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn band_mismatch_rejected() {
        let stats = CorpusNormStats {
            mean: Array1::zeros(3),
            std: Array1::ones(3),
        };
        assert!(normalize_per_band(&feat(vec![[0.0, 0.0]]), &stats).is_err());
    }

    #[test]
    fn aud_output_is_standardized() {
        let mut wave = tone(440.0, 9000, 0.3);
        for (i, w) in wave.iter_mut().enumerate() {
            *w += 0.2 * (i as f64 * 0.0007).sin() * (2.0 * PI * 1800.0 * i as f64 / 16000.0).sin();
        }
        let f = compute_logmel_aud(&wave).unwrap();
        assert_eq!(f.width(), 120);
        let n = f.frames() as f64;
        let mut live = 0;
        for col in f.values.columns() {
            let mean = col.sum() / n;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-5);
            // bands that sit on the log floor for every frame are zeroed
            assert!((std - 1.0).abs() < 1e-5 || std == 0.0, "std {std}");
            live += usize::from(std > 0.5);
        }
        assert!(live > 100, "{live} standardized columns");
    }

    #[test]
    fn stats_file_round_trip() {
        let stats = CorpusNormStats {
            mean: Array1::from(vec![0.1, -2.0 / 3.0]),
            std: Array1::from(vec![1.0, 1e-5]),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.json");
        stats.save(&p).unwrap();
        assert_eq!(CorpusNormStats::load(&p).unwrap(), stats);
    }

    #[test]
    fn cache_stems_are_safe_and_distinct() {
        assert_eq!(cache_stem("spk1_utt-2.a"), "spk1_utt-2.a");
        let a = cache_stem("a/b");
        let b = cache_stem("a_b");
        assert!(!a.contains('/'));
        assert_ne!(a, b);
    }

    #[test]
    fn constant_input_has_zero_deltas() {
        let x = Array2::from_elem((12, 40), -3.5);
        assert!(deltas(&x).iter().all(|&v| v == 0.0));
        assert!(deltas(&deltas(&x)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deltas_are_linear() {
        let x = Array2::from_shape_fn((9, 3), |(t, b)| ((t * 7 + b * 3) % 5) as f64 - 1.3);
        let scaled = deltas(&x.mapv(|v| v * 2.5));
        let d = deltas(&x).mapv(|v| v * 2.5);
        for (a, b) in scaled.iter().zip(d.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cache_reload_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.feat");
        let f = compute_logmel_aud(&tone(700.0, 5000, 0.4)).unwrap().with_id("utt");
        f.save(&p).unwrap();
        let g = LogMelSpectrogram::load(&p).unwrap();
        assert_eq!(f.recipe, g.recipe);
        assert_eq!(f.utterance_id, g.utterance_id);
        assert_eq!(f.band_count, g.band_count);
        assert_eq!(f.hop_seconds.to_bits(), g.hop_seconds.to_bits());
        assert!(f.values.iter().zip(g.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn floor_input_inverts_to_near_silence() {
        let f = LogMelSpectrogram::new(Array2::from_elem((50, 80), LOG_FLOOR.ln()), 80, Recipe::VcRaw);
        let wave = invert_logmel(&f, 10).unwrap();
        let rms = (wave.iter().map(|v| v * v).sum::<f64>() / wave.len() as f64).sqrt();
        assert!(20.0 * rms.log10() < -40.0, "rms {rms}");
    }

    #[test]
    fn non_finite_inversion_rejected() {
        let mut f = LogMelSpectrogram::new(Array2::zeros((5, 80)), 80, Recipe::VcRaw);
        f.values[[2, 3]] = f64::NAN;
        assert!(invert_logmel(&f, 2).is_err());
    }

    #[test]
    fn stft_round_trip_reconstructs_interior() {
        let x = tone(523.0, 4000, 0.5);
        let stft = Stft::new();
        let y = stft.synthesize(&stft.analyze(&x).unwrap());
        for i in 200..y.len() - 200 {
            assert_abs_diff_eq!(x[i], y[i], epsilon = 1e-9);
        }
    }
}

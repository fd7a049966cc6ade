//! Synthetic corpora shared by integration tests.
#![allow(dead_code)]

use aud_core::features::{LogMelSpectrogram, Recipe, VC_BANDS};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Normalized-scale 80-band log-mel built from piecewise-constant
/// "phone" prototypes. Utterance `i` gets spectral tilt `tilts[i % len]`.
pub fn synthetic_logmel_corpus(rng: &mut ChaCha8Rng, n: usize, frames: usize, tilts: &[f64]) -> Vec<LogMelSpectrogram> {
    let prototypes: Vec<Array1<f64>> = (0..6)
        .map(|_| {
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq: f64 = rng.gen_range(1.0..4.0);
            Array1::from_shape_fn(VC_BANDS, |b| (phase + freq * b as f64 / 13.0).sin())
        })
        .collect();
    let noise = Normal::new(0.0, 0.1).unwrap();
    (0..n)
        .map(|i| {
            let tilt = tilts[i % tilts.len()];
            let mut values = Array2::zeros((frames, VC_BANDS));
            let mut t = 0;
            while t < frames {
                let p = &prototypes[rng.gen_range(0..prototypes.len())];
                let len = rng.gen_range(5..15).min(frames - t);
                for f in t..t + len {
                    for b in 0..VC_BANDS {
                        let slope = tilt * (2.0 * b as f64 / (VC_BANDS - 1) as f64 - 1.0);
                        values[[f, b]] = p[b] + slope + noise.sample(rng);
                    }
                }
                t += len;
            }
            LogMelSpectrogram::new(values, VC_BANDS, Recipe::VcNormalized).with_id(format!("utt{i:03}"))
        })
        .collect()
}

/// Observations from a known 3-unit HMM: each unit is a tight Gaussian
/// cluster in a 4-dimensional latent space, mapped to 16 feature
/// dimensions by a fixed random linear decoder. Returns features and the
/// true unit of every frame.
pub fn hmm_corpus(rng: &mut ChaCha8Rng, n: usize, frames: usize) -> (Vec<LogMelSpectrogram>, Vec<Vec<usize>>) {
    const LATENT: usize = 4;
    const WIDTH: usize = 16;
    let centers = [
        [4.0, 0.0, 0.0, 0.0],
        [0.0, 4.0, 0.0, 0.0],
        [0.0, 0.0, 4.0, -2.0],
    ];
    let decoder = Array2::from_shape_fn((LATENT, WIDTH), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v / (LATENT as f64).sqrt()
    });
    let spread = Normal::new(0.0, 0.3).unwrap();
    let obs = Normal::new(0.0, 0.05).unwrap();
    let mut feats = Vec::new();
    let mut truth = Vec::new();
    for i in 0..n {
        let mut latent = Array2::zeros((frames, LATENT));
        let mut labels = Vec::with_capacity(frames);
        let mut unit = rng.gen_range(0..3);
        while labels.len() < frames {
            let len = rng.gen_range(8..=20).min(frames - labels.len());
            for _ in 0..len {
                let t = labels.len();
                for d in 0..LATENT {
                    latent[[t, d]] = centers[unit][d] + spread.sample(rng);
                }
                labels.push(unit);
            }
            unit = (unit + rng.gen_range(1..3)) % 3;
        }
        let mut y = latent.dot(&decoder);
        y.mapv_inplace(|v| v + obs.sample(rng));
        feats.push(LogMelSpectrogram::new(y, WIDTH, Recipe::Aud).with_id(format!("h{i:03}")));
        truth.push(labels);
    }
    (feats, truth)
}

/// A synthetic speech corpus on disk.
pub struct SpeechCorpus {
    pub manifest: std::path::PathBuf,
    pub reference: std::path::PathBuf,
    pub ids: Vec<String>,
}

/// Writes `n` one-second 16 kHz utterances of language `language` into
/// `dir`. Each "phone" is a harmonic tone whose spectral envelope peaks at a
/// phone-specific frequency; speakers differ in pitch and spectral tilt.
/// Writes a JSON-lines manifest and a time-marked phone reference.
pub fn write_speech_corpus(dir: &std::path::Path, language: &str, n: usize, seed: u64) -> SpeechCorpus {
    use aud_core::dataio::{write_wav, CorpusManifest, UtteranceRecord};
    use rand::SeedableRng;
    use std::fmt::Write as _;

    const RATE: f64 = 16_000.0;
    const SAMPLES: usize = 16_000;
    const PHONE_PEAKS: [f64; 4] = [400.0, 900.0, 1700.0, 2800.0];
    const SPEAKERS: [(f64, f64); 2] = [(120.0, -1.0), (210.0, 1.0)];

    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut reference = String::new();
    let mut ids = Vec::new();
    for i in 0..n {
        let id = format!("{language}{i:02}");
        let (f0, tilt) = SPEAKERS[i % SPEAKERS.len()];
        let mut samples = vec![0.0; SAMPLES];
        let mut start = 0;
        while start < SAMPLES {
            let len = rng.gen_range(1_200..3_200).min(SAMPLES - start);
            let phone = rng.gen_range(0..PHONE_PEAKS.len());
            let peak = PHONE_PEAKS[phone];
            let harmonics = (7_000.0 / f0) as usize;
            for (k, x) in samples[start..start + len].iter_mut().enumerate() {
                let t = (start + k) as f64 / RATE;
                let mut v = 0.0;
                for h in 1..=harmonics {
                    let f = f0 * h as f64;
                    let envelope = (-((f - peak) / 250.0).powi(2)).exp() + 0.05;
                    let slope = (tilt * (f / 4_000.0 - 1.0)).exp();
                    v += envelope * slope * (2.0 * std::f64::consts::PI * f * t).sin();
                }
                *x = v;
            }
            writeln!(
                reference,
                "{id} {:.4} {:.4} p{phone}",
                start as f64 / RATE,
                len as f64 / RATE
            )
            .unwrap();
            start += len;
        }
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        samples.iter_mut().for_each(|v| *v *= 0.5 / peak);
        let path = dir.join(format!("{id}.wav"));
        write_wav(&path, &samples).unwrap();
        records.push(UtteranceRecord::new(
            &id,
            language,
            Some(format!("spk{}", i % SPEAKERS.len())),
            format!("{id}.wav"),
            SAMPLES as u64,
            16_000,
        ));
        ids.push(id);
    }
    let manifest = dir.join(format!("{language}.jsonl"));
    CorpusManifest::from_records(language, records).unwrap().write(&manifest).unwrap();
    let reference_path = dir.join(format!("{language}_phones.txt"));
    std::fs::write(&reference_path, reference).unwrap();
    SpeechCorpus {
        manifest,
        reference: reference_path,
        ids,
    }
}

/// Config text for a seconds-scale experiment on the given corpora.
pub fn smoke_experiment_config(output_dir: &std::path::Path, vc: &[&SpeechCorpus], target: (&str, &SpeechCorpus), conditions: &str) -> String {
    let vc: Vec<String> = vc.iter().map(|c| c.manifest.display().to_string()).collect();
    format!(
        "experiment.output_dir = {out}
experiment.seeds = 1
experiment.conditions = {conditions}
data.vc_manifests = {vc}
target.{name}.manifest = {manifest}
target.{name}.reference = {reference}
fvae.hidden = 32
fvae.content_dim = 8
fvae.style_dim = 8
fvae.cpc_dim = 8
fvae.tau_seconds = 0.1
fvae.learning_rate = 1e-3
fvae.steps = 10
fvae.batch_size = 4
hmmvae.latent_dim = 4
hmmvae.hidden = 16
hmmvae.units = 4
hmmvae.learning_rate = 5e-3
hmmvae.batch_size = 4
hmmvae.pretrain_iterations = 10
hmmvae.train_iterations = 20
normalizer.griffin_lim_iterations = 8
",
        out = output_dir.display(),
        vc = vc.join(", "),
        name = target.0,
        manifest = target.1.manifest.display(),
        reference = target.1.reference.display(),
    )
}

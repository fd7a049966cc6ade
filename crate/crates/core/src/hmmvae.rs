//! Acoustic unit discovery with an HMM-structured VAE.
//!
//! A frame-wise encoder maps AUD features to a diagonal Gaussian posterior
//! over a latent `x_t`; a frame-wise decoder maps `x_t` back to features.
//! The latent prior is an HMM with Gaussian emissions whose states are
//! grouped into units of three left-to-right states. The state posterior is
//! replaced by the single best Viterbi path, so the training loss per
//! utterance is
//!
//! ```text
//! |Y - Y_hat|^2 / (2 sigma^2)
//!   + sum_t KL(q(x_t) || N(mean[z_t], var[z_t]))
//!   - log init[z_0] - sum_t log A[z_{t-1}, z_t]
//! ```
//!
//! with every HMM quantity reached through unconstrained logits (softmax
//! over allowed transitions) or log-variances.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::features::{LogMelSpectrogram, AUD_WIDTH};
use crate::fvae::Activation;
use crate::metrics::TimedSegment;
use crate::nn::{clip_grad_norm, Adam, Linear, ParamId, ParamStore};
use crate::{Error, Result, HOP_SECONDS};

/// Discovered unit inventory size.
pub const DEFAULT_UNITS: usize = 80;
/// Each unit is a left-to-right chain of this many states.
const STATE_MEAN_JITTER: f64 = 0.01;

pub const STATES_PER_UNIT: usize = 3;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_PRETRAIN_ITERATIONS: usize = 2000;
pub const DEFAULT_TRAIN_ITERATIONS: usize = 20000;

/// How the last state of a unit moves on to the next unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitTransitions {
    /// Exit weights are trained (a unit bigram).
    Learned,
    /// Exit weights stay at their uniform initialization.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmVaeConfig {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub units: usize,
    pub activation: Activation,
    /// Fixed observation variance of the decoder.
    pub obs_variance: f64,
    pub unit_transitions: UnitTransitions,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub pretrain_iterations: usize,
    pub train_iterations: usize,
    /// Unit duration range (frames) for pretraining alignments.
    pub min_duration: usize,
    pub max_duration: usize,
}

impl Default for HmmVaeConfig {
    fn default() -> Self {
        Self {
            feature_dim: AUD_WIDTH,
            latent_dim: 32,
            hidden: 256,
            units: DEFAULT_UNITS,
            activation: Activation::Relu,
            obs_variance: 1.0,
            unit_transitions: UnitTransitions::Learned,
            learning_rate: DEFAULT_LEARNING_RATE,
            grad_clip: 100.0,
            batch_size: crate::dataio::DEFAULT_BATCH_SIZE,
            pretrain_iterations: DEFAULT_PRETRAIN_ITERATIONS,
            train_iterations: DEFAULT_TRAIN_ITERATIONS,
            min_duration: 5,
            max_duration: 30,
        }
    }
}

impl HmmVaeConfig {
    pub fn states(&self) -> usize {
        self.units * STATES_PER_UNIT
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.units == 0 || self.latent_dim == 0 || self.feature_dim == 0 {
            return bad("units, latent and feature dimensions must be positive");
        }
        if !(self.obs_variance > 0.0) {
            return bad("observation variance must be positive");
        }
        if self.min_duration < STATES_PER_UNIT || self.max_duration < self.min_duration {
            return bad("pretraining durations need 3 <= min <= max");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}

/// Additive log-masks of the unit topology: `0` where allowed, `-inf` elsewhere.
pub fn topology_masks(units: usize) -> (Array2<f64>, Array1<f64>) {
    let n = units * STATES_PER_UNIT;
    let mut trans = Array2::from_elem((n, n), f64::NEG_INFINITY);
    let mut init = Array1::from_elem(n, f64::NEG_INFINITY);
    for s in 0..n {
        trans[[s, s]] = 0.0;
        if s % STATES_PER_UNIT + 1 < STATES_PER_UNIT {
            trans[[s, s + 1]] = 0.0;
        } else {
            for u in 0..units {
                trans[[s, u * STATES_PER_UNIT]] = 0.0;
            }
        }
    }
    for u in 0..units {
        init[u * STATES_PER_UNIT] = 0.0;
    }
    (trans, init)
}

/// Normalized HMM prior in the log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmParameters {
    /// `N_S x N_S`, each row a log-distribution over next states.
    pub log_transitions: Array2<f64>,
    pub log_initial: Array1<f64>,
    /// `N_S x D_x` emission means.
    pub means: Array2<f64>,
    /// `N_S x D_x` diagonal emission log-variances.
    pub log_variances: Array2<f64>,
}

impl HmmParameters {
    pub fn new(
        log_transitions: Array2<f64>,
        log_initial: Array1<f64>,
        means: Array2<f64>,
        log_variances: Array2<f64>,
    ) -> Result<Self> {
        let n = log_initial.len();
        if log_transitions.dim() != (n, n) || means.nrows() != n || log_variances.dim() != means.dim() {
            return Err(Error::Shape(format!(
                "HMM with {n} states has transitions {:?}, means {:?}, log-variances {:?}",
                log_transitions.dim(),
                means.dim(),
                log_variances.dim()
            )));
        }
        Ok(Self {
            log_transitions,
            log_initial,
            means,
            log_variances,
        })
    }

    pub fn states(&self) -> usize {
        self.log_initial.len()
    }

    pub fn units(&self) -> usize {
        self.states() / STATES_PER_UNIT
    }

    /// `log N(x_t; mean_k, var_k)` for every frame and state (`T x N_S`).
    ///
    /// With `spread`, each frame is a Gaussian with the given log-variances
    /// and the score is the expected log-likelihood under it.
    pub fn emission_scores(&self, x: &Array2<f64>, spread: Option<&Array2<f64>>) -> Array2<f64> {
        let d = self.means.ncols();
        let log_norm = d as f64 * (2.0 * std::f64::consts::PI).ln();
        let inv_var = self.log_variances.mapv(|v| (-v).exp());
        let log_det: Vec<f64> = self.log_variances.rows().into_iter().map(|r| r.sum()).collect();
        let extra = spread.map(|s| s.mapv(f64::exp));
        Array2::from_shape_fn((x.nrows(), self.states()), |(t, k)| {
            let mut q = 0.0;
            for j in 0..d {
                let diff = x[[t, j]] - self.means[[k, j]];
                let mut m2 = diff * diff;
                if let Some(e) = &extra {
                    m2 += e[[t, j]];
                }
                q += m2 * inv_var[[k, j]];
            }
            -0.5 * (log_norm + log_det[k] + q)
        })
    }
}

/// Hard state path of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateAlignment {
    pub states: Vec<usize>,
}

impl StateAlignment {
    /// Checks that the path has non-zero probability under the topology.
    pub fn validate(&self, units: usize) -> Result<()> {
        let (trans, init) = topology_masks(units);
        let n = units * STATES_PER_UNIT;
        let first = *self
            .states
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty alignment".into()))?;
        if first >= n || init[first] == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!("alignment cannot start in state {first}")));
        }
        for (t, w) in self.states.windows(2).enumerate() {
            if w[1] >= n || trans[[w[0], w[1]]] == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!(
                    "forbidden transition {} -> {} at frame {}",
                    w[0],
                    w[1],
                    t + 1
                )));
            }
        }
        Ok(())
    }
}

/// Best path through a trellis and its log-probability.
///
/// `emissions` is `T x N_S`. Scores may be `-inf`; NaN or `+inf` are errors,
/// as is a trellis without any finite path.
pub fn viterbi(
    log_initial: &Array1<f64>,
    log_transitions: &Array2<f64>,
    emissions: &Array2<f64>,
) -> Result<(Vec<usize>, f64)> {
    let (t_len, n) = emissions.dim();
    if t_len == 0 {
        return Err(Error::InvalidArgument("Viterbi needs at least one frame".into()));
    }
    if log_initial.len() != n || log_transitions.dim() != (n, n) {
        return Err(Error::Shape(format!(
            "{n} emission columns vs {} initial and {:?} transition entries",
            log_initial.len(),
            log_transitions.dim()
        )));
    }
    let bad = |v: &f64| v.is_nan() || *v == f64::INFINITY;
    if emissions.iter().any(bad) || log_initial.iter().any(bad) || log_transitions.iter().any(bad) {
        return Err(Error::NonFinite("Viterbi scores".into()));
    }
    // Incoming transitions per state, skipping impossible ones.
    let incoming: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|j| {
            (0..n)
                .filter_map(|i| {
                    let w = log_transitions[[i, j]];
                    (w > f64::NEG_INFINITY).then_some((i, w))
                })
                .collect()
        })
        .collect();
    let mut delta: Vec<f64> = (0..n).map(|k| log_initial[k] + emissions[[0, k]]).collect();
    let mut back = vec![0u32; t_len * n];
    let mut next = vec![0.0; n];
    for t in 1..t_len {
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for &(i, w) in &incoming[j] {
                let s = delta[i] + w;
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = best + emissions[[t, j]];
            back[t * n + j] = arg as u32;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let (mut state, &score) = delta
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one state");
    if score == f64::NEG_INFINITY {
        return Err(Error::NonFinite("no path has non-zero probability".into()));
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = state;
    for t in (1..t_len).rev() {
        state = back[t * n + state] as usize;
        path[t - 1] = state;
    }
    Ok((path, score))
}

/// Viterbi alignment of latent vectors (e.g. posterior means) to the HMM.
pub fn viterbi_align(latent: &Array2<f64>, hmm: &HmmParameters) -> Result<(StateAlignment, f64)> {
    if latent.ncols() != hmm.means.ncols() {
        return Err(Error::Shape(format!(
            "latent width {} vs HMM dimension {}",
            latent.ncols(),
            hmm.means.ncols()
        )));
    }
    let e = hmm.emission_scores(latent, None);
    let (states, lp) = viterbi(&hmm.log_initial, &hmm.log_transitions, &e)?;
    Ok((StateAlignment { states }, lp))
}

/// Per-frame diagonal Gaussian posterior over the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub means: Array2<f64>,
    pub log_variances: Array2<f64>,
}

/// Negative-ELBO terms summed over the frames of one or more utterances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub transition: f64,
    pub total: f64,
    pub frames: usize,
}

impl ElboBreakdown {
    pub fn per_frame(&self) -> f64 {
        self.total / self.frames.max(1) as f64
    }
}

/// One discovered unit occurrence, `[start_frame, end_frame)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSegment {
    pub unit: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuTranscription {
    pub utterance_id: String,
    pub units: Vec<UnitSegment>,
    pub hop_seconds: f64,
}

impl AuTranscription {
    /// Merges runs of frames whose states belong to the same unit.
    pub fn from_states(utterance_id: impl Into<String>, states: &[usize], hop_seconds: f64) -> Self {
        let mut units: Vec<UnitSegment> = Vec::new();
        for (t, &s) in states.iter().enumerate() {
            let unit = s / STATES_PER_UNIT;
            match units.last_mut() {
                Some(last) if last.unit == unit => last.end_frame = t + 1,
                _ => units.push(UnitSegment {
                    unit,
                    start_frame: t,
                    end_frame: t + 1,
                }),
            }
        }
        Self {
            utterance_id: utterance_id.into(),
            units,
            hop_seconds,
        }
    }

    pub fn frames(&self) -> usize {
        self.units.last().map_or(0, |u| u.end_frame)
    }

    /// Unit id of every frame.
    pub fn frame_units(&self) -> Vec<usize> {
        self.units
            .iter()
            .flat_map(|u| std::iter::repeat_n(u.unit, u.end_frame - u.start_frame))
            .collect()
    }

    pub fn to_segments(&self) -> Vec<TimedSegment> {
        self.units
            .iter()
            .map(|u| TimedSegment {
                start: u.start_frame as f64 * self.hop_seconds,
                duration: (u.end_frame - u.start_frame) as f64 * self.hop_seconds,
                label: u.unit.to_string(),
            })
            .collect()
    }
}

/// Within-unit split of a duration into the three states.
#[derive(Debug)]
pub enum Split<'a, R: Rng> {
    /// As equal as possible, earlier states taking the remainder.
    Equal,
    Random(&'a mut R),
}

/// Expands `(unit, duration)` pairs into a left-to-right state path.
pub fn expand_units<R: Rng>(units: &[(usize, usize)], mut split: Split<'_, R>) -> StateAlignment {
    let mut states = Vec::new();
    for &(unit, d) in units {
        let parts = d.min(STATES_PER_UNIT);
        let lengths: Vec<usize> = match &mut split {
            Split::Equal => (0..parts).map(|k| d / parts + usize::from(k < d % parts)).collect(),
            Split::Random(rng) => {
                // parts - 1 distinct cut points in 1..d
                let mut cuts = rand::seq::index::sample(*rng, d - 1, parts - 1)
                    .into_iter()
                    .map(|c| c + 1)
                    .collect::<Vec<_>>();
                cuts.sort_unstable();
                cuts.push(d);
                let mut prev = 0;
                cuts.into_iter()
                    .map(|c| {
                        let l = c - prev;
                        prev = c;
                        l
                    })
                    .collect()
            }
        };
        for (k, l) in lengths.into_iter().enumerate() {
            states.extend(std::iter::repeat_n(unit * STATES_PER_UNIT + k, l));
        }
    }
    StateAlignment { states }
}

/// Random unit sequence and durations covering exactly `frames` frames.
///
/// Units are uniform over the inventory and durations uniform over
/// `[min_duration, max_duration]`. A remainder shorter than `min_duration`
/// is absorbed by the previous unit.
pub fn sample_random_alignment(
    frames: usize,
    units: usize,
    min_duration: usize,
    max_duration: usize,
    rng: &mut impl Rng,
) -> StateAlignment {
    let mut plan: Vec<(usize, usize)> = Vec::new();
    let mut left = frames;
    while left > 0 {
        let d = rng.gen_range(min_duration..=max_duration);
        if d < left {
            plan.push((rng.gen_range(0..units), d));
            left -= d;
            continue;
        }
        match plan.last_mut() {
            Some(last) if left < min_duration => last.1 += left,
            _ => plan.push((rng.gen_range(0..units), left)),
        }
        break;
    }
    expand_units(&plan, Split::Random(rng))
}

/// Model parameters and topology.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmVae {
    pub config: HmmVaeConfig,
    pub store: ParamStore,
    encoder: [Linear; 2],
    decoder: [Linear; 2],
    transition_logits: ParamId,
    initial_logits: ParamId,
    state_means: ParamId,
    state_log_vars: ParamId,
    transition_mask: Array2<f64>,
    initial_mask: Array2<f64>,
}

impl HmmVae {
    pub fn new(config: HmmVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = [
            Linear::new(&mut store, "encoder.0", c.feature_dim, c.hidden, &mut rng),
            Linear::new(&mut store, "encoder.out", c.hidden, 2 * c.latent_dim, &mut rng),
        ];
        let decoder = [
            Linear::new(&mut store, "decoder.0", c.latent_dim, c.hidden, &mut rng),
            Linear::new(&mut store, "decoder.out", c.hidden, c.feature_dim, &mut rng),
        ];
        let n = c.states();
        let transition_logits = store.add("hmm.transition_logits", Array2::zeros((n, n)));
        let initial_logits = store.add("hmm.initial_logits", Array2::zeros((1, n)));
        // States of one unit start from a shared draw, so that units rather
        // than single states compete for regions of the latent space.
        let unit_means: Array2<f64> = Array2::from_shape_fn((c.units, c.latent_dim), |_| StandardNormal.sample(&mut rng));
        let state_means = store.add(
            "hmm.means",
            Array2::from_shape_fn((n, c.latent_dim), |(s, d)| {
                let jitter: f64 = StandardNormal.sample(&mut rng);
                unit_means[[s / STATES_PER_UNIT, d]] + STATE_MEAN_JITTER * jitter
            }),
        );
        let state_log_vars = store.add("hmm.log_variances", Array2::zeros((n, c.latent_dim)));
        let (tm, im) = topology_masks(c.units);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            transition_logits,
            initial_logits,
            state_means,
            state_log_vars,
            transition_mask: tm,
            initial_mask: im.insert_axis(Axis(0)),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Current prior, normalized.
    pub fn hmm(&self) -> HmmParameters {
        let trans = masked_log_softmax(&(self.store.value(self.transition_logits) + &self.transition_mask));
        let init = masked_log_softmax(&(self.store.value(self.initial_logits) + &self.initial_mask));
        HmmParameters {
            log_transitions: trans,
            log_initial: init.index_axis_move(Axis(0), 0),
            means: self.store.value(self.state_means).clone(),
            log_variances: self.store.value(self.state_log_vars).clone(),
        }
    }

    fn check_input(&self, feat: &Array2<f64>) -> Result<()> {
        if feat.ncols() != self.config.feature_dim {
            return Err(Error::Shape(format!(
                "expected {} feature columns, got {}",
                self.config.feature_dim,
                feat.ncols()
            )));
        }
        if feat.nrows() == 0 {
            return Err(Error::InvalidArgument("utterance has no frames".into()));
        }
        Ok(())
    }

    fn encoder_graph(&self, g: &Graph, x: Var) -> (Var, Var) {
        let h = self.config.activation.apply(g, self.encoder[0].forward(g, &self.store, x));
        let stats = self.encoder[1].forward(g, &self.store, h);
        let d = self.config.latent_dim;
        (g.slice_cols(stats, 0, d), g.slice_cols(stats, d, d))
    }

    fn decoder_graph(&self, g: &Graph, z: Var) -> Var {
        let h = self.config.activation.apply(g, self.decoder[0].forward(g, &self.store, z));
        self.decoder[1].forward(g, &self.store, h)
    }

    pub fn encode(&self, feat: &Array2<f64>) -> Result<LatentPosterior> {
        self.check_input(feat)?;
        let g = Graph::new();
        let (m, lv) = self.encoder_graph(&g, g.constant(feat.clone()));
        Ok(LatentPosterior {
            means: g.value(m),
            log_variances: g.value(lv),
        })
    }

    pub fn decode(&self, latent: &Array2<f64>) -> Result<Array2<f64>> {
        if latent.ncols() != self.config.latent_dim {
            return Err(Error::Shape(format!("latent width {} != {}", latent.ncols(), self.config.latent_dim)));
        }
        let g = Graph::new();
        let y = self.decoder_graph(&g, g.constant(latent.clone()));
        Ok(g.value(y))
    }

    /// Alignment used during training: maximizes the expected emission
    /// log-likelihood under the posterior plus the path prior.
    pub fn align_posterior(&self, post: &LatentPosterior, hmm: &HmmParameters) -> Result<StateAlignment> {
        let e = hmm.emission_scores(&post.means, Some(&post.log_variances));
        let (states, _) = viterbi(&hmm.log_initial, &hmm.log_transitions, &e)?;
        Ok(StateAlignment { states })
    }

    /// Builds the summed negative ELBO over `batch` with the given paths.
    /// `noise` holds one `T x D_x` matrix per utterance; `None` uses means.
    fn elbo_graph(
        &self,
        g: &Graph,
        batch: &[&Array2<f64>],
        alignments: &[&StateAlignment],
        noise: Option<&[Array2<f64>]>,
    ) -> Result<(Var, Var, Var, Var)> {
        if batch.len() != alignments.len() || batch.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} utterances and {} alignments",
                batch.len(),
                alignments.len()
            )));
        }
        let log_a = g.log_softmax_rows(g.add(
            g.param(&self.store, self.transition_logits),
            g.constant(self.transition_mask.clone()),
        ));
        let log_pi = g.log_softmax_rows(g.add(
            g.param(&self.store, self.initial_logits),
            g.constant(self.initial_mask.clone()),
        ));
        let means = g.param(&self.store, self.state_means);
        let log_vars = g.param(&self.store, self.state_log_vars);
        let units = self.config.units;
        let mut recs = Vec::new();
        let mut kls = Vec::new();
        let mut picks = Vec::new();
        let mut inits = Vec::new();
        for (i, (feat, align)) in batch.iter().zip(alignments).enumerate() {
            self.check_input(feat)?;
            if align.states.len() != feat.nrows() {
                return Err(Error::Shape(format!(
                    "alignment of {} frames for {} feature frames",
                    align.states.len(),
                    feat.nrows()
                )));
            }
            align.validate(units)?;
            let y = g.constant((*feat).clone());
            let (mu, lv) = self.encoder_graph(g, y);
            let z = match noise {
                Some(n) => g.add(mu, g.mul(g.exp(g.scale(lv, 0.5)), g.constant(n[i].clone()))),
                None => mu,
            };
            let y_hat = self.decoder_graph(g, z);
            recs.push(g.sum(g.square(g.sub(y_hat, y))));

            let m_k = g.gather_rows(means, &align.states);
            let lv_k = g.gather_rows(log_vars, &align.states);
            // 0.5 * sum(lv_k - lv + (exp(lv) + (mu - m_k)^2) / exp(lv_k) - 1)
            let ratio = g.mul(g.add(g.exp(lv), g.square(g.sub(mu, m_k))), g.exp(g.neg(lv_k)));
            let kl = g.add_scalar(g.add(g.sub(lv_k, lv), ratio), -1.0);
            kls.push(g.scale(g.sum(kl), 0.5));

            inits.push((0, align.states[0]));
            picks.extend(align.states.windows(2).map(|w| (w[0], w[1])));
        }
        let rec = g.scale(g.sum(g.concat_cols(&recs)), 0.5 / self.config.obs_variance);
        let kl = g.sum(g.concat_cols(&kls));
        let mut trans = g.neg(g.sum(g.pick(log_pi, &inits)));
        if !picks.is_empty() {
            trans = g.sub(trans, g.sum(g.pick(log_a, &picks)));
        }
        let total = g.add(g.add(rec, kl), trans);
        Ok((total, rec, kl, trans))
    }

    /// Summed negative ELBO of `batch` under fixed alignments, evaluated at
    /// the posterior means.
    pub fn elbo(&self, batch: &[&Array2<f64>], alignments: &[&StateAlignment]) -> Result<ElboBreakdown> {
        let g = Graph::new();
        let (total, rec, kl, trans) = self.elbo_graph(&g, batch, alignments, None)?;
        let out = ElboBreakdown {
            reconstruction: g.scalar(rec),
            kl: g.scalar(kl),
            transition: g.scalar(trans),
            total: g.scalar(total),
            frames: batch.iter().map(|b| b.nrows()).sum(),
        };
        if !out.total.is_finite() {
            return Err(Error::NonFinite("negative ELBO".into()));
        }
        Ok(out)
    }

    /// Per-frame negative ELBO and its gradient with respect to all
    /// parameters, at the posterior means.
    pub fn elbo_gradients(
        &self,
        batch: &[&Array2<f64>],
        alignments: &[&StateAlignment],
    ) -> Result<(f64, crate::autodiff::Gradients)> {
        let g = Graph::new();
        let (total, ..) = self.elbo_graph(&g, batch, alignments, None)?;
        Ok((g.scalar(total), g.backward(total)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(serde_json::json!({ "config": self.config }), Vec::new())
            .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn to_checkpoint(&self, meta: serde_json::Value, optimizers: Vec<(String, Adam)>) -> Checkpoint {
        Checkpoint {
            kind: "hmmvae".into(),
            meta,
            params: self.store.clone(),
            optimizers,
        }
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "hmmvae" {
            return Err(Error::Checkpoint(format!("expected an hmmvae checkpoint, found `{}`", ckpt.kind)));
        }
        let config: HmmVaeConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing config".into()))?,
        )?;
        let mut model = Self::new(config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

/// Row-wise log-softmax where `-inf` entries stay `-inf`.
fn masked_log_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Loss of one logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub phase: Phase,
    /// Negative ELBO per frame.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    Train,
}

/// Model, optimizer and sampling state across pretraining and training.
#[derive(Debug, Clone)]
pub struct HmmVaeTrainer {
    pub model: HmmVae,
    pub optimizer: Adam,
    pub log: Vec<TrainRecord>,
    rng: ChaCha8Rng,
    pub pretrain_steps: usize,
    pub train_steps: usize,
}

impl HmmVaeTrainer {
    pub fn new(model: HmmVae, seed: u64) -> Self {
        let optimizer = Adam::new(model.config.learning_rate, model.params());
        Self {
            model,
            optimizer,
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xa11_9e5),
            pretrain_steps: 0,
            train_steps: 0,
        }
    }

    fn draw_batch(&mut self, corpus_len: usize) -> Vec<usize> {
        let b = self.model.config.batch_size.min(corpus_len);
        rand::seq::index::sample(&mut self.rng, corpus_len, b).into_vec()
    }

    /// One Adam step on the per-frame negative ELBO. On a non-finite loss or
    /// gradient the parameters are left untouched and an error returned.
    fn step(&mut self, feats: &[&Array2<f64>], aligns: &[&StateAlignment], step: usize) -> Result<f64> {
        let noise: Vec<Array2<f64>> = feats
            .iter()
            .map(|f| {
                Array2::from_shape_fn((f.nrows(), self.model.config.latent_dim), |_| {
                    StandardNormal.sample(&mut self.rng)
                })
            })
            .collect();
        let g = Graph::new();
        let (total, ..) = self.model.elbo_graph(&g, feats, aligns, Some(&noise))?;
        let frames: usize = feats.iter().map(|f| f.nrows()).sum();
        let loss = g.scalar(total) / frames as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("negative ELBO is {loss}"),
            });
        }
        let mut grads = g.backward(total);
        grads.scale(1.0 / frames as f64);
        if self.model.config.unit_transitions == UnitTransitions::Uniform {
            if let Some(g) = grads.get_mut(self.model.transition_logits) {
                for s in (STATES_PER_UNIT - 1..g.nrows()).step_by(STATES_PER_UNIT) {
                    g.row_mut(s).fill(0.0);
                }
            }
        }
        let norm = clip_grad_norm(&mut grads, self.model.config.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                message: "non-finite gradient".into(),
            });
        }
        self.optimizer.step(&mut self.model.store, &grads);
        Ok(loss)
    }

    /// Pseudo-supervised training against one fixed random alignment per
    /// utterance.
    pub fn pretrain(&mut self, corpus: &[LogMelSpectrogram], iterations: usize) -> Result<()> {
        check_corpus(corpus, self.model.config.feature_dim)?;
        let c = &self.model.config;
        let (units, lo, hi) = (c.units, c.min_duration, c.max_duration);
        let alignments: Vec<StateAlignment> = corpus
            .iter()
            .map(|f| sample_random_alignment(f.frames(), units, lo, hi, &mut self.rng))
            .collect();
        for _ in 0..iterations {
            let idx = self.draw_batch(corpus.len());
            let feats: Vec<&Array2<f64>> = idx.iter().map(|&i| &corpus[i].values).collect();
            let aligns: Vec<&StateAlignment> = idx.iter().map(|&i| &alignments[i]).collect();
            let step = self.pretrain_steps;
            let loss = self.guarded_step(&feats, &aligns, step)?;
            self.log.push(TrainRecord {
                step,
                phase: Phase::Pretrain,
                loss,
            });
            self.pretrain_steps += 1;
        }
        Ok(())
    }

    /// Viterbi re-alignment and one gradient step per batch.
    pub fn train(&mut self, corpus: &[LogMelSpectrogram], iterations: usize) -> Result<()> {
        check_corpus(corpus, self.model.config.feature_dim)?;
        for _ in 0..iterations {
            let idx = self.draw_batch(corpus.len());
            let hmm = self.model.hmm();
            let aligns: Vec<StateAlignment> = idx
                .par_iter()
                .map(|&i| {
                    let f = &corpus[i];
                    self.model
                        .encode(&f.values)
                        .and_then(|p| self.model.align_posterior(&p, &hmm))
                        .map_err(|e| Error::for_utterance(&f.utterance_id, e))
                })
                .collect::<Result<_>>()?;
            let feats: Vec<&Array2<f64>> = idx.iter().map(|&i| &corpus[i].values).collect();
            let refs: Vec<&StateAlignment> = aligns.iter().collect();
            let step = self.train_steps;
            let loss = self.guarded_step(&feats, &refs, step)?;
            self.log.push(TrainRecord {
                step,
                phase: Phase::Train,
                loss,
            });
            self.train_steps += 1;
        }
        Ok(())
    }

    fn guarded_step(&mut self, feats: &[&Array2<f64>], aligns: &[&StateAlignment], step: usize) -> Result<f64> {
        let backup = (self.model.store.clone(), self.optimizer.clone());
        match self.step(feats, aligns, step) {
            Ok(loss) if self.model.store.values().iter().all(|v| v.iter().all(|x| x.is_finite())) => Ok(loss),
            Ok(_) => {
                (self.model.store, self.optimizer) = backup;
                Err(Error::Diverged {
                    step,
                    message: "parameters became non-finite".into(),
                })
            }
            Err(e) => {
                (self.model.store, self.optimizer) = backup;
                Err(e)
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model
            .to_checkpoint(
                serde_json::json!({
                    "config": self.model.config,
                    "pretrain_steps": self.pretrain_steps,
                    "train_steps": self.train_steps,
                }),
                vec![("adam".into(), self.optimizer.clone())],
            )
            .save(path)
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let model = HmmVae::from_checkpoint(&ckpt)?;
        let mut t = Self::new(model, seed);
        let count = |k: &str| ckpt.meta.get(k).and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        t.pretrain_steps = count("pretrain_steps");
        t.train_steps = count("train_steps");
        if let Some((_, opt)) = ckpt.optimizers.into_iter().find(|(n, _)| n == "adam") {
            t.optimizer = opt;
        }
        Ok(t)
    }
}

fn check_corpus(corpus: &[LogMelSpectrogram], width: usize) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    for f in corpus {
        if f.width() != width || f.frames() == 0 {
            return Err(Error::for_utterance(
                &f.utterance_id,
                Error::Shape(format!("{} x {} features, expected width {width}", f.frames(), f.width())),
            ));
        }
    }
    Ok(())
}

/// Per-frame negative ELBO of the whole corpus at the posterior means, each
/// utterance aligned by [`HmmVae::align_posterior`].
pub fn corpus_loss(corpus: &[LogMelSpectrogram], model: &HmmVae) -> Result<f64> {
    check_corpus(corpus, model.config.feature_dim)?;
    let hmm = model.hmm();
    let totals: Vec<f64> = corpus
        .par_iter()
        .map(|f| {
            let post = model.encode(&f.values)?;
            let align = model.align_posterior(&post, &hmm)?;
            Ok(model.elbo(&[&f.values], &[&align])?.total)
        })
        .collect::<Result<_>>()?;
    let frames: usize = corpus.iter().map(|f| f.frames()).sum();
    Ok(totals.iter().sum::<f64>() / frames as f64)
}

/// Outcome of [`train_with_restarts`].
pub struct RestartSelection {
    pub trainer: HmmVaeTrainer,
    pub seed: u64,
    /// `(seed, corpus loss)` of every candidate, in input order.
    pub losses: Vec<(u64, f64)>,
}

/// Pretrains and trains one model per seed and keeps the one with the lowest
/// [`corpus_loss`]. Hard Viterbi training settles in local optima; restarts
/// ranked by the unsupervised objective are the usual way out.
pub fn train_with_restarts(
    config: &HmmVaeConfig,
    corpus: &[LogMelSpectrogram],
    seeds: &[u64],
    pretrain_iterations: usize,
    train_iterations: usize,
) -> Result<RestartSelection> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one restart seed is required".into()));
    }
    let mut candidates: Vec<(u64, f64, HmmVaeTrainer)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut trainer = HmmVaeTrainer::new(HmmVae::new(config.clone(), seed)?, seed);
            trainer.pretrain(corpus, pretrain_iterations)?;
            trainer.train(corpus, train_iterations)?;
            let loss = corpus_loss(corpus, &trainer.model)?;
            Ok((seed, loss, trainer))
        })
        .collect::<Result<_>>()?;
    let losses = candidates.iter().map(|(s, l, _)| (*s, *l)).collect();
    let best = (0..candidates.len())
        .min_by(|&a, &b| candidates[a].1.total_cmp(&candidates[b].1))
        .expect("non-empty");
    let (seed, _, trainer) = candidates.swap_remove(best);
    Ok(RestartSelection { trainer, seed, losses })
}

/// Viterbi unit transcription of every utterance, from posterior means.
pub fn decode_to_units(corpus: &[LogMelSpectrogram], model: &HmmVae) -> Result<Vec<AuTranscription>> {
    let hmm = model.hmm();
    corpus
        .par_iter()
        .map(|f| {
            model
                .encode(&f.values)
                .and_then(|post| viterbi_align(&post.means, &hmm))
                .map(|(align, _)| AuTranscription::from_states(&f.utterance_id, &align.states, HOP_SECONDS))
                .map_err(|e| Error::for_utterance(&f.utterance_id, e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assert_ne, proptest, ProptestConfig};

    #[test]
    fn topology_masks_shape() {
        let (t, i) = topology_masks(2);
        let allowed = |a: usize, b: usize| t[[a, b]] == 0.0;
        assert!(allowed(0, 0) && allowed(0, 1) && !allowed(0, 2) && !allowed(0, 3));
        assert!(allowed(2, 2) && allowed(2, 0) && allowed(2, 3) && !allowed(2, 1));
        assert!(!allowed(1, 0));
        assert_eq!(i.to_vec(), vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
    }

    #[test]
    fn fresh_model_rows_are_distributions() {
        let cfg = HmmVaeConfig {
            feature_dim: 4,
            latent_dim: 2,
            hidden: 3,
            units: 4,
            ..Default::default()
        };
        let hmm = HmmVae::new(cfg, 0).unwrap().hmm();
        assert_eq!(hmm.states(), 12);
        for row in hmm.log_transitions.rows() {
            assert_abs_diff_eq!(row.mapv(f64::exp).sum(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(hmm.log_initial.mapv(f64::exp).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_state_path_sums_emissions() {
        let e = array![[-1.0], [-2.5], [-0.25]];
        let (p, lp) = viterbi(&array![0.0], &array![[0.0]], &e).unwrap();
        assert_eq!(p, vec![0, 0, 0]);
        assert_eq!(lp, -3.75);
    }

    #[test]
    fn separated_states_switch_once() {
        let hmm = HmmParameters::new(
            array![[0.5f64.ln(), 0.5f64.ln()], [f64::NEG_INFINITY, 0.0]],
            array![0.0, f64::NEG_INFINITY],
            array![[-5.0], [5.0]],
            array![[0.0], [0.0]],
        )
        .unwrap();
        let x = array![[-5.1], [-4.9], [-5.0], [4.8], [5.2], [5.0]];
        let (a, _) = viterbi_align(&x, &hmm).unwrap();
        assert_eq!(a.states, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn viterbi_rejects_nan_and_dead_trellis() {
        assert!(viterbi(&array![0.0], &array![[0.0]], &array![[f64::NAN]]).is_err());
        let dead = viterbi(&array![f64::NEG_INFINITY], &array![[0.0]], &array![[0.0]]);
        assert!(dead.is_err());
        assert!(viterbi(&array![0.0], &array![[0.0]], &Array2::zeros((0, 1))).is_err());
    }

    /// Exhaustive search over every state path.
    fn brute_force(init: &Array1<f64>, trans: &Array2<f64>, e: &Array2<f64>) -> (Vec<usize>, f64) {
        let (t_len, n) = e.dim();
        let mut best = (vec![], f64::NEG_INFINITY);
        for code in 0..n.pow(t_len as u32) {
            let path: Vec<usize> = (0..t_len).map(|t| code / n.pow(t as u32) % n).collect();
            let mut s = init[path[0]] + e[[0, path[0]]];
            for t in 1..t_len {
                s += trans[[path[t - 1], path[t]]] + e[[t, path[t]]];
            }
            if s > best.1 {
                best = (path, s);
            }
        }
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn viterbi_matches_enumeration(seed in any::<u64>(), n in 1usize..=4, t in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logp = |rng: &mut ChaCha8Rng, k: usize| {
                let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| (x / s).ln()).collect::<Vec<_>>()
            };
            let init = Array1::from(logp(&mut rng, n));
            let trans = Array2::from_shape_vec((n, n), (0..n).flat_map(|_| logp(&mut rng, n)).collect()).unwrap();
            let e = Array2::from_shape_fn((t, n), |_| rng.gen_range(-5.0..0.0));
            let (p, lp) = viterbi(&init, &trans, &e).unwrap();
            let (bp, blp) = brute_force(&init, &trans, &e);
            prop_assert_eq!(p, bp);
            prop_assert!((lp - blp).abs() < 1e-8);
        }

        #[test]
        fn random_alignments_are_valid(seed in any::<u64>(), frames in 1usize..200, units in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = sample_random_alignment(frames, units, 5, 30, &mut rng);
            prop_assert_eq!(a.states.len(), frames);
            prop_assert!(a.validate(units).is_ok());
        }

        #[test]
        fn unit_segments_partition_frames(states in proptest::collection::vec(0usize..9, 1..60)) {
            let tr = AuTranscription::from_states("u", &states, 0.01);
            prop_assert_eq!(tr.units[0].start_frame, 0);
            prop_assert_eq!(tr.frames(), states.len());
            for w in tr.units.windows(2) {
                prop_assert_eq!(w[0].end_frame, w[1].start_frame);
                prop_assert_ne!(w[0].unit, w[1].unit);
            }
            let expected: Vec<usize> = states.iter().map(|s| s / 3).collect();
            prop_assert_eq!(tr.frame_units(), expected);
        }
    }

    #[test]
    fn equal_split_of_one_unit() {
        let a = expand_units::<ChaCha8Rng>(&[(0, 9)], Split::Equal);
        assert_eq!(a.states, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        let b = expand_units::<ChaCha8Rng>(&[(1, 4)], Split::Equal);
        assert_eq!(b.states, vec![3, 3, 4, 5]);
    }

    #[test]
    fn seeds_change_alignments() {
        let a = sample_random_alignment(300, 10, 5, 30, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sample_random_alignment(300, 10, 5, 30, &mut ChaCha8Rng::seed_from_u64(2));
        assert_ne!(a, b);
        assert!(a.validate(10).is_ok() && b.validate(10).is_ok());
    }

    #[test]
    fn invalid_alignment_detected() {
        assert!(StateAlignment { states: vec![1, 2] }.validate(2).is_err());
        assert!(StateAlignment { states: vec![0, 2] }.validate(2).is_err());
        assert!(StateAlignment { states: vec![0, 1, 2, 3] }.validate(2).is_ok());
    }

    #[test]
    fn decode_examples() {
        let t = AuTranscription::from_states("u", &[0, 1, 2, 3, 4, 5], 0.01);
        assert_eq!(
            t.units,
            vec![
                UnitSegment {
                    unit: 0,
                    start_frame: 0,
                    end_frame: 3
                },
                UnitSegment {
                    unit: 1,
                    start_frame: 3,
                    end_frame: 6
                }
            ]
        );
        let segs = t.to_segments();
        assert_abs_diff_eq!(segs[1].start, 0.03, epsilon = 1e-12);
        let one = AuTranscription::from_states("u", &[4; 7], 0.01);
        assert_eq!(one.units.len(), 1);
        assert_eq!(one.units[0].end_frame, 7);
    }

    fn tiny(units: usize) -> HmmVaeConfig {
        HmmVaeConfig {
            feature_dim: 3,
            latent_dim: 2,
            hidden: 4,
            units,
            activation: Activation::Tanh,
            ..Default::default()
        }
    }

    /// Sets the model so the decoder is the identity on the first latent
    /// columns; used to build exact toy cases.
    fn zero_network(m: &mut HmmVae) {
        for l in m.encoder.iter().chain(m.decoder.iter()) {
            for id in l.params() {
                m.store.value_mut(id).fill(0.0);
            }
        }
    }

    #[test]
    fn elbo_matches_hand_computation() {
        // T = 3, one unit (three states); zero networks make the posterior
        // N(b_mu, exp(b_lv)) at every frame and the reconstruction b_dec.
        let mut m = HmmVae::new(tiny(1), 3).unwrap();
        zero_network(&mut m);
        let enc_bias = m.encoder[1].params()[1];
        m.store.value_mut(enc_bias).assign(&array![[0.5, -1.0, 0.2, -0.4]]);
        let dec_bias = m.decoder[1].params()[1];
        m.store.value_mut(dec_bias).assign(&array![[1.0, 0.0, -1.0]]);
        let means = array![[0.0, 0.0], [1.0, -1.0], [0.5, 0.5]];
        let lvars = array![[0.0, 0.3], [-0.2, 0.0], [0.1, 0.1]];
        m.store.value_mut(m.state_means).assign(&means);
        m.store.value_mut(m.state_log_vars).assign(&lvars);
        let logits = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        m.store.value_mut(m.transition_logits).assign(&logits);

        let y = array![[0.0, 1.0, 2.0], [1.0, 1.0, 1.0], [-1.0, 0.0, 0.5]];
        let path = StateAlignment { states: vec![0, 1, 2] };
        let b = m.elbo(&[&y], &[&path]).unwrap();

        let rec: f64 = y.rows().into_iter().map(|r| {
            (r[0] - 1.0).powi(2) + r[1].powi(2) + (r[2] + 1.0).powi(2)
        }).sum::<f64>() / 2.0;
        let (mu, lv) = ([0.5, -1.0], [0.2, -0.4]);
        let mut kl = 0.0;
        for &k in &path.states {
            for d in 0..2 {
                let (mk, lk) = (means[[k, d]], lvars[[k, d]]);
                kl += 0.5 * (lk - lv[d] + (lv[d].exp() + (mu[d] - mk).powi(2)) / lk.exp() - 1.0);
            }
        }
        // within a unit: state 0 -> {0, 1}, state 1 -> {1, 2}
        let lse = |a: f64, b: f64| (a.exp() + b.exp()).ln();
        let trans = -(logits[[0, 1]] - lse(logits[[0, 0]], logits[[0, 1]]))
            - (logits[[1, 2]] - lse(logits[[1, 1]], logits[[1, 2]]));
        assert_abs_diff_eq!(b.reconstruction, rec, epsilon = 1e-10);
        assert_abs_diff_eq!(b.kl, kl, epsilon = 1e-10);
        assert_abs_diff_eq!(b.transition, trans, epsilon = 1e-10);
        assert_abs_diff_eq!(b.total, rec + kl + trans, epsilon = 1e-10);
    }

    #[test]
    fn matched_prior_leaves_constant_loss() {
        let mut m = HmmVae::new(tiny(1), 4).unwrap();
        zero_network(&mut m);
        let enc_bias = m.encoder[1].params()[1];
        m.store.value_mut(enc_bias).assign(&array![[0.3, 0.3, 0.0, 0.0]]);
        m.store.value_mut(m.state_means).fill(0.3);
        m.store.value_mut(m.state_log_vars).fill(0.0);
        // self loop only within a unit path 0,0,0: make transition 0->0 certain
        let mut logits = Array2::zeros((3, 3));
        logits[[0, 1]] = -1e4;
        m.store.value_mut(m.transition_logits).assign(&logits);
        let y = Array2::zeros((3, 3));
        let b = m.elbo(&[&y], &[&StateAlignment { states: vec![0, 0, 0] }]).unwrap();
        assert_abs_diff_eq!(b.total, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn observation_variance_scales_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let path = StateAlignment { states: vec![0, 0, 1, 2] };
        let a = HmmVae::new(tiny(1), 6).unwrap();
        let mut cfg = tiny(1);
        cfg.obs_variance = 2.0;
        let mut b = HmmVae::new(cfg, 6).unwrap();
        b.store = a.store.clone();
        let ea = a.elbo(&[&y], &[&path]).unwrap();
        let eb = b.elbo(&[&y], &[&path]).unwrap();
        assert_abs_diff_eq!(eb.reconstruction, ea.reconstruction / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eb.kl, ea.kl, epsilon = 1e-12);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let m = HmmVae::new(tiny(2), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-1.0..1.0));
        let path = sample_random_alignment(7, 2, 3, 4, &mut rng);
        let (_, grads) = m.elbo_gradients(&[&y], &[&path]).unwrap();
        let h = 1e-3;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for id in m.params() {
            let (r, c) = m.store.value(id).dim();
            for k in 0..3.min(r * c) {
                let idx = (k * 7 % r, k * 5 % c);
                let mut p = m.clone();
                p.store.value_mut(id)[idx] += h;
                let up = p.elbo(&[&y], &[&path]).unwrap().total;
                p.store.value_mut(id)[idx] -= 2.0 * h;
                let down = p.elbo(&[&y], &[&path]).unwrap().total;
                numeric.push((up - down) / (2.0 * h));
                analytic.push(grads.get(id).map_or(0.0, |g| g[idx]));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
    }

    #[test]
    fn rows_stay_normalized_through_training() {
        let cfg = HmmVaeConfig {
            batch_size: 2,
            learning_rate: 0.05,
            ..tiny(2)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let corpus: Vec<LogMelSpectrogram> = (0..3)
            .map(|i| {
                let v = Array2::from_shape_fn((20, 3), |_| rng.gen_range(-1.0..1.0));
                LogMelSpectrogram::new(v, 3, crate::features::Recipe::Aud).with_id(format!("u{i}"))
            })
            .collect();
        let mut t = HmmVaeTrainer::new(HmmVae::new(cfg, 1).unwrap(), 1);
        t.pretrain(&corpus, 5).unwrap();
        for _ in 0..5 {
            t.train(&corpus, 1).unwrap();
            for row in t.model.hmm().log_transitions.rows() {
                assert_abs_diff_eq!(row.mapv(f64::exp).sum(), 1.0, epsilon = 1e-8);
            }
        }
        assert!(t.log.iter().all(|r| r.loss.is_finite()));
        assert_eq!(t.log.len(), 10);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.ckpt");
        t.save(&p).unwrap();
        let back = HmmVaeTrainer::load(&p, 1).unwrap();
        assert_eq!(back.model, t.model);
        assert_eq!((back.pretrain_steps, back.train_steps), (5, 5));
        assert_eq!(HmmVae::load(&p).unwrap(), t.model);

        let tr = decode_to_units(&corpus, &t.model).unwrap();
        assert_eq!(tr.len(), 3);
        assert!(tr.iter().all(|x| x.frames() == 20));
    }

    #[test]
    fn training_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let corpus: Vec<LogMelSpectrogram> = (0..4)
            .map(|i| {
                let v = Array2::from_shape_fn((15, 3), |_| rng.gen_range(-1.0..1.0));
                LogMelSpectrogram::new(v, 3, crate::features::Recipe::Aud).with_id(format!("u{i}"))
            })
            .collect();
        let run = || {
            let mut t = HmmVaeTrainer::new(HmmVae::new(tiny(2), 3).unwrap(), 3);
            t.pretrain(&corpus, 3).unwrap();
            t.train(&corpus, 3).unwrap();
            t.log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let mut t = HmmVaeTrainer::new(HmmVae::new(tiny(1), 0).unwrap(), 0);
        let bad = LogMelSpectrogram::new(array![[f64::NAN, 0.0, 0.0], [0.0, 0.0, 0.0]], 3, crate::features::Recipe::Aud)
            .with_id("bad");
        let before = t.model.store.clone();
        assert!(matches!(t.pretrain(&[bad], 1), Err(Error::Diverged { .. })));
        assert_eq!(t.model.store, before);
    }

    fn tiny_corpus() -> Vec<LogMelSpectrogram> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..4)
            .map(|i| {
                let v = Array2::from_shape_fn((12, 3), |_| rng.gen_range(-1.0..1.0));
                LogMelSpectrogram::new(v, 3, crate::features::Recipe::Aud).with_id(format!("u{i}"))
            })
            .collect()
    }

    #[test]
    fn restarts_keep_the_lowest_corpus_loss() {
        let corpus = tiny_corpus();
        let picked = train_with_restarts(&tiny(2), &corpus, &[5, 6, 7], 2, 2).unwrap();
        assert_eq!(picked.losses.len(), 3);
        let best = picked.losses.iter().map(|&(_, l)| l).fold(f64::INFINITY, f64::min);
        let own = picked.losses.iter().find(|&&(s, _)| s == picked.seed).unwrap().1;
        assert_eq!(own, best);
        assert_abs_diff_eq!(corpus_loss(&corpus, &picked.trainer.model).unwrap(), best, epsilon = 1e-12);
    }

    #[test]
    fn restarts_need_a_seed() {
        assert!(train_with_restarts(&tiny(2), &tiny_corpus(), &[], 1, 1).is_err());
    }

    #[test]
    fn states_of_a_unit_start_together() {
        let model = HmmVae::new(tiny(2), 9).unwrap();
        let m = model.hmm().means;
        for u in 0..2 {
            for s in 1..STATES_PER_UNIT {
                let gap = (&m.row(u * STATES_PER_UNIT + s) - &m.row(u * STATES_PER_UNIT)).mapv(f64::abs);
                assert!(gap.iter().all(|&g| g < 10.0 * STATE_MEAN_JITTER));
            }
        }
    }
}

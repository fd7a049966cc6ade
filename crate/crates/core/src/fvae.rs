//! Factored VAE with an adversarial contrastive-predictive-coding critic.
//!
//! A convolutional content encoder maps normalized 80-band log-mel
//! (`T x 80`) to a pooled sequence of Gaussian posteriors (`M x D_c`,
//! `M = ceil(T / pooling)`). A style encoder followed by global average
//! pooling yields one style vector per utterance. The decoder upsamples the
//! content sequence back to `T` frames, appends the broadcast style vector
//! and predicts the input.
//!
//! A CPC encoder over the content sequence is trained to recognize which
//! utterance of a language-homogeneous batch a frame `tau` steps ahead
//! belongs to. The content encoder is trained to defeat it, which pushes
//! utterance-constant (style) information out of the content path.
//!
//! Updates alternate: one Adam step of the CPC encoder on `L_cpc`, then one
//! Adam step of content encoder, style encoder and decoder on
//! `L_rec + beta * L_kld - lambda * L_cpc`.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::features::{LogMelSpectrogram, VC_BANDS};
use crate::nn::{clip_grad_norm, Adam, Conv1d, ConvTranspose1d, Padding, ParamId, ParamStore};
use crate::{Error, Result, HOP_SECONDS};

/// KL weight.
pub const DEFAULT_BETA: f64 = 0.01;
/// Adversarial CPC weight.
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// CPC lookahead; one second targets utterance-constant attributes.
pub const DEFAULT_TAU_SECONDS: f64 = 1.0;

/// Nonlinearity between layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, g: &Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Architecture and loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvaeConfig {
    pub n_mels: usize,
    pub hidden: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub cpc_dim: usize,
    /// Kernel size of the content and style convolutions.
    pub kernel: usize,
    /// Kernel sizes of the CPC encoder (valid convolutions).
    pub cpc_kernels: Vec<usize>,
    /// Total temporal pooling of the content encoder.
    pub pooling: usize,
    pub activation: Activation,
    pub beta: f64,
    pub lambda: f64,
    pub tau_seconds: f64,
    pub hop_seconds: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
}

impl Default for FvaeConfig {
    fn default() -> Self {
        Self {
            n_mels: VC_BANDS,
            hidden: 256,
            content_dim: 64,
            style_dim: 256,
            cpc_dim: 64,
            kernel: 3,
            cpc_kernels: vec![4, 5],
            pooling: 2,
            activation: Activation::Relu,
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
            tau_seconds: DEFAULT_TAU_SECONDS,
            hop_seconds: HOP_SECONDS,
            learning_rate: 1e-4,
            grad_clip: 20.0,
        }
    }
}

impl FvaeConfig {
    /// Lookahead in content frames, rounded half up.
    pub fn tau_frames(&self) -> usize {
        (self.tau_seconds / (self.hop_seconds * self.pooling as f64) + 0.5).floor() as usize
    }

    /// Number of content frames seen by one CPC embedding.
    pub fn cpc_receptive_field(&self) -> usize {
        1 + self.cpc_kernels.iter().map(|k| k - 1).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return bad("beta and lambda must be non-negative");
        }
        if !(self.tau_seconds > 0.0) {
            return bad("tau must be positive");
        }
        if self.pooling == 0 || self.kernel == 0 || self.cpc_kernels.contains(&0) {
            return bad("pooling and kernel sizes must be positive");
        }
        if self.tau_frames() == 0 {
            return bad("tau rounds to zero content frames");
        }
        Ok(())
    }
}

/// Posterior statistics of the content embeddings of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentEmbeddingSequence {
    pub means: Array2<f64>,
    pub log_variances: Array2<f64>,
    pub frames_per_embedding: usize,
    /// Frame count `T` of the source features.
    pub source_frames: usize,
}

impl ContentEmbeddingSequence {
    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.nrows() == 0
    }

    /// Reparameterized sample `mean + exp(log_var / 2) * eps`.
    pub fn sample_with(&self, eps: &Array2<f64>) -> Array2<f64> {
        &self.means + &(self.log_variances.mapv(|v| (0.5 * v).exp()) * eps)
    }
}

/// Utterance-level style vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEmbedding {
    pub vector: Array1<f64>,
    pub utterance_id: String,
}

/// One CPC embedding per content frame inside the critic's receptive field.
#[derive(Debug, Clone, PartialEq)]
pub struct CpcEmbeddingSequence {
    pub vectors: Array2<f64>,
}

/// Loss terms of one FVAE update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kld: f64,
    pub cpc: f64,
    pub total: f64,
    /// False when no CPC term was available (all sequences too short or
    /// fewer than two utterances alive at every lookahead frame).
    pub cpc_valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layers {
    content: [Conv1d; 3],
    style: [Conv1d; 2],
    upsample: ConvTranspose1d,
    decoder: [Conv1d; 2],
}

/// Model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Fvae {
    pub config: FvaeConfig,
    pub store: ParamStore,
    layers: Layers,
    cpc: Vec<Conv1d>,
}

/// Graph handles produced by one forward pass over an utterance.
struct Forward {
    mean: Var,
    log_var: Var,
    content: Var,
    recon: Var,
}

impl Fvae {
    pub fn new(config: FvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let content = [
            Conv1d::new(&mut store, "content.0", c.n_mels, c.hidden, c.kernel, 1, Padding::Same, &mut rng),
            Conv1d::new(
                &mut store,
                "content.1",
                c.hidden,
                c.hidden,
                c.kernel.max(c.pooling),
                c.pooling,
                Padding::Same,
                &mut rng,
            ),
            Conv1d::new(&mut store, "content.out", c.hidden, 2 * c.content_dim, 1, 1, Padding::Same, &mut rng),
        ];
        let style = [
            Conv1d::new(&mut store, "style.0", c.n_mels, c.hidden, c.kernel, 1, Padding::Same, &mut rng),
            Conv1d::new(&mut store, "style.out", c.hidden, c.style_dim, c.kernel, 1, Padding::Same, &mut rng),
        ];
        let upsample = ConvTranspose1d::new(&mut store, "decoder.up", c.content_dim, c.hidden, c.pooling, &mut rng);
        let decoder = [
            Conv1d::new(
                &mut store,
                "decoder.0",
                c.hidden + c.style_dim,
                c.hidden,
                c.kernel,
                1,
                Padding::Same,
                &mut rng,
            ),
            Conv1d::new(&mut store, "decoder.out", c.hidden, c.n_mels, 1, 1, Padding::Same, &mut rng),
        ];
        let mut cpc = Vec::new();
        let mut inputs = c.content_dim;
        for (i, &k) in c.cpc_kernels.iter().enumerate() {
            cpc.push(Conv1d::new(&mut store, &format!("cpc.{i}"), inputs, c.cpc_dim, k, 1, Padding::Valid, &mut rng));
            inputs = c.cpc_dim;
        }
        Ok(Self {
            config,
            store,
            layers: Layers {
                content,
                style,
                upsample,
                decoder,
            },
            cpc,
        })
    }

    pub fn content_params(&self) -> Vec<ParamId> {
        self.layers.content.iter().flat_map(|l| l.params()).collect()
    }

    pub fn style_params(&self) -> Vec<ParamId> {
        self.layers.style.iter().flat_map(|l| l.params()).collect()
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        let mut p = self.layers.upsample.params().to_vec();
        p.extend(self.layers.decoder.iter().flat_map(|l| l.params()));
        p
    }

    pub fn cpc_params(&self) -> Vec<ParamId> {
        self.cpc.iter().flat_map(|l| l.params()).collect()
    }

    /// Content, style and decoder parameters (the FVAE update group).
    pub fn autoencoder_params(&self) -> Vec<ParamId> {
        let mut p = self.content_params();
        p.extend(self.style_params());
        p.extend(self.decoder_params());
        p
    }

    fn check_input(&self, feat: &Array2<f64>) -> Result<()> {
        if feat.ncols() != self.config.n_mels {
            return Err(Error::Shape(format!(
                "expected {} bands, got {}",
                self.config.n_mels,
                feat.ncols()
            )));
        }
        if feat.nrows() < self.config.pooling {
            return Err(Error::InvalidArgument(format!(
                "{} frames is fewer than the pooling factor {}",
                feat.nrows(),
                self.config.pooling
            )));
        }
        Ok(())
    }

    fn content_graph(&self, g: &Graph, x: Var) -> (Var, Var) {
        let act = self.config.activation;
        let [c0, c1, out] = &self.layers.content;
        let h = act.apply(g, c0.forward(g, &self.store, x));
        let h = act.apply(g, c1.forward(g, &self.store, h));
        let stats = out.forward(g, &self.store, h);
        let d = self.config.content_dim;
        (g.slice_cols(stats, 0, d), g.slice_cols(stats, d, d))
    }

    fn style_graph(&self, g: &Graph, x: Var) -> Var {
        let [s0, out] = &self.layers.style;
        let h = self.config.activation.apply(g, s0.forward(g, &self.store, x));
        g.mean_rows(out.forward(g, &self.store, h))
    }

    fn decoder_graph(&self, g: &Graph, content: Var, style: Var, frames: usize) -> Var {
        let act = self.config.activation;
        let up = act.apply(g, self.layers.upsample.forward(g, &self.store, content));
        let up = g.slice_rows(up, 0, frames);
        let style = g.broadcast_rows(style, frames);
        let h = g.concat_cols(&[up, style]);
        let [d0, out] = &self.layers.decoder;
        let h = act.apply(g, d0.forward(g, &self.store, h));
        out.forward(g, &self.store, h)
    }

    /// `None` when the sequence is shorter than the critic's receptive field.
    fn cpc_graph(&self, g: &Graph, content: Var) -> Option<Var> {
        let (m, _) = g.shape(content);
        if m < self.config.cpc_receptive_field() {
            return None;
        }
        let mut h = content;
        for (i, layer) in self.cpc.iter().enumerate() {
            h = layer.forward(g, &self.store, h);
            if i + 1 < self.cpc.len() {
                h = self.config.activation.apply(g, h);
            }
        }
        Some(h)
    }

    /// Posterior statistics of the content embeddings.
    pub fn encode_content(&self, feat: &Array2<f64>) -> Result<ContentEmbeddingSequence> {
        self.check_input(feat)?;
        let g = Graph::new();
        let (mean, log_var) = self.content_graph(&g, g.constant(feat.clone()));
        Ok(ContentEmbeddingSequence {
            means: g.value(mean),
            log_variances: g.value(log_var),
            frames_per_embedding: self.config.pooling,
            source_frames: feat.nrows(),
        })
    }

    /// Style vector of an utterance. Deterministic.
    pub fn encode_style(&self, feat: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_input(feat)?;
        let g = Graph::new();
        let s = self.style_graph(&g, g.constant(feat.clone()));
        Ok(g.value(s).index_axis_move(Axis(0), 0))
    }

    /// Reconstruction from content embeddings (`M x D_c`) and a style vector.
    pub fn decode(&self, content: &Array2<f64>, style: &Array1<f64>, frames: usize) -> Result<Array2<f64>> {
        if content.ncols() != self.config.content_dim {
            return Err(Error::Shape(format!(
                "content width {} != {}",
                content.ncols(),
                self.config.content_dim
            )));
        }
        if style.len() != self.config.style_dim {
            return Err(Error::Shape(format!("style length {} != {}", style.len(), self.config.style_dim)));
        }
        if frames > content.nrows() * self.config.pooling || frames + self.config.pooling <= content.nrows() * self.config.pooling {
            return Err(Error::Shape(format!(
                "{frames} frames cannot come from {} content embeddings at pooling {}",
                content.nrows(),
                self.config.pooling
            )));
        }
        let g = Graph::new();
        let s = g.constant(style.clone().insert_axis(Axis(0)));
        let y = self.decoder_graph(&g, g.constant(content.clone()), s, frames);
        Ok(g.value(y))
    }

    /// CPC embeddings of a content sequence.
    pub fn encode_cpc(&self, content: &Array2<f64>) -> Option<CpcEmbeddingSequence> {
        let g = Graph::new();
        let h = self.cpc_graph(&g, g.constant(content.clone()))?;
        Some(CpcEmbeddingSequence { vectors: g.value(h) })
    }

    /// `L_cpc` of a batch of content sequences (e.g. posterior means).
    pub fn cpc_loss(&self, contents: &[Array2<f64>]) -> Option<f64> {
        let g = Graph::new();
        let hs: Vec<Option<Var>> = contents
            .iter()
            .map(|c| self.cpc_graph(&g, g.constant(c.clone())))
            .collect();
        cpc_loss_graph(&g, &hs, self.config.tau_frames()).map(|v| g.scalar(v))
    }

    fn forward(&self, g: &Graph, feat: &Array2<f64>, eps: Option<&Array2<f64>>) -> Forward {
        let x = g.constant(feat.clone());
        let (mean, log_var) = self.content_graph(g, x);
        let content = match eps {
            Some(e) => g.add(mean, g.mul(g.exp(g.scale(log_var, 0.5)), g.constant(e.clone()))),
            None => mean,
        };
        let style = self.style_graph(g, x);
        let recon = self.decoder_graph(g, content, style, feat.nrows());
        Forward {
            mean,
            log_var,
            content,
            recon,
        }
    }

    fn draw_noise(&self, batch: &[LogMelSpectrogram], rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
        batch
            .iter()
            .map(|f| {
                let m = f.frames().div_ceil(self.config.pooling);
                Array2::from_shape_fn((m, self.config.content_dim), |_| StandardNormal.sample(rng))
            })
            .collect()
    }

    /// Builds the composite loss. Returns `(total, rec, kld, cpc)` handles.
    fn loss_graph(
        &self,
        g: &Graph,
        batch: &[LogMelSpectrogram],
        noise: Option<&[Array2<f64>]>,
    ) -> Result<(Var, Var, Var, Option<Var>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut recs = Vec::new();
        let mut klds = Vec::new();
        let mut hs = Vec::new();
        for (i, feat) in batch.iter().enumerate() {
            self.check_input(&feat.values)
                .map_err(|e| Error::for_utterance(&feat.utterance_id, e))?;
            let fw = self.forward(g, &feat.values, noise.map(|n| &n[i]));
            let t = feat.frames() as f64;
            let diff = g.sub(fw.recon, g.constant(feat.values.clone()));
            recs.push(g.scale(g.sum(g.square(diff)), 1.0 / t));
            klds.push(gaussian_kl_graph(g, fw.mean, fw.log_var));
            hs.push(self.cpc_graph(g, fw.content));
        }
        let n = batch.len() as f64;
        let rec = g.scale(g.sum(g.concat_cols(&recs)), 1.0 / n);
        let kld = g.scale(g.sum(g.concat_cols(&klds)), 1.0 / n);
        let cpc = cpc_loss_graph(g, &hs, self.config.tau_frames());
        let mut total = g.add(rec, g.scale(kld, self.config.beta));
        if let Some(c) = cpc {
            total = g.sub(total, g.scale(c, self.config.lambda));
        }
        Ok((total, rec, kld, cpc))
    }

    /// Loss terms without sampling (posterior means feed the decoder).
    pub fn compute_losses(&self, batch: &[LogMelSpectrogram]) -> Result<LossBreakdown> {
        let g = Graph::new();
        let (total, rec, kld, cpc) = self.loss_graph(&g, batch, None)?;
        breakdown(&g, batch, total, rec, kld, cpc)
    }

    /// Loss terms with explicit reparameterization noise per utterance.
    pub fn compute_losses_with_noise(
        &self,
        batch: &[LogMelSpectrogram],
        noise: &[Array2<f64>],
    ) -> Result<LossBreakdown> {
        let g = Graph::new();
        let (total, rec, kld, cpc) = self.loss_graph(&g, batch, Some(noise))?;
        breakdown(&g, batch, total, rec, kld, cpc)
    }

    /// Gradients of the composite FVAE loss (all parameters, no clipping).
    pub fn total_loss_gradients(
        &self,
        batch: &[LogMelSpectrogram],
        noise: Option<&[Array2<f64>]>,
    ) -> Result<(f64, Gradients)> {
        let g = Graph::new();
        let (total, ..) = self.loss_graph(&g, batch, noise)?;
        Ok((g.scalar(total), g.backward(total)))
    }

    /// `L_cpc` over the sampled contents of a batch and its gradients with
    /// respect to every parameter (content encoder and critic).
    pub fn cpc_loss_gradients(
        &self,
        batch: &[LogMelSpectrogram],
        noise: Option<&[Array2<f64>]>,
    ) -> Result<Option<(f64, Gradients)>> {
        let g = Graph::new();
        let mut hs = Vec::new();
        for (i, feat) in batch.iter().enumerate() {
            self.check_input(&feat.values)
                .map_err(|e| Error::for_utterance(&feat.utterance_id, e))?;
            let fw = self.forward(&g, &feat.values, noise.map(|n| &n[i]));
            hs.push(self.cpc_graph(&g, fw.content));
        }
        Ok(cpc_loss_graph(&g, &hs, self.config.tau_frames()).map(|l| (g.scalar(l), g.backward(l))))
    }

    /// `L_cpc` and critic gradients with the content sequences held fixed.
    pub fn critic_gradients(&self, contents: &[Array2<f64>]) -> Option<(f64, Gradients)> {
        let g = Graph::new();
        let hs: Vec<Option<Var>> = contents
            .iter()
            .map(|c| self.cpc_graph(&g, g.constant(c.clone())))
            .collect();
        let loss = cpc_loss_graph(&g, &hs, self.config.tau_frames())?;
        Some((g.scalar(loss), g.backward(loss)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(Vec::new()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        Self::from_checkpoint(&ckpt)
    }

    fn to_checkpoint(&self, optimizers: Vec<(String, Adam)>) -> Checkpoint {
        Checkpoint {
            kind: "fvae".into(),
            meta: serde_json::to_value(&self.config).expect("config serializes"),
            params: self.store.clone(),
            optimizers,
        }
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "fvae" {
            return Err(Error::Checkpoint(format!("expected an fvae checkpoint, found `{}`", ckpt.kind)));
        }
        let config: FvaeConfig = serde_json::from_value(ckpt.meta.clone())?;
        let mut model = Self::new(config, 0)?;
        ckpt.restore_into(&mut model.store)?;
        Ok(model)
    }
}

fn breakdown(
    g: &Graph,
    batch: &[LogMelSpectrogram],
    total: Var,
    rec: Var,
    kld: Var,
    cpc: Option<Var>,
) -> Result<LossBreakdown> {
    let out = LossBreakdown {
        rec: g.scalar(rec),
        kld: g.scalar(kld),
        cpc: cpc.map_or(0.0, |c| g.scalar(c)),
        total: g.scalar(total),
        cpc_valid: cpc.is_some(),
    };
    if [out.rec, out.kld, out.cpc, out.total].iter().any(|v| !v.is_finite()) {
        let ids: Vec<&str> = batch.iter().map(|f| f.utterance_id.as_str()).collect();
        return Err(Error::NonFinite(format!("FVAE loss in batch [{}]", ids.join(", "))));
    }
    Ok(out)
}

/// `(1/M) * sum_m KL(N(mean_m, exp(log_var_m)) || N(0, I))` as a `1 x 1` node.
fn gaussian_kl_graph(g: &Graph, mean: Var, log_var: Var) -> Var {
    let (m, _) = g.shape(mean);
    let terms = g.sub(g.add(g.square(mean), g.exp(log_var)), g.add_scalar(log_var, 1.0));
    g.scale(g.sum(terms), 0.5 / m as f64)
}

/// Closed-form `(1/M) * sum_m KL(q(c_m) || N(0, I))`.
pub fn gaussian_kl(means: &Array2<f64>, log_variances: &Array2<f64>) -> f64 {
    let m = means.nrows() as f64;
    ndarray::Zip::from(means)
        .and(log_variances)
        .fold(0.0, |acc, &mu, &lv| acc + 0.5 * (mu * mu + lv.exp() - lv - 1.0))
        / m
}

/// InfoNCE over lookahead `tau` with in-batch negatives.
///
/// For every utterance `i` and frame `t >= tau` with `h_i[t]` defined, the
/// score of candidate `j` is `h_j[t] . h_i[t - tau]` over all utterances `j`
/// whose sequence reaches `t`. The loss is the mean negative log-softmax of
/// the positive (`j == i`). Frames with fewer than two candidates are
/// skipped; `None` means no term remained.
fn cpc_loss_graph(g: &Graph, hs: &[Option<Var>], tau: usize) -> Option<Var> {
    let alive: Vec<(usize, Var)> = hs
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.map(|h| (i, h)))
        .collect();
    if alive.len() < 2 {
        return None;
    }
    let lens: Vec<usize> = alive.iter().map(|(_, h)| g.shape(*h).0).collect();
    let offsets: Vec<usize> = lens
        .iter()
        .scan(0, |acc, &l| {
            let o = *acc;
            *acc += l;
            Some(o)
        })
        .collect();
    let stacked = g.concat_rows(&alive.iter().map(|(_, h)| *h).collect::<Vec<_>>());
    let max_len = *lens.iter().max()?;
    let mut terms = Vec::new();
    for t in tau..max_len {
        let members: Vec<usize> = (0..alive.len()).filter(|&k| lens[k] > t).collect();
        if members.len() < 2 {
            continue;
        }
        let anchors = g.gather_rows(stacked, &members.iter().map(|&k| offsets[k] + t - tau).collect::<Vec<_>>());
        let candidates = g.gather_rows(stacked, &members.iter().map(|&k| offsets[k] + t).collect::<Vec<_>>());
        let scores = g.matmul(anchors, g.transpose(candidates));
        let ls = g.log_softmax_rows(scores);
        let diag: Vec<(usize, usize)> = (0..members.len()).map(|k| (k, k)).collect();
        terms.push(g.pick(ls, &diag));
    }
    if terms.is_empty() {
        return None;
    }
    let all = g.concat_cols(&terms);
    let count = g.shape(all).1 as f64;
    Some(g.scale(g.sum(all), -1.0 / count))
}

/// `L_cpc` over plain CPC embedding sequences.
pub fn cpc_loss_from_embeddings(hs: &[Array2<f64>], tau: usize) -> Option<f64> {
    let g = Graph::new();
    let vars: Vec<Option<Var>> = hs.iter().map(|h| Some(g.constant(h.clone()))).collect();
    cpc_loss_graph(&g, &vars, tau).map(|v| g.scalar(v))
}

/// Model plus optimizer state for the alternating adversarial updates.
#[derive(Debug, Clone)]
pub struct FvaeTrainer {
    pub model: Fvae,
    pub critic_opt: Adam,
    pub autoencoder_opt: Adam,
    rng: ChaCha8Rng,
    pub steps: u64,
}

impl FvaeTrainer {
    pub fn new(model: Fvae, seed: u64) -> Self {
        let lr = model.config.learning_rate;
        let critic_opt = Adam::new(lr, model.cpc_params());
        let autoencoder_opt = Adam::new(lr, model.autoencoder_params());
        Self {
            model,
            critic_opt,
            autoencoder_opt,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f0ae),
            steps: 0,
        }
    }

    /// One critic update followed by one autoencoder update on `batch`.
    ///
    /// Both updates see the same reparameterization noise. The returned
    /// breakdown is evaluated before the autoencoder update.
    pub fn training_step(&mut self, batch: &[LogMelSpectrogram]) -> Result<LossBreakdown> {
        let noise = self.model.draw_noise(batch, &mut self.rng);
        let contents: Vec<Array2<f64>> = batch
            .iter()
            .zip(&noise)
            .map(|(f, e)| self.model.encode_content(&f.values).map(|c| c.sample_with(e)))
            .collect::<Result<_>>()?;
        if self.critic_step(&contents).is_none() {
            log::warn!("batch has no valid CPC terms; critic step skipped");
        }
        self.autoencoder_step(batch, &noise)
    }

    /// Adam step of the CPC encoder minimizing `L_cpc` over fixed content
    /// sequences. Returns the loss before the update, or `None` when the
    /// batch has no CPC term.
    pub fn critic_step(&mut self, contents: &[Array2<f64>]) -> Option<f64> {
        let (loss, mut grads) = self.model.critic_gradients(contents)?;
        if !loss.is_finite() {
            return None;
        }
        grads.retain(self.critic_opt.params());
        clip_grad_norm(&mut grads, self.model.config.grad_clip);
        self.critic_opt.step(&mut self.model.store, &grads);
        Some(loss)
    }

    /// Adam step of content encoder, style encoder and decoder on
    /// `rec + beta * kld - lambda * cpc`, with the critic frozen.
    pub fn autoencoder_step(&mut self, batch: &[LogMelSpectrogram], noise: &[Array2<f64>]) -> Result<LossBreakdown> {
        let g = Graph::new();
        let (total, rec, kld, cpc) = self.model.loss_graph(&g, batch, Some(noise))?;
        let out = breakdown(&g, batch, total, rec, kld, cpc)?;
        let mut grads = g.backward(total);
        grads.retain(self.autoencoder_opt.params());
        let norm = clip_grad_norm(&mut grads, self.model.config.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step: self.steps as usize,
                message: "non-finite FVAE gradient".into(),
            });
        }
        self.autoencoder_opt.step(&mut self.model.store, &grads);
        self.steps += 1;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = self.model.to_checkpoint(vec![
            ("critic".into(), self.critic_opt.clone()),
            ("autoencoder".into(), self.autoencoder_opt.clone()),
        ]);
        ckpt.meta = serde_json::json!({
            "config": self.model.config,
            "steps": self.steps,
        });
        ckpt.save(path)
    }

    /// Resumes training state. The sampling stream restarts from `seed`.
    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let mut ckpt = Checkpoint::load(path)?;
        let steps = ckpt.meta.get("steps").and_then(|v| v.as_u64()).unwrap_or(0);
        if let Some(cfg) = ckpt.meta.get("config").cloned() {
            ckpt.meta = cfg;
        }
        let model = Fvae::from_checkpoint(&ckpt)?;
        let mut trainer = Self::new(model, seed);
        trainer.steps = steps;
        for (name, opt) in ckpt.optimizers {
            match name.as_str() {
                "critic" => trainer.critic_opt = opt,
                "autoencoder" => trainer.autoencoder_opt = opt,
                _ => {}
            }
        }
        Ok(trainer)
    }
}

/// Loads a model from either a bare model or a trainer checkpoint.
pub fn load_model(path: &Path) -> Result<Fvae> {
    let mut ckpt = Checkpoint::load(path)?;
    if let Some(cfg) = ckpt.meta.get("config").cloned() {
        ckpt.meta = cfg;
    }
    Fvae::from_checkpoint(&ckpt)
}

//! Evaluation of discovered units against reference phone alignments.
//!
//! Frame-level scores (normalized mutual information and cluster purity)
//! come from a unit-by-phone confusion matrix pooled over a corpus. Segment
//! boundaries are scored by an F-measure with a tolerance collar.
//!
//! Transcriptions in both directions use the time-marked segment format,
//! one segment per line: `utterance_id start_seconds duration_seconds label`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, HOP_SECONDS};

/// Collar for boundary matching, seconds.
pub const DEFAULT_COLLAR: f64 = 0.02;
/// Largest per-utterance frame count difference absorbed by truncation.
pub const MAX_LENGTH_MISMATCH: usize = 2;
/// Label assigned to frames whose center falls outside every segment.
pub const GAP_LABEL: &str = "<gap>";

/// Per-frame integer labels of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabelSequence {
    pub labels: Vec<usize>,
    pub utterance_id: String,
}

impl FrameLabelSequence {
    pub fn new(utterance_id: impl Into<String>, labels: Vec<usize>) -> Self {
        Self {
            labels,
            utterance_id: utterance_id.into(),
        }
    }
}

/// Unit-by-phone frame counts. Rows are hypothesis labels, columns reference
/// labels, both in ascending label order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub hyp_labels: Vec<usize>,
    pub ref_labels: Vec<usize>,
}

impl ConfusionMatrix {
    /// Matrix with labels `0..rows` and `0..cols`.
    pub fn from_counts(counts: Array2<u64>) -> Self {
        let (r, c) = counts.dim();
        Self {
            counts,
            hyp_labels: (0..r).collect(),
            ref_labels: (0..c).collect(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    fn check(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::InvalidArgument("confusion matrix is empty".into()));
        }
        Ok(n as f64)
    }
}

/// Pools frame-level co-occurrences of hypothesis and reference labels.
///
/// Utterances are paired by id. Length differences up to
/// [`MAX_LENGTH_MISMATCH`] frames are truncated to the shorter sequence.
pub fn frame_confusion(hyp: &[FrameLabelSequence], reference: &[FrameLabelSequence]) -> Result<ConfusionMatrix> {
    let refs: HashMap<&str, &FrameLabelSequence> =
        reference.iter().map(|r| (r.utterance_id.as_str(), r)).collect();
    let mut pairs: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for h in hyp {
        let r = refs.get(h.utterance_id.as_str()).ok_or_else(|| {
            Error::InvalidArgument(format!("no reference labels for utterance `{}`", h.utterance_id))
        })?;
        let (a, b) = (h.labels.len(), r.labels.len());
        if a.abs_diff(b) > MAX_LENGTH_MISMATCH {
            return Err(Error::for_utterance(
                &h.utterance_id,
                Error::Shape(format!("hypothesis has {a} frames, reference {b}")),
            ));
        }
        for (&u, &p) in h.labels.iter().zip(&r.labels) {
            *pairs.entry((u, p)).or_default() += 1;
        }
    }
    let mut hyp_labels: Vec<usize> = pairs.keys().map(|k| k.0).collect();
    hyp_labels.dedup();
    let mut ref_labels: Vec<usize> = pairs.keys().map(|k| k.1).collect();
    ref_labels.sort_unstable();
    ref_labels.dedup();
    let hi: HashMap<usize, usize> = hyp_labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let ri: HashMap<usize, usize> = ref_labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut counts = Array2::zeros((hyp_labels.len(), ref_labels.len()));
    for ((u, p), c) in pairs {
        counts[[hi[&u], ri[&p]]] = c;
    }
    Ok(ConfusionMatrix {
        counts,
        hyp_labels,
        ref_labels,
    })
}

fn entropy(marginal: impl Iterator<Item = u64>, n: f64) -> f64 {
    marginal
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Symmetric normalized mutual information in percent:
/// `200 * I(U;P) / (H(U) + H(P))`.
///
/// Two single-class labelings score 100.
pub fn nmi(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.check()?;
    let rows: Vec<u64> = cm.counts.rows().into_iter().map(|r| r.sum()).collect();
    let cols: Vec<u64> = cm.counts.columns().into_iter().map(|c| c.sum()).collect();
    let h_sum = entropy(rows.iter().copied(), n) + entropy(cols.iter().copied(), n);
    if h_sum <= 0.0 {
        return Ok(100.0);
    }
    let mut mi = 0.0;
    for ((u, p), &c) in cm.counts.indexed_iter() {
        if c > 0 {
            let c = c as f64;
            mi += c / n * (c * n / (rows[u] as f64 * cols[p] as f64)).ln();
        }
    }
    Ok((200.0 * mi / h_sum).clamp(0.0, 100.0))
}

/// Frame-weighted purity: `sum_u max_p counts[u][p] / N`.
pub fn cluster_purity(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.check()?;
    let hits: u64 = cm
        .counts
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(hits as f64 / n)
}

/// Fraction of frames on the diagonal after the best one-to-one relabeling
/// of hypothesis units to reference labels.
pub fn mapped_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.check()?;
    let (r, c) = cm.counts.dim();
    let size = r.max(c);
    let weights = Matrix::from_fn(size, size, |(i, j)| {
        if i < r && j < c {
            cm.counts[[i, j]] as i64
        } else {
            0
        }
    });
    let (total, _) = kuhn_munkres(&weights);
    Ok(total as f64 / n)
}

/// Boundary times of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub times: Vec<f64>,
    pub utterance_id: String,
    /// True when the first and last entries are the utterance start and end.
    pub includes_edges: bool,
}

impl BoundarySet {
    pub fn new(utterance_id: impl Into<String>, times: Vec<f64>, includes_edges: bool) -> Result<Self> {
        let utterance_id = utterance_id.into();
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::for_utterance(
                &utterance_id,
                Error::InvalidArgument("boundary times must be finite and strictly increasing".into()),
            ));
        }
        if includes_edges && times.len() < 2 {
            return Err(Error::for_utterance(
                &utterance_id,
                Error::InvalidArgument("a boundary set with edges needs a start and an end".into()),
            ));
        }
        Ok(Self {
            times,
            utterance_id,
            includes_edges,
        })
    }

    /// Boundaries of a segmentation: every segment start after the first,
    /// plus the outer start and end when `includes_edges`.
    pub fn from_segments(utterance_id: &str, segments: &[TimedSegment], includes_edges: bool) -> Result<Self> {
        let mut times: Vec<f64> = Vec::new();
        let mut push = |t: f64| {
            if times.last().is_none_or(|&l| t > l + 1e-9) {
                times.push(t);
            }
        };
        if let (Some(first), Some(last)) = (segments.first(), segments.last()) {
            if includes_edges {
                push(first.start);
            }
            for s in &segments[1..] {
                push(s.start);
            }
            if includes_edges {
                push(last.start + last.duration);
            }
        }
        Self::new(utterance_id, times, includes_edges)
    }

    fn scored(&self, include_edges: bool) -> &[f64] {
        if self.includes_edges && !include_edges {
            &self.times[1..self.times.len() - 1]
        } else {
            &self.times
        }
    }
}

/// One-to-one matching rule for boundary scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Matching {
    /// Largest possible number of pairs; symmetric in its two arguments.
    #[default]
    MaxCardinality,
    /// Each hypothesis boundary in time order takes the nearest unmatched
    /// reference boundary inside the collar.
    GreedyNearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryOptions {
    pub collar: f64,
    pub matching: Matching,
    pub include_edges: bool,
}

impl Default for BoundaryOptions {
    fn default() -> Self {
        Self {
            collar: DEFAULT_COLLAR,
            matching: Matching::MaxCardinality,
            include_edges: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub matches: usize,
    pub hyp_count: usize,
    pub ref_count: usize,
}

impl BoundaryScore {
    fn from_counts(matches: usize, hyp_count: usize, ref_count: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            precision: ratio(matches, hyp_count),
            recall: ratio(matches, ref_count),
            fscore: ratio(2 * matches, hyp_count + ref_count),
            matches,
            hyp_count,
            ref_count,
        }
    }
}

/// Number of matched pairs between two sorted boundary lists.
pub fn count_matches(hyp: &[f64], reference: &[f64], collar: f64, matching: Matching) -> usize {
    // Small slack so that boundaries exactly on the collar survive rounding.
    let collar = collar + 1e-9;
    match matching {
        Matching::MaxCardinality => {
            let (mut i, mut j, mut n) = (0, 0, 0);
            while i < hyp.len() && j < reference.len() {
                if (hyp[i] - reference[j]).abs() <= collar {
                    n += 1;
                    i += 1;
                    j += 1;
                } else if hyp[i] < reference[j] {
                    i += 1;
                } else {
                    j += 1;
                }
            }
            n
        }
        Matching::GreedyNearest => {
            let mut used = vec![false; reference.len()];
            let mut n = 0;
            for &h in hyp {
                let best = reference
                    .iter()
                    .enumerate()
                    .filter(|&(j, &r)| !used[j] && (h - r).abs() <= collar)
                    .min_by(|a, b| (h - a.1).abs().total_cmp(&(h - b.1).abs()));
                if let Some((j, _)) = best {
                    used[j] = true;
                    n += 1;
                }
            }
            n
        }
    }
}

/// Precision, recall and F-measure pooled over utterances paired by id.
pub fn boundary_fscore(hyp: &[BoundarySet], reference: &[BoundarySet], opts: &BoundaryOptions) -> Result<BoundaryScore> {
    let refs: HashMap<&str, &BoundarySet> = reference.iter().map(|r| (r.utterance_id.as_str(), r)).collect();
    if refs.len() != hyp.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypothesis and {} reference utterances",
            hyp.len(),
            refs.len()
        )));
    }
    let (mut m, mut nh, mut nr) = (0, 0, 0);
    for h in hyp {
        let r = refs
            .get(h.utterance_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no reference boundaries for `{}`", h.utterance_id)))?;
        let (hs, rs) = (h.scored(opts.include_edges), r.scored(opts.include_edges));
        m += count_matches(hs, rs, opts.collar, opts.matching);
        nh += hs.len();
        nr += rs.len();
    }
    Ok(BoundaryScore::from_counts(m, nh, nr))
}

/// One line of a time-marked transcription.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedSegment {
    pub start: f64,
    pub duration: f64,
    pub label: String,
}

/// Segments per utterance, in time order.
pub type Transcriptions = BTreeMap<String, Vec<TimedSegment>>;

pub fn parse_transcriptions(text: &str, origin: &Path) -> Result<Transcriptions> {
    let mut out: Transcriptions = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("`{s}` is not a number")));
        let (start, duration) = (num(f[1])?, num(f[2])?);
        if !(start >= 0.0) || !(duration > 0.0) {
            return Err(err("segment start must be >= 0 and duration > 0".into()));
        }
        out.entry(f[0].to_string()).or_default().push(TimedSegment {
            start,
            duration,
            label: f[3].to_string(),
        });
    }
    for segs in out.values_mut() {
        segs.sort_by(|a, b| a.start.total_cmp(&b.start));
    }
    Ok(out)
}

pub fn read_transcriptions(path: &Path) -> Result<Transcriptions> {
    parse_transcriptions(&std::fs::read_to_string(path)?, path)
}

pub fn format_transcriptions(t: &Transcriptions) -> String {
    let mut s = String::new();
    for (id, segs) in t {
        for seg in segs {
            writeln!(s, "{id} {:.2} {:.2} {}", seg.start, seg.duration, seg.label).expect("writing to a String");
        }
    }
    s
}

pub fn write_transcriptions(path: &Path, t: &Transcriptions) -> Result<()> {
    std::fs::write(path, format_transcriptions(t))?;
    Ok(())
}

/// Maps string labels to dense integers, in order of first appearance.
#[derive(Debug, Clone, Default)]
pub struct LabelIndex {
    ids: HashMap<String, usize>,
}

impl LabelIndex {
    pub fn id(&mut self, label: &str) -> usize {
        let next = self.ids.len();
        *self.ids.entry(label.to_string()).or_insert(next)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Samples the active segment at each frame center `(i + 0.5) * hop`.
///
/// `frames` defaults to the number of whole frames up to the end of the last
/// segment. Frames outside every segment get [`GAP_LABEL`].
pub fn frame_labels(
    utterance_id: &str,
    segments: &[TimedSegment],
    frames: Option<usize>,
    hop: f64,
    index: &mut LabelIndex,
) -> FrameLabelSequence {
    let end = segments.iter().map(|s| s.start + s.duration).fold(0.0, f64::max);
    let n = frames.unwrap_or(((end / hop) + 1e-6).floor() as usize);
    let mut labels = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        let center = (i as f64 + 0.5) * hop;
        while k < segments.len() && segments[k].start + segments[k].duration <= center {
            k += 1;
        }
        let label = match segments.get(k) {
            Some(s) if s.start <= center => s.label.as_str(),
            _ => GAP_LABEL,
        };
        labels.push(index.id(label));
    }
    FrameLabelSequence::new(utterance_id, labels)
}

/// Corpus-level scores of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub nmi: f64,
    pub purity: f64,
    pub boundary: BoundaryScore,
    pub frames: u64,
}

/// Scores a hypothesis transcription against a reference transcription.
///
/// Every hypothesis utterance must have a reference. Utterances only present
/// in the reference are ignored with a warning.
pub fn evaluate(hyp: &Transcriptions, reference: &Transcriptions, opts: &BoundaryOptions) -> Result<Evaluation> {
    let mut hyp_index = LabelIndex::default();
    let mut ref_index = LabelIndex::default();
    let mut hyp_frames = Vec::new();
    let mut ref_frames = Vec::new();
    let mut hyp_bounds = Vec::new();
    let mut ref_bounds = Vec::new();
    for (id, hsegs) in hyp {
        let rsegs = reference
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no reference transcription for `{id}`")))?;
        hyp_frames.push(frame_labels(id, hsegs, None, HOP_SECONDS, &mut hyp_index));
        ref_frames.push(frame_labels(id, rsegs, None, HOP_SECONDS, &mut ref_index));
        hyp_bounds.push(BoundarySet::from_segments(id, hsegs, true)?);
        ref_bounds.push(BoundarySet::from_segments(id, rsegs, true)?);
    }
    let skipped = reference.keys().filter(|k| !hyp.contains_key(*k)).count();
    if skipped > 0 {
        log::warn!("{skipped} reference utterances have no hypothesis and are not scored");
    }
    let cm = frame_confusion(&hyp_frames, &ref_frames)?;
    Ok(Evaluation {
        nmi: nmi(&cm)?,
        purity: cluster_purity(&cm)?,
        boundary: boundary_fscore(&hyp_bounds, &ref_bounds, opts)?,
        frames: cm.total(),
    })
}

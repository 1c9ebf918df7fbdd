//! Audio encoder, CTC head, greedy CTC paths, and prompt compression.

use crate::autodiff::{Graph, Tensor, Var};
use crate::ctc::{self, PrefixScorer};
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{positional_encoding, AttentionMask, Block, ConvSubsample, LayerConfig, LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::vocab::BLANK;

/// Acoustic frames of one utterance, `[T × feat_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    pub utt_id: String,
    frames: Tensor,
}

impl AudioFeatures {
    pub fn new(utt_id: impl Into<String>, frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || frames.shape()[0] == 0 || frames.shape()[1] == 0 {
            return Err(Error::InvalidInput {
                what: "audio features",
                reason: format!("expected [T >= 1, feat_dim >= 1], got {:?}", frames.shape()),
            });
        }
        if !frames.is_finite() {
            return Err(Error::InvalidInput {
                what: "audio features",
                reason: "non-finite value".into(),
            });
        }
        Ok(Self {
            utt_id: utt_id.into(),
            frames,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Encoded frames `[T' × model_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    features: Tensor,
}

impl EncoderOutput {
    pub fn new(features: Tensor) -> Self {
        Self { features }
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Per-frame log distribution over blank (class 0) and the symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPosterior {
    log_probs: Tensor,
}

impl CtcPosterior {
    pub fn new(log_probs: Tensor) -> Result<Self> {
        if log_probs.shape().len() != 2 || log_probs.shape()[1] < 2 {
            return Err(Error::InvalidInput {
                what: "CTC posterior",
                reason: format!("expected [frames, classes >= 2], got {:?}", log_probs.shape()),
            });
        }
        Ok(Self { log_probs })
    }

    /// Normalizes arbitrary per-frame scores into log probabilities.
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let mut lp = logits;
        if lp.shape().len() == 2 {
            let c = lp.shape()[1];
            if c > 0 {
                lp.data_mut().chunks_mut(c).for_each(kernels::log_softmax_in_place);
            }
        }
        Self::new(lp)
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }

    pub fn frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.log_probs.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.log_probs.row(t)
    }

    /// `−log P(target | posterior)`.
    pub fn loss(&self, target: &[usize]) -> Result<f64> {
        ctc::ctc_nll(self.log_probs.data(), self.frames(), self.n_classes(), target, BLANK)
    }

    pub fn prefix_scorer(&self) -> PrefixScorer {
        PrefixScorer::new(self.log_probs.data().to_vec(), self.frames(), self.n_classes(), BLANK)
    }

    /// Log probability that the CTC output begins with `prefix`.
    pub fn prefix_score(&self, prefix: &[usize]) -> f64 {
        self.prefix_scorer().prefix_score(prefix)
    }
}

/// Per-frame argmax labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreedyPath(Vec<usize>);

impl GreedyPath {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of non-blank frames.
    pub fn tau(&self) -> usize {
        self.0.iter().filter(|&&l| l != BLANK).count()
    }

    pub fn kept_frames(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&t| self.0[t] != BLANK).collect()
    }

    /// Maximal runs of one repeated non-blank label, as `(start, end)` ranges.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut t = 0;
        while t < self.0.len() {
            let label = self.0[t];
            let start = t;
            while t < self.0.len() && self.0[t] == label {
                t += 1;
            }
            if label != BLANK {
                runs.push((start, t));
            }
        }
        runs
    }
}

pub fn greedy_path(p: &CtcPosterior) -> GreedyPath {
    GreedyPath((0..p.frames()).map(|t| kernels::argmax(p.row(t))).collect())
}

/// Collapses repeats, then drops blanks.
pub fn ctc_greedy_decode(path: &GreedyPath) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path.labels() {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

fn check_alignment(g: &Graph, h: Var, path: &GreedyPath) -> Result<usize> {
    let shape = g.shape(h);
    if shape.len() != 2 || shape[0] != path.len() {
        return Err(Error::ShapeMismatch {
            op: "compress",
            lhs: shape.to_vec(),
            rhs: vec![path.len()],
        });
    }
    Ok(shape[0])
}

/// Keeps the rows of `h` whose label is not blank. The selection itself is a
/// constant; gradients reach the kept rows only.
pub fn remove_blank_frames(g: &mut Graph, h: Var, path: &GreedyPath) -> Result<Var> {
    check_alignment(g, h, path)?;
    g.embedding(h, &path.kept_frames())
}

/// `[runs × T']` matrix whose rows average the frames of one label run.
pub fn averaging_matrix(path: &GreedyPath) -> Tensor {
    let runs = path.runs();
    let n = path.len();
    let mut data = vec![0.0; runs.len() * n];
    for (r, &(start, end)) in runs.iter().enumerate() {
        let w = 1.0 / (end - start) as f64;
        data[r * n + start..r * n + end].fill(w);
    }
    Tensor::from_parts(vec![runs.len(), n], data)
}

/// Mean-pools each run of one repeated non-blank label into a single row.
pub fn average_runs(g: &mut Graph, h: Var, path: &GreedyPath) -> Result<Var> {
    check_alignment(g, h, path)?;
    let a = g.constant(averaging_matrix(path));
    g.matmul(a, h)
}

pub fn compress_remove(h: &EncoderOutput, path: &GreedyPath) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv = g.constant(h.features.clone());
    let out = remove_blank_frames(&mut g, hv, path)?;
    Ok(g.value(out).clone())
}

pub fn compress_average(h: &EncoderOutput, path: &GreedyPath) -> Result<Tensor> {
    let mut g = Graph::new();
    let hv = g.constant(h.features.clone());
    let out = average_runs(&mut g, hv, path)?;
    Ok(g.value(out).clone())
}

/// Extra strided convolution over encoder frames (kernel = stride = factor).
#[derive(Clone, Debug)]
pub struct Downsampler {
    pub weight: ParamId,
    pub bias: ParamId,
    pub factor: usize,
}

impl Downsampler {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidConfig("downsample factor must be at least 1".into()));
        }
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                init.glorot_shaped(&[factor, dim, dim], factor * dim, dim),
            ),
            bias: store.add(format!("{name}.bias"), init.zeros(&[dim])),
            factor,
        })
    }

    pub fn output_len(&self, frames: usize) -> usize {
        frames / self.factor
    }

    pub fn forward(&self, s: &mut Session, h: Var) -> Result<Var> {
        let t = s.graph.shape(h)[0];
        if t < self.factor {
            return Err(Error::InputTooShort {
                what: "compress_downsample",
                len: t,
                field: self.factor,
            });
        }
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.conv1d(h, w, self.factor)?;
        s.graph.add(y, b)
    }
}

pub fn compress_downsample(store: &ParamStore, down: &Downsampler, h: &EncoderOutput) -> Result<Tensor> {
    let mut s = Session::inference(store);
    let hv = s.constant(h.features.clone());
    let out = down.forward(&mut s, hv)?;
    Ok(s.value(out).clone())
}

/// Subsampling front end, positional encoding, and a stack of full-context
/// blocks with optional convolution modules.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub subsample: ConvSubsample,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub model_dim: usize,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        feat_dim: usize,
        rate: usize,
        cfg: &LayerConfig,
        conv_kernel: Option<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(k) = conv_kernel {
            if k % 2 == 0 {
                return Err(Error::InvalidConfig(format!("conv kernel must be odd, got {k}")));
            }
        }
        let d = cfg.model_dim;
        let subsample = ConvSubsample::new(store, init, &format!("{name}.subsample"), feat_dim, d, rate)?;
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(store, init, &format!("{name}.block{i}"), cfg, conv_kernel))
            .collect();
        let norm = LayerNorm::new(store, init, &format!("{name}.norm"), d);
        Ok(Self {
            subsample,
            blocks,
            norm,
            model_dim: d,
        })
    }

    pub fn output_len(&self, frames: usize) -> usize {
        self.subsample.output_len(frames)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.subsample.forward(s, x)?;
        let t = s.graph.shape(h)[0];
        let pe = s.constant(positional_encoding(t, self.model_dim));
        let mut h = s.graph.add(h, pe)?;
        let mask = AttentionMask::full(t, t);
        for block in &self.blocks {
            h = block.forward(s, h, &mask)?;
        }
        self.norm.forward(s, h)
    }
}

/// Keeps initial posteriors close to uniform. With full-gain weights the
/// blank class can start near zero everywhere and never take over frames.
const CTC_HEAD_GAIN: f64 = 0.1;

/// Linear projection to `|V| + 1` classes followed by log-softmax.
#[derive(Clone, Debug)]
pub struct CtcHead {
    pub proj: Linear,
}

impl CtcHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, classes: usize) -> Self {
        Self {
            proj: Linear::with_gain(store, init, name, dim, classes, CTC_HEAD_GAIN),
        }
    }

    pub fn forward(&self, s: &mut Session, h: Var) -> Result<Var> {
        let logits = self.proj.forward(s, h)?;
        s.graph.log_softmax(logits)
    }
}

//! The full recognizer (encoder, CTC head, prompt map, decoder) and the
//! external language model used for shallow fusion.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tensor, Var};
use crate::decoder::{Context, Decoder, DecoderState, PromptSequence};
use crate::encoder::{
    average_runs, greedy_path, remove_blank_frames, AudioFeatures, CtcHead, CtcPosterior, Downsampler, Encoder,
    EncoderOutput, GreedyPath,
};
use crate::error::{Error, Result};
use crate::layers::{LayerConfig, Linear};
use crate::params::{Init, ParamStore, Session};
use crate::vocab::Vocab;

/// How encoder frames become prompt frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Compression {
    /// Drop frames whose greedy label is blank.
    Remove,
    /// Mean-pool runs of one repeated label, dropping blank runs.
    Average,
    /// Strided convolution by a fixed factor; no CTC involvement.
    Downsample(usize),
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Compression::Remove => f.write_str("remove"),
            Compression::Average => f.write_str("average"),
            Compression::Downsample(k) => write!(f, "downsample{k}"),
        }
    }
}

impl FromStr for Compression {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remove" => Ok(Compression::Remove),
            "average" => Ok(Compression::Average),
            _ => s
                .strip_prefix("downsample")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k >= 1)
                .map(Compression::Downsample)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown compression `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub vocab_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub subsample: usize,
    /// Depthwise kernel of the encoder convolution modules; `None` disables them.
    pub conv_kernel: Option<usize>,
    pub compression: Compression,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 80,
            vocab_size: 27,
            model_dim: 256,
            heads: 4,
            ff_dim: 2048,
            encoder_blocks: 12,
            decoder_blocks: 6,
            subsample: 4,
            conv_kernel: Some(15),
            compression: Compression::Remove,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn encoder_layers(&self) -> LayerConfig {
        LayerConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            blocks: self.encoder_blocks,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn decoder_layers(&self) -> LayerConfig {
        LayerConfig {
            blocks: self.decoder_blocks,
            ..self.encoder_layers()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 {
            return Err(Error::InvalidConfig("feat_dim must be positive".into()));
        }
        Vocab::new(self.vocab_size)?;
        self.encoder_layers().validate()
    }
}

/// Everything the decoder needs from one utterance at inference time.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub encoded: EncoderOutput,
    pub posterior: CtcPosterior,
    pub path: GreedyPath,
    pub prompt: PromptSequence,
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub ctc_head: CtcHead,
    pub downsampler: Option<Downsampler>,
    pub prompt_map: Linear,
    pub decoder: Decoder,
}

impl AsrModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(config.vocab_size)?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = config.model_dim;
        let encoder = Encoder::new(
            &mut store,
            &mut init,
            "encoder",
            config.feat_dim,
            config.subsample,
            &config.encoder_layers(),
            config.conv_kernel,
        )?;
        let ctc_head = CtcHead::new(&mut store, &mut init, "ctc", d, vocab.n_classes());
        let downsampler = match config.compression {
            Compression::Downsample(k) => Some(Downsampler::new(&mut store, &mut init, "downsample", d, k)?),
            _ => None,
        };
        let prompt_map = Linear::new(&mut store, &mut init, "prompt_map", d, d);
        let decoder = Decoder::new(&mut store, &mut init, "decoder", &config.decoder_layers(), vocab)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            ctc_head,
            downsampler,
            prompt_map,
            decoder,
        })
    }

    /// Sets the prompt map to the identity.
    pub fn set_prompt_map_identity(&mut self) {
        let d = self.config.model_dim;
        let mut w = vec![0.0; d * d];
        (0..d).for_each(|i| w[i * d + i] = 1.0);
        self.store.get_mut(self.prompt_map.weight).data_mut().copy_from_slice(&w);
        self.store.get_mut(self.prompt_map.bias).data_mut().fill(0.0);
    }

    fn check_features(&self, x: &AudioFeatures) -> Result<()> {
        if x.feat_dim() != self.config.feat_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: x.frames().shape().to_vec(),
                rhs: vec![self.config.feat_dim],
            });
        }
        Ok(())
    }

    /// Graph-level encoder pass.
    pub fn encode_var(&self, s: &mut Session, x: &AudioFeatures) -> Result<Var> {
        self.check_features(x)?;
        let xv = s.constant(x.frames().clone());
        self.encoder.forward(s, xv)
    }

    /// Graph-level prompt frames (before the prompt map).
    pub fn compress_var(&self, s: &mut Session, h: Var, path: &GreedyPath) -> Result<Var> {
        match (self.config.compression, &self.downsampler) {
            (Compression::Remove, _) => remove_blank_frames(&mut s.graph, h, path),
            (Compression::Average, _) => average_runs(&mut s.graph, h, path),
            (Compression::Downsample(_), Some(down)) => down.forward(s, h),
            (Compression::Downsample(_), None) => unreachable!("downsampler is built with the model"),
        }
    }

    /// Graph-level prompt map; `None` for an empty prompt.
    pub fn map_prompt_var(&self, s: &mut Session, frames: Var) -> Result<Option<Var>> {
        if s.graph.shape(frames)[0] == 0 {
            return Ok(None);
        }
        self.prompt_map.forward(s, frames).map(Some)
    }

    pub fn encode(&self, x: &AudioFeatures) -> Result<EncoderOutput> {
        let mut s = Session::inference(&self.store);
        let h = self.encode_var(&mut s, x)?;
        Ok(EncoderOutput::new(s.value(h).clone()))
    }

    pub fn ctc_posteriors(&self, h: &EncoderOutput) -> Result<CtcPosterior> {
        let mut s = Session::inference(&self.store);
        let hv = s.constant(h.features().clone());
        let lp = self.ctc_head.forward(&mut s, hv)?;
        CtcPosterior::new(s.value(lp).clone())
    }

    /// Prompt frames under the configured compression.
    pub fn compress(&self, h: &EncoderOutput, path: &GreedyPath) -> Result<Tensor> {
        let mut s = Session::inference(&self.store);
        let hv = s.constant(h.features().clone());
        let out = self.compress_var(&mut s, hv, path)?;
        Ok(s.value(out).clone())
    }

    pub fn map_prompt(&self, frames: &Tensor) -> Result<PromptSequence> {
        if frames.shape().len() != 2 || frames.shape()[1] != self.config.model_dim {
            return Err(Error::ShapeMismatch {
                op: "map_prompt",
                lhs: frames.shape().to_vec(),
                rhs: vec![self.config.model_dim],
            });
        }
        let mut s = Session::inference(&self.store);
        let fv = s.constant(frames.clone());
        match self.map_prompt_var(&mut s, fv)? {
            Some(p) => PromptSequence::new(s.value(p).clone()),
            None => Ok(PromptSequence::empty(self.config.model_dim)),
        }
    }

    /// Encoder, CTC, compression, and prompt map for one utterance.
    pub fn prepare(&self, x: &AudioFeatures) -> Result<Prepared> {
        let encoded = self.encode(x)?;
        let posterior = self.ctc_posteriors(&encoded)?;
        let path = greedy_path(&posterior);
        let prompt = self.map_prompt(&self.compress(&encoded, &path)?)?;
        Ok(Prepared {
            encoded,
            posterior,
            path,
            prompt,
        })
    }

    /// Every encoder frame mapped into the prompt space, without compression.
    pub fn uncompressed_prompt(&self, h: &EncoderOutput) -> Result<PromptSequence> {
        self.map_prompt(h.features())
    }

    fn prompt_context(&self, s: &mut Session, prompt: &PromptSequence) -> Context {
        if prompt.is_empty() {
            Context::Prompted(None)
        } else {
            Context::Prompted(Some(s.constant(prompt.embeddings().clone())))
        }
    }

    /// Next-token distribution after `[<aud>, prompt, prefix]`, recomputed in full.
    pub fn next_token_logprobs(&self, prompt: &PromptSequence, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.store);
        let ctx = self.prompt_context(&mut s, prompt);
        let (lp, _) = self.decoder.forward(&mut s, ctx, prefix)?;
        let rows = s.value(lp).rows();
        Ok(s.value(lp).row(rows - 1).to_vec())
    }

    /// `log p(y | prompt)` for `y = [y1, …, yI, <eos>]`.
    pub fn sequence_logprob(&self, prompt: &PromptSequence, y: &[usize]) -> Result<f64> {
        let body = split_eos(&self.vocab, y)?;
        let mut s = Session::inference(&self.store);
        let ctx = self.prompt_context(&mut s, prompt);
        let nll = self.decoder.token_nll(&mut s, ctx, body)?;
        Ok(-s.value(nll).item())
    }

    /// The decoder as a plain LM on `[<sos>, tokens]`.
    pub fn lm_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.store);
        let (lp, _) = self.decoder.forward(&mut s, Context::Lm, prefix)?;
        let rows = s.value(lp).rows();
        Ok(s.value(lp).row(rows - 1).to_vec())
    }

    pub fn start(&self, prompt: &PromptSequence) -> Result<DecoderState> {
        self.decoder.start_prompted(&self.store, prompt)
    }

    pub fn advance(&self, state: &mut DecoderState, token: usize) -> Result<()> {
        self.decoder.advance(&self.store, state, token)
    }
}

/// Splits `[y1, …, yI, <eos>]` into its body.
pub fn split_eos<'a>(vocab: &Vocab, y: &'a [usize]) -> Result<&'a [usize]> {
    match y.split_last() {
        Some((&last, body)) if last == vocab.eos() => {
            vocab.check_body(body)?;
            Ok(body)
        }
        _ => Err(Error::InvalidTokens("sequence must end with <eos>".into())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub blocks: usize,
}

impl LmConfig {
    pub fn layers(&self) -> LayerConfig {
        LayerConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            ff_dim: self.ff_dim,
            blocks: self.blocks,
            dropout_rate: 0.0,
        }
    }
}

/// A prompt-free decoder trained on text only.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub decoder: Decoder,
}

impl LanguageModel {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        let vocab = Vocab::new(config.vocab_size)?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let decoder = Decoder::new(&mut store, &mut init, "lm", &config.layers(), vocab)?;
        Ok(Self {
            config,
            vocab,
            store,
            decoder,
        })
    }

    pub fn lm_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.store);
        let (lp, _) = self.decoder.forward(&mut s, Context::Lm, prefix)?;
        let rows = s.value(lp).rows();
        Ok(s.value(lp).row(rows - 1).to_vec())
    }

    /// `log p(body, <eos>)`.
    pub fn sentence_logprob(&self, body: &[usize]) -> Result<f64> {
        self.decoder
            .score_incremental(&self.store, self.decoder.start_lm(&self.store), body)
    }

    pub fn start(&self) -> DecoderState {
        self.decoder.start_lm(&self.store)
    }

    pub fn advance(&self, state: &mut DecoderState, token: usize) -> Result<()> {
        self.decoder.advance(&self.store, state, token)
    }
}

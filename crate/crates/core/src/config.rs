//! Line-oriented `key = value` run configuration.
//!
//! Every key has a default, so a file only lists what it overrides. Blank
//! lines and `#` comments are ignored; unknown keys are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::decoding::FusionWeights;
use crate::error::{Error, Result};
use crate::model::{Compression, ModelConfig};
use crate::training::{LmTrainConfig, Schedule, TrainConfig};

/// All settings of one CLI workflow. Data-determined sizes (feature
/// dimension, vocabulary) are taken from the data at train time.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub lm: LmTrainConfig,
    pub decode: FusionWeights,
    /// Seconds of audio per input frame.
    pub frame_shift: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            lm: LmTrainConfig::default(),
            decode: FusionWeights::default(),
            frame_shift: 0.01,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("{key} = {value}: {e}")))
}

/// `none` maps to `None`.
fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn parse_split(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once(':')
        .ok_or_else(|| Error::InvalidConfig(format!("{key} = {value}: expected `a:b`")))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn parse_schedule(key: &str, value: &str) -> Result<Schedule> {
    match value.split_once(':') {
        None if value == "joint" => Ok(Schedule::Joint),
        Some(("pretrain", n)) => Ok(Schedule::PretrainFinetune {
            pretrain_steps: parse(key, n.trim())?,
        }),
        _ => Err(Error::InvalidConfig(format!(
            "{key} = {value}: expected `joint` or `pretrain:<steps>`"
        ))),
    }
}

fn show_schedule(s: &Schedule) -> String {
    match s {
        Schedule::Joint => "joint".into(),
        Schedule::PretrainFinetune { pretrain_steps } => format!("pretrain:{pretrain_steps}"),
    }
}

/// Splits configuration text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Model architecture entries. `dims` adds the data-determined sizes.
pub fn model_entries(m: &ModelConfig, dims: bool) -> Vec<(&'static str, String)> {
    let mut e = Vec::new();
    if dims {
        e.push(("model.feat_dim", m.feat_dim.to_string()));
        e.push(("model.vocab_size", m.vocab_size.to_string()));
    }
    e.extend([
        ("model.model_dim", m.model_dim.to_string()),
        ("model.heads", m.heads.to_string()),
        ("model.ff_dim", m.ff_dim.to_string()),
        ("model.encoder_blocks", m.encoder_blocks.to_string()),
        ("model.decoder_blocks", m.decoder_blocks.to_string()),
        ("model.subsample", m.subsample.to_string()),
        ("model.conv_kernel", show_opt(&m.conv_kernel)),
        ("model.compression", m.compression.to_string()),
        ("model.dropout_rate", m.dropout_rate.to_string()),
    ]);
    e
}

/// Applies one `model.*` entry; `Ok(false)` if the key is not a model key.
pub fn set_model(m: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "model.feat_dim" => m.feat_dim = parse(key, v)?,
        "model.vocab_size" => m.vocab_size = parse(key, v)?,
        "model.model_dim" => m.model_dim = parse(key, v)?,
        "model.heads" => m.heads = parse(key, v)?,
        "model.ff_dim" => m.ff_dim = parse(key, v)?,
        "model.encoder_blocks" => m.encoder_blocks = parse(key, v)?,
        "model.decoder_blocks" => m.decoder_blocks = parse(key, v)?,
        "model.subsample" => m.subsample = parse(key, v)?,
        "model.conv_kernel" => m.conv_kernel = parse_opt(key, v)?,
        "model.compression" => m.compression = parse::<Compression>(key, v)?,
        "model.dropout_rate" => m.dropout_rate = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// LM architecture entries; `dims` adds the vocabulary size.
pub fn lm_entries(c: &LmTrainConfig, dims: bool) -> Vec<(&'static str, String)> {
    let mut e = Vec::new();
    if dims {
        e.push(("lm.vocab_size", c.lm.vocab_size.to_string()));
    }
    e.extend([
        ("lm.model_dim", c.lm.model_dim.to_string()),
        ("lm.heads", c.lm.heads.to_string()),
        ("lm.ff_dim", c.lm.ff_dim.to_string()),
        ("lm.blocks", c.lm.blocks.to_string()),
        ("lm.steps", c.steps.to_string()),
        ("lm.batch_size", c.batch_size.to_string()),
        ("lm.warmup_steps", c.warmup_steps.to_string()),
        ("lm.noam_scale", c.noam_scale.to_string()),
        ("lm.heldout_fraction", c.heldout_fraction.to_string()),
    ]);
    e
}

pub fn set_lm(c: &mut LmTrainConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "lm.vocab_size" => c.lm.vocab_size = parse(key, v)?,
        "lm.model_dim" => c.lm.model_dim = parse(key, v)?,
        "lm.heads" => c.lm.heads = parse(key, v)?,
        "lm.ff_dim" => c.lm.ff_dim = parse(key, v)?,
        "lm.blocks" => c.lm.blocks = parse(key, v)?,
        "lm.steps" => c.steps = parse(key, v)?,
        "lm.batch_size" => c.batch_size = parse(key, v)?,
        "lm.warmup_steps" => c.warmup_steps = parse(key, v)?,
        "lm.noam_scale" => c.noam_scale = parse(key, v)?,
        "lm.heldout_fraction" => c.heldout_fraction = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Desk-scale preset for the synthetic corpus: a two-block encoder and
    /// decoder at width 32 that train in minutes on one CPU core.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.model.model_dim = 32;
        cfg.model.heads = 4;
        cfg.model.ff_dim = 64;
        cfg.model.encoder_blocks = 2;
        cfg.model.decoder_blocks = 2;
        cfg.model.conv_kernel = Some(5);
        cfg.train.batch_size = 16;
        cfg.train.steps = 2000;
        cfg.train.warmup_steps = 200;
        cfg.train.noam_scale = 1.0;
        cfg.lm.lm.model_dim = 32;
        cfg.lm.lm.heads = 4;
        cfg.lm.lm.ff_dim = 64;
        cfg.lm.lm.blocks = 2;
        cfg.lm.steps = 1000;
        cfg.lm.batch_size = 32;
        cfg.lm.warmup_steps = 200;
        cfg.lm.noam_scale = 1.0;
        cfg
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.train;
        let w = &self.decode;
        let mut e = vec![
            ("data.vocab_size", d.vocab_size.to_string()),
            ("data.feat_dim", d.feat_dim.to_string()),
            ("data.frames_mean", d.frames_mean.to_string()),
            ("data.frames_std", d.frames_std.to_string()),
            ("data.noise_std", d.noise_std.to_string()),
            ("data.n_utts", d.n_utts.to_string()),
            ("data.n_test", d.n_test.to_string()),
            ("data.text_multiplier", d.text_multiplier.to_string()),
            ("data.lexicon_size", d.lexicon_size.to_string()),
            ("data.min_words", d.min_words.to_string()),
            ("data.max_words", d.max_words.to_string()),
            ("data.edge_silence", d.edge_silence.to_string()),
            ("data.pause_mean", d.pause_mean.to_string()),
        ];
        e.extend(model_entries(&self.model, false));
        e.extend([
            ("train.lambda", t.lambda.to_string()),
            ("train.theta", show_opt(&t.theta)),
            ("train.lm_batch_fraction", t.lm_batch_fraction.to_string()),
            ("train.pseudo_split", format!("{}:{}", t.pseudo_split.0, t.pseudo_split.1)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.warmup_steps", t.warmup_steps.to_string()),
            ("train.noam_scale", t.noam_scale.to_string()),
            ("train.adam_beta1", t.adam_beta1.to_string()),
            ("train.adam_beta2", t.adam_beta2.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.grad_clip", show_opt(&t.grad_clip)),
            ("train.schedule", show_schedule(&t.schedule)),
        ]);
        e.extend(lm_entries(&self.lm, false));
        e.extend([
            ("decode.ctc_weight", w.ctc_weight.to_string()),
            ("decode.lm_weight", w.lm_weight.to_string()),
            ("decode.length_penalty", w.length_penalty.to_string()),
            ("decode.beam", w.beam.to_string()),
            ("decode.nbest", w.nbest.to_string()),
            ("decode.max_len", show_opt(&w.max_len)),
            ("profile.frame_shift", self.frame_shift.to_string()),
        ]);
        e
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if set_model(&mut self.model, key, v)? || set_lm(&mut self.lm, key, v)? {
            return Ok(());
        }
        let d = &mut self.data;
        let t = &mut self.train;
        let w = &mut self.decode;
        match key {
            "data.vocab_size" => d.vocab_size = parse(key, v)?,
            "data.feat_dim" => d.feat_dim = parse(key, v)?,
            "data.frames_mean" => d.frames_mean = parse(key, v)?,
            "data.frames_std" => d.frames_std = parse(key, v)?,
            "data.noise_std" => d.noise_std = parse(key, v)?,
            "data.n_utts" => d.n_utts = parse(key, v)?,
            "data.n_test" => d.n_test = parse(key, v)?,
            "data.text_multiplier" => d.text_multiplier = parse(key, v)?,
            "data.lexicon_size" => d.lexicon_size = parse(key, v)?,
            "data.min_words" => d.min_words = parse(key, v)?,
            "data.max_words" => d.max_words = parse(key, v)?,
            "data.edge_silence" => d.edge_silence = parse(key, v)?,
            "data.pause_mean" => d.pause_mean = parse(key, v)?,
            "train.lambda" => t.lambda = parse(key, v)?,
            "train.theta" => t.theta = parse_opt(key, v)?,
            "train.lm_batch_fraction" => t.lm_batch_fraction = parse(key, v)?,
            "train.pseudo_split" => t.pseudo_split = parse_split(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.warmup_steps" => t.warmup_steps = parse(key, v)?,
            "train.noam_scale" => t.noam_scale = parse(key, v)?,
            "train.adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "train.adam_eps" => t.adam_eps = parse(key, v)?,
            "train.grad_clip" => t.grad_clip = parse_opt(key, v)?,
            "train.schedule" => t.schedule = parse_schedule(key, v)?,
            "decode.ctc_weight" => w.ctc_weight = parse(key, v)?,
            "decode.lm_weight" => w.lm_weight = parse(key, v)?,
            "decode.length_penalty" => w.length_penalty = parse(key, v)?,
            "decode.beam" => w.beam = parse(key, v)?,
            "decode.nbest" => w.nbest = parse(key, v)?,
            "decode.max_len" => w.max_len = parse_opt(key, v)?,
            "profile.frame_shift" => self.frame_shift = parse(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the entries of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)
                .map_err(|e| Error::InvalidConfig(format!("line {line}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, in hex.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks every section. Data-determined model sizes are not checked.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.encoder_layers().validate()?;
        self.model.decoder_layers().validate()?;
        if self.model.subsample != 2 && self.model.subsample != 4 {
            return Err(Error::InvalidConfig("model.subsample must be 2 or 4".into()));
        }
        self.train.validate()?;
        self.lm.validate()?;
        self.decode.validate()?;
        if !(self.frame_shift > 0.0) {
            return Err(Error::InvalidConfig("profile.frame_shift must be positive".into()));
        }
        Ok(())
    }

    /// Points every seeded component at `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self.lm.seed = seed;
        self
    }
}

//! Character tokenizer and the synthetic speech-like corpus.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Maps characters to symbol ids `1..=n` in alphabet order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    symbols: Vec<char>,
    vocab: Vocab,
}

impl Tokenizer {
    pub fn new(alphabet: &str) -> Result<Self> {
        let symbols: Vec<char> = alphabet.chars().collect();
        for (i, c) in symbols.iter().enumerate() {
            if c.is_control() {
                return Err(Error::InvalidConfig(format!("alphabet contains control character {c:?}")));
            }
            if symbols[..i].contains(c) {
                return Err(Error::InvalidConfig(format!("alphabet repeats {c:?}")));
            }
        }
        let vocab = Vocab::new(symbols.len())?;
        Ok(Self { symbols, vocab })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn alphabet(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.symbols
                    .iter()
                    .position(|&s| s == c)
                    .map(|i| i + 1)
                    .ok_or(Error::OutOfVocabulary(c))
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                if self.vocab.is_symbol(t) {
                    Ok(self.symbols[t - 1])
                } else {
                    Err(Error::InvalidTokens(format!("token {t} is not a character")))
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Symbols including the word separator.
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub frames_mean: f64,
    pub frames_std: f64,
    pub noise_std: f64,
    pub n_utts: usize,
    pub text_multiplier: usize,
    pub lexicon_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Silence frames added before and after each utterance.
    pub edge_silence: usize,
    /// Mean silence frames after each word separator.
    pub pause_mean: f64,
    /// Held-out paired utterances, drawn after the training material.
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            feat_dim: 16,
            frames_mean: 6.0,
            frames_std: 1.0,
            noise_std: 1.0,
            n_utts: 400,
            text_multiplier: 9,
            lexicon_size: 24,
            min_words: 2,
            max_words: 4,
            edge_silence: 24,
            pause_mean: 20.0,
            n_test: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be at least 2".into()));
        }
        if self.vocab_size > 27 {
            return Err(Error::InvalidConfig("vocab_size must be at most 27".into()));
        }
        if !(self.frames_mean >= 2.0) || !(self.frames_std >= 0.0) || !(self.noise_std >= 0.0)
            || !(self.pause_mean >= 0.0)
        {
            return Err(Error::InvalidConfig("frames_mean >= 2 and non-negative spreads required".into()));
        }
        if self.feat_dim == 0 || self.lexicon_size == 0 {
            return Err(Error::InvalidConfig("feat_dim and lexicon_size must be positive".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::InvalidConfig("need 1 <= min_words <= max_words".into()));
        }
        Ok(())
    }

    /// Space followed by the first `vocab_size − 1` lowercase letters.
    pub fn alphabet(&self) -> String {
        std::iter::once(' ')
            .chain(('a'..='z').take(self.vocab_size - 1))
            .collect()
    }
}

/// One rendered utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub text: String,
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub alphabet: String,
    /// Row `k` renders symbol `k`; row 0 is silence.
    pub templates: Tensor,
    pub lexicon: Vec<String>,
    pub pairs: Vec<SynthUtterance>,
    /// Held-out utterances from the same sources.
    pub test: Vec<SynthUtterance>,
    /// `(id, text)` records drawn from the same sentence distribution.
    pub texts: Vec<(String, String)>,
}

/// Word-bigram sentence source over a random lexicon. Words never contain a
/// doubled letter, so adjacent frames of distinct symbols always differ.
struct Grammar {
    lexicon: Vec<String>,
    successors: Vec<Vec<usize>>,
    min_words: usize,
    max_words: usize,
}

const SUCCESSOR_WEIGHTS: [f64; 3] = [0.6, 0.3, 0.1];

impl Grammar {
    fn new(cfg: &SynthConfig, letters: &[char], rng: &mut ChaCha8Rng) -> Self {
        let mut lexicon: Vec<String> = Vec::with_capacity(cfg.lexicon_size);
        let mut attempts = 0;
        while lexicon.len() < cfg.lexicon_size {
            let len = if letters.len() < 2 { 1 } else { rng.random_range(2..=4) };
            let mut word = String::new();
            let mut prev = None;
            for _ in 0..len {
                let c = loop {
                    let c = *letters.choose(rng).expect("at least one letter");
                    if Some(c) != prev {
                        break c;
                    }
                };
                word.push(c);
                prev = Some(c);
            }
            attempts += 1;
            // tiny alphabets cannot supply enough distinct words
            if !lexicon.contains(&word) || attempts > 1000 {
                lexicon.push(word);
            }
        }
        let successors = (0..lexicon.len())
            .map(|_| {
                (0..SUCCESSOR_WEIGHTS.len())
                    .map(|_| rng.random_range(0..lexicon.len()))
                    .collect()
            })
            .collect();
        Self {
            lexicon,
            successors,
            min_words: cfg.min_words,
            max_words: cfg.max_words,
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> String {
        let n = rng.random_range(self.min_words..=self.max_words);
        let mut word = rng.random_range(0..self.lexicon.len());
        let mut words = vec![self.lexicon[word].as_str()];
        for _ in 1..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.successors[word].len() - 1;
            for (i, w) in SUCCESSOR_WEIGHTS.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            word = self.successors[word][pick];
            words.push(self.lexicon[word].as_str());
        }
        words.join(" ")
    }
}

/// Token id of the space character.
const SEPARATOR: usize = 1;

/// Renders each symbol as `k ≥ 2` noisy copies of its template.
fn render(
    tokens: &[usize],
    templates: &Tensor,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let d = cfg.feat_dim;
    let frames_dist = Normal::new(cfg.frames_mean, cfg.frames_std).expect("valid spread");
    let noise = Normal::new(0.0, cfg.noise_std).expect("valid noise");
    let mut data = Vec::new();
    let emit = |row: usize, k: usize, data: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        for _ in 0..k {
            for &v in templates.row(row) {
                data.push(v + noise.sample(rng));
            }
        }
    };
    emit(0, cfg.edge_silence, &mut data, rng);
    for &tok in tokens {
        let k = frames_dist.sample(rng).round().max(2.0) as usize;
        emit(tok, k, &mut data, rng);
        if tok == SEPARATOR && cfg.pause_mean > 0.0 {
            let pause = (cfg.pause_mean + cfg.frames_std * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .round()
                .max(0.0) as usize;
            emit(0, pause, &mut data, rng);
        }
    }
    emit(0, cfg.edge_silence, &mut data, rng);
    let t = data.len() / d;
    Tensor::new(vec![t, d], data).expect("consistent frame size")
}

/// Generates `n_utts` paired utterances and `n_utts × text_multiplier`
/// text-only sentences; deterministic per seed.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let alphabet = cfg.alphabet();
    let tokenizer = Tokenizer::new(&alphabet)?;
    let letters: Vec<char> = alphabet.chars().skip(1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grammar = Grammar::new(cfg, &letters, &mut rng);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rows = cfg.vocab_size + 1;
    let mut tdata: Vec<f64> = (0..rows * cfg.feat_dim).map(|_| std_normal.sample(&mut rng)).collect();
    // silence sits at the origin
    tdata[..cfg.feat_dim].fill(0.0);
    let templates = Tensor::new(vec![rows, cfg.feat_dim], tdata)?;

    let utterance = |id: String, rng: &mut ChaCha8Rng| -> Result<SynthUtterance> {
        let text = grammar.sentence(rng);
        let tokens = tokenizer.tokenize(&text)?;
        let features = render(&tokens, &templates, cfg, rng);
        Ok(SynthUtterance { id, text, features })
    };
    let pairs = (0..cfg.n_utts)
        .map(|i| utterance(format!("utt{i:05}"), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let texts = (0..cfg.n_utts * cfg.text_multiplier)
        .map(|i| (format!("txt{i:06}"), grammar.sentence(&mut rng)))
        .collect();
    let test = (0..cfg.n_test)
        .map(|i| utterance(format!("test{i:05}"), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus {
        alphabet,
        templates,
        lexicon: grammar.lexicon,
        pairs,
        test,
        texts,
    })
}

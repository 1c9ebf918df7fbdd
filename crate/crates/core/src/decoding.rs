//! Label-synchronous beam search with CTC prefix and external-LM fusion, word
//! error rate, and decoding cost profiles.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;

use crate::ctc::PrefixState;
use crate::decoder::{DecoderState, PromptSequence};
use crate::encoder::{ctc_greedy_decode, AudioFeatures, CtcPosterior};
use crate::error::{Error, Result};
use crate::model::{AsrModel, LanguageModel};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub ctc_weight: f64,
    pub lm_weight: f64,
    /// Added once per emitted symbol; positive values reward length.
    pub length_penalty: f64,
    /// `usize::MAX` keeps every hypothesis.
    pub beam: usize,
    pub nbest: usize,
    /// Overrides the default cap of `2·(τ + 5)` symbols.
    pub max_len: Option<usize>,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            ctc_weight: 0.4,
            lm_weight: 0.6,
            length_penalty: 1.0,
            beam: 10,
            nbest: 10,
            max_len: None,
        }
    }
}

impl FusionWeights {
    /// Decoder score only.
    pub fn unfused(beam: usize) -> Self {
        Self {
            ctc_weight: 0.0,
            lm_weight: 0.0,
            length_penalty: 0.0,
            beam,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.nbest == 0 {
            return Err(Error::InvalidConfig("beam and nbest must be at least 1".into()));
        }
        if self.ctc_weight < 0.0 || self.lm_weight < 0.0 {
            return Err(Error::InvalidConfig("fusion weights must be non-negative".into()));
        }
        Ok(())
    }

    /// `decoder + ctc_weight·ctc + lm_weight·lm + length_penalty·len`; a zero
    /// weight drops its term even when the score is `−∞`.
    pub fn combine(&self, decoder: f64, ctc: f64, lm: f64, len: usize) -> f64 {
        let term = |w: f64, s: f64| if w == 0.0 { 0.0 } else { w * s };
        decoder + term(self.ctc_weight, ctc) + term(self.lm_weight, lm) + self.length_penalty * len as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Transcript symbols, without `<sos>` or `<eos>`.
    pub tokens: Vec<usize>,
    pub decoder_score: f64,
    pub ctc_prefix_score: f64,
    pub lm_score: f64,
    pub combined: f64,
    pub finished: bool,
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: BeamHypothesis,
    /// Finished hypotheses, best first.
    pub nbest: Vec<BeamHypothesis>,
    /// Decoder key reads spent on this utterance.
    pub key_reads: u64,
}

struct Live {
    hyp: BeamHypothesis,
    dec: DecoderState,
    ctc: PrefixState,
    lm: Option<DecoderState>,
}

struct Candidate {
    parent: usize,
    /// `None` for `<eos>`.
    symbol: Option<usize>,
    hyp: BeamHypothesis,
    ctc: Option<PrefixState>,
}

/// Orders by combined score (higher first), then by token ids in
/// lexicographic order with `<eos>` encoded by its id.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis, eos: usize) -> Ordering {
    b.combined.total_cmp(&a.combined).then_with(|| {
        let key = |h: &BeamHypothesis| {
            let mut k = h.tokens.clone();
            if h.finished {
                k.push(eos);
            }
            k
        };
        key(a).cmp(&key(b))
    })
}

/// Label-synchronous beam search. A hypothesis finishes only by emitting
/// `<eos>`; unfinished ones are scored with the CTC prefix probability,
/// finished ones with the probability of the complete labelling.
pub fn beam_search(
    model: &AsrModel,
    prompt: &PromptSequence,
    posterior: &CtcPosterior,
    lm: Option<&LanguageModel>,
    weights: &FusionWeights,
) -> Result<BeamResult> {
    weights.validate()?;
    if posterior.n_classes() != model.vocab.n_classes() {
        return Err(Error::ShapeMismatch {
            op: "beam_search",
            lhs: vec![posterior.frames(), posterior.n_classes()],
            rhs: vec![model.vocab.n_classes()],
        });
    }
    if let Some(lm) = lm {
        if lm.vocab != model.vocab {
            return Err(Error::InvalidConfig("external LM vocabulary differs from the model".into()));
        }
    }
    let eos = model.vocab.eos();
    let n_symbols = model.vocab.n_symbols();
    let max_len = weights.max_len.unwrap_or(2 * (prompt.len() + 5));
    let scorer = posterior.prefix_scorer();
    let use_lm = lm.filter(|_| weights.lm_weight != 0.0);

    let dec = model.start(prompt)?;
    let mut key_reads = dec.key_reads();
    let root = BeamHypothesis {
        tokens: Vec::new(),
        decoder_score: 0.0,
        ctc_prefix_score: 0.0,
        lm_score: 0.0,
        combined: 0.0,
        finished: false,
    };
    let mut live = vec![Live {
        hyp: root,
        dec,
        ctc: scorer.initial(),
        lm: use_lm.map(LanguageModel::start),
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();

    while !live.is_empty() {
        let mut candidates = Vec::new();
        for (p, l) in live.iter().enumerate() {
            let dec_lp = l.dec.log_probs();
            let lm_lp = l.lm.as_ref().map(DecoderState::log_probs);
            let len = l.hyp.tokens.len();
            // <eos>
            let dec_score = l.hyp.decoder_score + dec_lp[0];
            let ctc_score = if weights.ctc_weight == 0.0 { 0.0 } else { scorer.full(&l.ctc) };
            let lm_score = l.hyp.lm_score + lm_lp.map_or(0.0, |lp| lp[0]);
            candidates.push(Candidate {
                parent: p,
                symbol: None,
                hyp: BeamHypothesis {
                    tokens: l.hyp.tokens.clone(),
                    decoder_score: dec_score,
                    ctc_prefix_score: ctc_score,
                    lm_score,
                    combined: weights.combine(dec_score, ctc_score, lm_score, len),
                    finished: true,
                },
                ctc: None,
            });
            if len >= max_len {
                continue;
            }
            for sym in 1..=n_symbols {
                let dec_score = l.hyp.decoder_score + dec_lp[sym];
                let (ctc_state, ctc_score) = if weights.ctc_weight == 0.0 {
                    (None, 0.0)
                } else {
                    let (st, psi) = scorer.extend(&l.ctc, sym);
                    (Some(st), psi)
                };
                let lm_score = l.hyp.lm_score + lm_lp.map_or(0.0, |lp| lp[sym]);
                let mut tokens = l.hyp.tokens.clone();
                tokens.push(sym);
                candidates.push(Candidate {
                    parent: p,
                    symbol: Some(sym),
                    hyp: BeamHypothesis {
                        tokens,
                        decoder_score: dec_score,
                        ctc_prefix_score: ctc_score,
                        lm_score,
                        combined: weights.combine(dec_score, ctc_score, lm_score, len + 1),
                        finished: false,
                    },
                    ctc: ctc_state,
                });
            }
        }
        candidates.retain(|c| c.hyp.combined.is_finite());
        candidates.sort_by(|a, b| rank(&a.hyp, &b.hyp, eos));
        candidates.truncate(weights.beam);

        let mut next = Vec::new();
        for c in candidates {
            let Some(sym) = c.symbol else {
                finished.push(c.hyp);
                continue;
            };
            let parent = &live[c.parent];
            let mut dec = parent.dec.clone();
            let before = dec.key_reads();
            model.advance(&mut dec, sym)?;
            key_reads += dec.key_reads() - before;
            let lm_state = match (&parent.lm, use_lm) {
                (Some(st), Some(lm)) => {
                    let mut st = st.clone();
                    lm.advance(&mut st, sym)?;
                    Some(st)
                }
                _ => None,
            };
            next.push(Live {
                hyp: c.hyp,
                dec,
                ctc: c.ctc.unwrap_or_else(|| parent.ctc.clone()),
                lm: lm_state,
            });
        }
        live = next;
    }

    finished.sort_by(|a, b| rank(a, b, eos));
    if finished.is_empty() {
        // every expansion had a −∞ fused score; fall back to the empty output
        let dec = model.start(prompt)?;
        let dec_score = dec.log_probs()[0];
        let ctc_score = scorer.full(&scorer.initial());
        let lm_score = use_lm.map_or(0.0, |lm| lm.start().log_probs()[0]);
        finished.push(BeamHypothesis {
            tokens: Vec::new(),
            decoder_score: dec_score,
            ctc_prefix_score: ctc_score,
            lm_score,
            combined: weights.combine(dec_score, ctc_score, lm_score, 0),
            finished: true,
        });
    }
    finished.truncate(weights.nbest.max(1));
    Ok(BeamResult {
        best: finished[0].clone(),
        nbest: finished,
        key_reads,
    })
}

/// Greedy decoding with the decoder alone: argmax at every step.
pub fn greedy_decode(model: &AsrModel, prompt: &PromptSequence, max_len: usize) -> Result<Vec<usize>> {
    let mut state = model.start(prompt)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let class = crate::kernels::argmax(state.log_probs());
        if class == 0 {
            break;
        }
        out.push(class);
        model.advance(&mut state, class)?;
    }
    Ok(out)
}

/// One decoded utterance.
#[derive(Clone, Debug)]
pub struct Recognition {
    pub result: BeamResult,
    /// Greedy CTC transcript of the same posterior.
    pub ctc_greedy: Vec<usize>,
    pub tau: usize,
    pub encoded_len: usize,
    /// Encoder plus beam search wall-clock.
    pub seconds: f64,
}

/// Encodes `x` and runs the fused beam search.
pub fn recognize(
    model: &AsrModel,
    x: &AudioFeatures,
    lm: Option<&LanguageModel>,
    weights: &FusionWeights,
) -> Result<Recognition> {
    let start = Instant::now();
    let prep = model.prepare(x)?;
    let result = beam_search(model, &prep.prompt, &prep.posterior, lm, weights)?;
    Ok(Recognition {
        result,
        ctc_greedy: ctc_greedy_decode(&prep.path),
        tau: prep.path.tau(),
        encoded_len: prep.encoded.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// [`recognize`] over many utterances in parallel; output order follows input.
pub fn recognize_all(
    model: &AsrModel,
    xs: &[AudioFeatures],
    lm: Option<&LanguageModel>,
    weights: &FusionWeights,
) -> Result<Vec<Recognition>> {
    xs.par_iter().map(|x| recognize(model, x, lm, weights)).collect()
}

// Word error rate.

/// Edit operation counts of one alignment against `ref_words` reference words.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WerStats {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Percentage of errors over reference words.
    pub fn rate(&self) -> f64 {
        100.0 * self.errors() as f64 / self.ref_words.max(1) as f64
    }

    fn add(&mut self, o: WerStats) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_words += o.ref_words;
    }
}

/// Levenshtein alignment of two token lists; among minimum-cost alignments
/// prefers substitutions, then deletions.
pub fn edit_ops<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerStats {
    let (n, m) = (reference.len(), hypothesis.len());
    // (cost, subs, dels, ins)
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    for i in 1..=n {
        let mut cur = vec![(i, 0, i, 0); m + 1];
        for j in 1..=m {
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = prev[j - 1];
            let sub = (diag.0 + usize::from(!same), diag.1 + usize::from(!same), diag.2, diag.3);
            let up = prev[j];
            let del = (up.0 + 1, up.1, up.2 + 1, up.3);
            let left = cur[j - 1];
            let ins = (left.0 + 1, left.1, left.2, left.3 + 1);
            cur[j] = [sub, del, ins].into_iter().min_by_key(|c| c.0).expect("three options");
        }
        prev = cur;
    }
    let (_, s, d, ins) = prev[m];
    WerStats {
        substitutions: s,
        deletions: d,
        insertions: ins,
        ref_words: n,
    }
}

/// Corpus WER over whitespace-separated words.
pub fn wer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<WerStats> {
    if refs.is_empty() {
        return Err(Error::EmptyReference);
    }
    if refs.len() != hyps.len() {
        return Err(Error::InvalidInput {
            what: "WER input",
            reason: format!("{} references but {} hypotheses", refs.len(), hyps.len()),
        });
    }
    let mut total = WerStats::default();
    for (r, h) in refs.iter().zip(hyps) {
        let rw: Vec<&str> = r.as_ref().split_whitespace().collect();
        let hw: Vec<&str> = h.as_ref().split_whitespace().collect();
        total.add(edit_ops(&rw, &hw));
    }
    if total.ref_words == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(total)
}

// Cost profile.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// Prompts built by the model's configured compression.
    Compressed,
    /// Every encoder frame mapped into the prompt space.
    Uncompressed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub mode: PromptMode,
    pub utterances: usize,
    /// Decoder key reads: prompt prefill plus one read per visible row per step.
    pub key_reads: u64,
    pub decode_seconds: f64,
    pub audio_seconds: f64,
    pub mean_prompt_len: f64,
    pub mean_encoded_len: f64,
    pub mean_tokens: f64,
}

impl CostReport {
    /// Decoder wall-clock per second of audio.
    pub fn rtf(&self) -> f64 {
        self.decode_seconds / self.audio_seconds.max(f64::MIN_POSITIVE)
    }
}

/// Decodes each utterance's token sequence through the cached decoder and
/// counts attention key reads and decoder wall-clock. Both modes run the same
/// number of steps per utterance, so only prompt length differs.
/// `frame_seconds` is the duration of one input frame.
pub fn profile_decode_cost(
    model: &AsrModel,
    utts: &[(AudioFeatures, Vec<usize>)],
    mode: PromptMode,
    frame_seconds: f64,
) -> Result<CostReport> {
    let mut report = CostReport {
        mode,
        utterances: utts.len(),
        key_reads: 0,
        decode_seconds: 0.0,
        audio_seconds: 0.0,
        mean_prompt_len: 0.0,
        mean_encoded_len: 0.0,
        mean_tokens: 0.0,
    };
    for (x, tokens) in utts {
        model.vocab.check_body(tokens)?;
        let prep = model.prepare(x)?;
        let prompt = match mode {
            PromptMode::Compressed => prep.prompt,
            PromptMode::Uncompressed => model.uncompressed_prompt(&prep.encoded)?,
        };
        let start = Instant::now();
        let mut state = model.start(&prompt)?;
        for &tok in tokens {
            model.advance(&mut state, tok)?;
        }
        report.decode_seconds += start.elapsed().as_secs_f64();
        report.key_reads += state.key_reads();
        report.audio_seconds += x.len() as f64 * frame_seconds;
        report.mean_prompt_len += prompt.len() as f64;
        report.mean_encoded_len += prep.encoded.len() as f64;
        report.mean_tokens += tokens.len() as f64;
    }
    let n = utts.len().max(1) as f64;
    report.mean_prompt_len /= n;
    report.mean_encoded_len /= n;
    report.mean_tokens /= n;
    Ok(report)
}

//! Decoder-only transformer over `[<aud>, prompt, <sos>, tokens]`.
//!
//! The same network runs in two input modes. Prompted mode conditions on an
//! `<aud>` row followed by prompt vectors; LM mode feeds `[<sos>, tokens]`
//! only. A single sinusoidal encoding runs continuously over the whole input.

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{positional_encoding, positional_row, AttentionMask, Block, Embedding, LayerConfig, LayerNorm, Linear};
use crate::params::{Init, ParamStore, Session};
use crate::vocab::Vocab;

/// Prompt vectors in the decoder embedding space, `[τ × model_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    embeddings: Tensor,
}

impl PromptSequence {
    pub fn new(embeddings: Tensor) -> Result<Self> {
        if embeddings.shape().len() != 2 {
            return Err(Error::InvalidInput {
                what: "prompt",
                reason: format!("expected [tau, model_dim], got {:?}", embeddings.shape()),
            });
        }
        Ok(Self { embeddings })
    }

    pub fn empty(model_dim: usize) -> Self {
        Self {
            embeddings: Tensor::zeros(&[0, model_dim]),
        }
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// What precedes `<sos>` in a graph-level forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Context {
    /// Plain LM: nothing before `<sos>`.
    Lm,
    /// `<aud>` followed by prompt rows (`None` when τ = 0).
    Prompted(Option<Var>),
}

/// Per-block key/value cache for incremental decoding.
#[derive(Clone, Debug)]
struct BlockCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Incremental decoding state. Cloning forks a hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState {
    caches: Vec<BlockCache>,
    len: usize,
    log_probs: Vec<f64>,
    key_reads: u64,
}

impl DecoderState {
    /// Number of rows consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Next-token log distribution over classes (`0` is `<eos>`).
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    /// Keys read by self-attention since this state was created, counted
    /// once per attended row (not per block or head).
    pub fn key_reads(&self) -> u64 {
        self.key_reads
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Embedding,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub vocab: Vocab,
    pub model_dim: usize,
    pub heads: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &LayerConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(Self {
            embed: Embedding::new(store, init, &format!("{name}.embed"), vocab.n_ids(), d),
            blocks: (0..cfg.blocks)
                .map(|i| Block::new(store, init, &format!("{name}.block{i}"), cfg, None))
                .collect(),
            norm: LayerNorm::new(store, init, &format!("{name}.norm"), d),
            head: Linear::new(store, init, &format!("{name}.head"), d, vocab.n_classes()),
            vocab,
            model_dim: d,
            heads: cfg.heads,
        })
    }

    /// Embedding rows of `ids`, as a graph value.
    pub fn embed_tokens(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        self.embed.forward(s, ids)
    }

    /// Builds the input rows; returns them with the row index of `<sos>`.
    fn input_rows(&self, s: &mut Session, ctx: Context, prefix: &[usize]) -> Result<(Var, usize)> {
        self.vocab.strip_sos(prefix)?;
        let tokens = self.embed.forward(s, prefix)?;
        let (rows, offset) = match ctx {
            Context::Lm => (tokens, 0),
            Context::Prompted(prompt) => {
                let aud = self.embed.forward(s, &[self.vocab.aud()])?;
                match prompt {
                    Some(p) => {
                        let shape = s.graph.shape(p);
                        if shape.len() != 2 || shape[1] != self.model_dim {
                            return Err(Error::ShapeMismatch {
                                op: "decoder prompt",
                                lhs: shape.to_vec(),
                                rhs: vec![self.model_dim],
                            });
                        }
                        let tau = shape[0];
                        (s.graph.concat(&[aud, p, tokens], 0)?, 1 + tau)
                    }
                    None => (s.graph.concat(&[aud, tokens], 0)?, 1),
                }
            }
        };
        Ok((rows, offset))
    }

    fn hidden(&self, s: &mut Session, rows: Var) -> Result<Var> {
        let len = s.graph.shape(rows)[0];
        let pe = s.constant(positional_encoding(len, self.model_dim));
        let mut x = s.graph.add(rows, pe)?;
        let mask = AttentionMask::causal(len);
        for block in &self.blocks {
            x = block.forward(s, x, &mask)?;
        }
        self.norm.forward(s, x)
    }

    fn project(&self, s: &mut Session, hidden: Var) -> Result<Var> {
        let logits = self.head.forward(s, hidden)?;
        s.graph.log_softmax(logits)
    }

    /// Log distributions at every input row, `[rows × classes]`, plus the row
    /// index of `<sos>`.
    pub fn forward(&self, s: &mut Session, ctx: Context, prefix: &[usize]) -> Result<(Var, usize)> {
        let (rows, offset) = self.input_rows(s, ctx, prefix)?;
        let h = self.hidden(s, rows)?;
        Ok((self.project(s, h)?, offset))
    }

    /// Summed negative log-likelihood of `body` followed by `<eos>`,
    /// teacher-forced. Only the `I + 1` transcription positions contribute.
    pub fn token_nll(&self, s: &mut Session, ctx: Context, body: &[usize]) -> Result<Var> {
        self.vocab.check_body(body)?;
        let mut prefix = Vec::with_capacity(body.len() + 1);
        prefix.push(self.vocab.sos());
        prefix.extend_from_slice(body);
        let (rows, offset) = self.input_rows(s, ctx, &prefix)?;
        let h = self.hidden(s, rows)?;
        let n = body.len() + 1;
        let h = s.graph.slice(h, 0, offset, offset + n)?;
        let lp = self.project(s, h)?;
        let classes = self.vocab.n_classes();
        let mut onehot = vec![0.0; n * classes];
        for (i, &tok) in body.iter().chain(std::iter::once(&self.vocab.eos())).enumerate() {
            onehot[i * classes + self.vocab.class_of(tok)?] = 1.0;
        }
        let mask = s.constant(Tensor::from_parts(vec![n, classes], onehot));
        let picked = s.graph.mul(lp, mask)?;
        let total = s.graph.sum(picked)?;
        s.graph.scale(total, -1.0)
    }

    // Incremental path.

    fn empty_state(&self) -> DecoderState {
        DecoderState {
            caches: vec![
                BlockCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                };
                self.blocks.len()
            ],
            len: 0,
            log_probs: Vec::new(),
            key_reads: 0,
        }
    }

    /// Consumes one input row, updating caches; returns the final hidden row.
    fn push_row(&self, store: &ParamStore, state: &mut DecoderState, input: &[f64]) -> Vec<f64> {
        let d = self.model_dim;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = state.len;
        let mut x: Vec<f64> = input
            .iter()
            .zip(positional_row(pos, d))
            .map(|(a, b)| a + b)
            .collect();
        let n = pos + 1;
        for (block, cache) in self.blocks.iter().zip(&mut state.caches) {
            let h = block.attn_norm.forward_row(store, &x);
            let q = block.attn.query.forward_row(store, &h);
            cache.keys.extend(block.attn.key.forward_row(store, &h));
            cache.values.extend(block.attn.value.forward_row(store, &h));
            let mut ctx = vec![0.0; d];
            let mut w = vec![0.0; n];
            for head in 0..self.heads {
                let cols = head * dh..(head + 1) * dh;
                for (j, wj) in w.iter_mut().enumerate() {
                    *wj = kernels::dot(&q[cols.clone()], &cache.keys[j * d..(j + 1) * d][cols.clone()]) * scale;
                }
                kernels::softmax_in_place(&mut w);
                for (j, wj) in w.iter().enumerate() {
                    let v = &cache.values[j * d..(j + 1) * d];
                    for c in cols.clone() {
                        ctx[c] += wj * v[c];
                    }
                }
            }
            let a = block.attn.output.forward_row(store, &ctx);
            x.iter_mut().zip(&a).for_each(|(xi, ai)| *xi += ai);
            let h = block.ff_norm.forward_row(store, &x);
            let f = block.ff.forward_row(store, &h);
            x.iter_mut().zip(&f).for_each(|(xi, fi)| *xi += fi);
        }
        state.key_reads += n as u64;
        state.len += 1;
        self.norm.forward_row(store, &x)
    }

    fn push_and_predict(&self, store: &ParamStore, state: &mut DecoderState, input: &[f64]) {
        let h = self.push_row(store, state, input);
        let mut lp = self.head.forward_row(store, &h);
        kernels::log_softmax_in_place(&mut lp);
        state.log_probs = lp;
    }

    /// Feeds `<aud>`, the prompt, and `<sos>`; the state then predicts `y1`.
    pub fn start_prompted(&self, store: &ParamStore, prompt: &PromptSequence) -> Result<DecoderState> {
        if prompt.dim() != self.model_dim {
            return Err(Error::ShapeMismatch {
                op: "decoder prompt",
                lhs: prompt.embeddings().shape().to_vec(),
                rhs: vec![self.model_dim],
            });
        }
        let mut state = self.empty_state();
        self.push_row(store, &mut state, self.embed.row(store, self.vocab.aud()));
        for t in 0..prompt.len() {
            self.push_row(store, &mut state, prompt.embeddings().row(t));
        }
        self.push_and_predict(store, &mut state, self.embed.row(store, self.vocab.sos()));
        Ok(state)
    }

    /// Feeds `<sos>` only.
    pub fn start_lm(&self, store: &ParamStore) -> DecoderState {
        let mut state = self.empty_state();
        self.push_and_predict(store, &mut state, self.embed.row(store, self.vocab.sos()));
        state
    }

    /// Appends one transcript symbol.
    pub fn advance(&self, store: &ParamStore, state: &mut DecoderState, token: usize) -> Result<()> {
        if !self.vocab.is_symbol(token) {
            return Err(Error::InvalidTokens(format!(
                "cannot advance with token {token}"
            )));
        }
        self.push_and_predict(store, state, self.embed.row(store, token));
        Ok(())
    }

    /// Incremental evaluation of `log p(body, <eos>)`.
    pub fn score_incremental(&self, store: &ParamStore, mut state: DecoderState, body: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for &tok in body {
            total += state.log_probs[self.vocab.class_of(tok)?];
            self.advance(store, &mut state, tok)?;
        }
        Ok(total + state.log_probs[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore, Decoder) {
        let cfg = LayerConfig {
            model_dim: 8,
            heads: 2,
            ff_dim: 12,
            blocks: 2,
            dropout_rate: 0.0,
        };
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let dec = Decoder::new(&mut store, &mut init, "dec", &cfg, Vocab::new(3).unwrap()).unwrap();
        (store, dec)
    }

    fn prompt(rng: &mut ChaCha8Rng, tau: usize) -> PromptSequence {
        let data = (0..tau * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        PromptSequence::new(Tensor::new(vec![tau, 8], data).unwrap()).unwrap()
    }

    fn full_logprobs(store: &ParamStore, dec: &Decoder, p: Option<&PromptSequence>, prefix: &[usize]) -> Tensor {
        let mut s = Session::inference(store);
        let ctx = match p {
            None => Context::Lm,
            Some(p) if p.is_empty() => Context::Prompted(None),
            Some(p) => Context::Prompted(Some(s.constant(p.embeddings().clone()))),
        };
        let (lp, _) = dec.forward(&mut s, ctx, prefix).unwrap();
        s.value(lp).clone()
    }

    #[test]
    fn incremental_matches_recompute() {
        let (store, dec) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = dec.vocab;
        for tau in [0usize, 1, 4] {
            let p = prompt(&mut rng, tau);
            let tokens: Vec<usize> = (0..5).map(|_| rng.random_range(1..=3)).collect();
            let mut prefix = vec![v.sos()];
            prefix.extend(&tokens);
            let full = full_logprobs(&store, &dec, Some(&p), &prefix);
            let mut state = dec.start_prompted(&store, &p).unwrap();
            for i in 0..=tokens.len() {
                let row = full.row(1 + tau + i);
                let diff = row
                    .iter()
                    .zip(state.log_probs())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-9, "tau={tau} step={i} diff={diff}");
                if i < tokens.len() {
                    dec.advance(&store, &mut state, tokens[i]).unwrap();
                }
            }
            assert_eq!(state.len(), 2 + tau + tokens.len());
        }
    }

    #[test]
    fn lm_mode_matches_recompute() {
        let (store, dec) = setup(3);
        let v = dec.vocab;
        let prefix = [v.sos(), 2, 1, 3];
        let full = full_logprobs(&store, &dec, None, &prefix);
        let mut state = dec.start_lm(&store);
        for (i, &tok) in prefix[1..].iter().enumerate() {
            assert!(full.row(i).iter().zip(state.log_probs()).all(|(a, b)| (a - b).abs() < 1e-9));
            dec.advance(&store, &mut state, tok).unwrap();
        }
    }

    #[test]
    fn outputs_are_normalized() {
        let (store, dec) = setup(4);
        let full = full_logprobs(&store, &dec, Some(&PromptSequence::empty(8)), &[dec.vocab.sos(), 1]);
        for i in 0..full.rows() {
            assert!(kernels::log_sum_exp(full.row(i)).abs() < 1e-9);
        }
    }

    #[test]
    fn prefix_must_start_with_sos() {
        let (store, dec) = setup(5);
        let mut s = Session::inference(&store);
        assert!(matches!(
            dec.forward(&mut s, Context::Lm, &[1, 2]),
            Err(Error::InvalidTokens(_))
        ));
        let mut state = dec.start_lm(&store);
        assert!(dec.advance(&store, &mut state, dec.vocab.eos()).is_err());
    }

    #[test]
    fn causality_under_perturbation() {
        let (store, dec) = setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = dec.vocab;
        for _ in 0..20 {
            let p = prompt(&mut rng, 3);
            let mut prefix = vec![v.sos()];
            prefix.extend((0..5).map(|_| rng.random_range(1..=3usize)));
            let base = full_logprobs(&store, &dec, Some(&p), &prefix);
            let j = rng.random_range(1..prefix.len());
            let mut other = prefix.clone();
            other[j] = other[j] % 3 + 1;
            let moved = full_logprobs(&store, &dec, Some(&p), &other);
            let row_j = 1 + 3 + j;
            for i in 0..row_j {
                assert_eq!(base.row(i), moved.row(i));
            }
            assert_ne!(base.row(row_j), moved.row(row_j));
        }
    }

    #[test]
    fn distinct_prompts_change_outputs() {
        let (store, dec) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = dec.start_prompted(&store, &prompt(&mut rng, 2)).unwrap();
        let b = dec.start_prompted(&store, &prompt(&mut rng, 2)).unwrap();
        assert_ne!(a.log_probs(), b.log_probs());
    }

    #[test]
    fn token_nll_matches_incremental_score() {
        let (store, dec) = setup(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = prompt(&mut rng, 3);
        let body = [3, 1, 1, 2];
        let mut s = Session::inference(&store);
        let pv = s.constant(p.embeddings().clone());
        let nll = dec.token_nll(&mut s, Context::Prompted(Some(pv)), &body).unwrap();
        let inc = dec
            .score_incremental(&store, dec.start_prompted(&store, &p).unwrap(), &body)
            .unwrap();
        assert!((s.value(nll).item() + inc).abs() < 1e-9);

        let mut s = Session::inference(&store);
        let nll = dec.token_nll(&mut s, Context::Lm, &body).unwrap();
        let inc = dec.score_incremental(&store, dec.start_lm(&store), &body).unwrap();
        assert!((s.value(nll).item() + inc).abs() < 1e-9);
    }

    #[test]
    fn zero_head_is_uniform() {
        let (mut store, dec) = setup(12);
        let n = store.get(dec.head.weight).numel();
        store.set_values(dec.head.weight, &vec![0.0; n]).unwrap();
        let state = dec.start_lm(&store);
        for v in state.log_probs() {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
        let mut s = Session::inference(&store);
        let nll = dec.token_nll(&mut s, Context::Lm, &[1, 2]).unwrap();
        assert!((s.value(nll).item() - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn key_reads_follow_triangular_count() {
        let (store, dec) = setup(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut state = dec.start_prompted(&store, &prompt(&mut rng, 4)).unwrap();
        dec.advance(&store, &mut state, 1).unwrap();
        dec.advance(&store, &mut state, 2).unwrap();
        let rows = 1 + 4 + 1 + 2u64;
        assert_eq!(state.key_reads(), rows * (rows + 1) / 2);
    }
}

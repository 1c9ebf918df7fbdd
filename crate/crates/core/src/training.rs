//! Joint CTC/decoder training with text-only augmentation.
//!
//! A step is either an ASR step over paired items or an LM step over text
//! items. Each item runs in its own graph; per-item gradients are summed in
//! item order so results do not depend on thread scheduling.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Var;
use crate::ctc;
use crate::decoder::Context;
use crate::encoder::{greedy_path, AudioFeatures, CtcPosterior};
use crate::error::{Error, Result};
use crate::model::{AsrModel, LanguageModel, LmConfig};
use crate::params::{GradBuffer, ParamStore, Session};
use crate::vocab::BLANK;

/// Paired training item: features plus transcript symbols.
#[derive(Clone, Debug)]
pub struct PairItem {
    pub features: AudioFeatures,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub pairs: Vec<PairItem>,
    pub texts: Vec<Vec<usize>>,
}

/// Ordering of the loss types over a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// ASR and LM steps interleaved from the first step.
    Joint,
    /// Text-only steps first, then paired steps only.
    PretrainFinetune { pretrain_steps: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Immature-prompt threshold; `None` disables the rule.
    pub theta: Option<f64>,
    pub lm_batch_fraction: f64,
    /// Round-robin ratio of plain to pseudo-prompt LM items.
    pub pseudo_split: (usize, usize),
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub noam_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            theta: Some(2.0),
            lm_batch_fraction: 0.1,
            pseudo_split: (1, 1),
            batch_size: 32,
            steps: 100_000,
            warmup_steps: 25_000,
            noam_scale: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            grad_clip: Some(5.0),
            schedule: Schedule::Joint,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} is outside [0, 1]", self.lambda)));
        }
        if !unit.contains(&self.lm_batch_fraction) {
            return Err(Error::InvalidConfig(format!(
                "lm_batch_fraction {} is outside [0, 1]",
                self.lm_batch_fraction
            )));
        }
        if let Some(theta) = self.theta {
            if !(theta > 0.0) {
                return Err(Error::InvalidConfig(format!("theta {theta} must be positive")));
            }
        }
        if self.pseudo_split.0 + self.pseudo_split.1 == 0 {
            return Err(Error::InvalidConfig("pseudo_split must not be 0:0".into()));
        }
        if self.batch_size == 0 || self.warmup_steps == 0 {
            return Err(Error::InvalidConfig("batch_size and warmup_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::InvalidConfig("invalid Adam hyperparameters".into()));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// `τ > θ·I`: the prompt is too long for the transcript to be trusted.
pub fn immature_check(tau: usize, target_len: usize, theta: f64) -> bool {
    tau as f64 > theta * target_len as f64
}

pub fn noam_lr(step: usize, model_dim: usize, warmup: usize, scale: f64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup as f64;
    scale * (model_dim as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}

fn item_seed(seed: u64, step: usize, item: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 20) ^ item as u64);
    rng.random()
}

// Per-item passes.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Term {
    Ctc,
    Att,
    Lm,
    Pseudo,
}

struct Piece {
    term: Term,
    var: Var,
    value: f64,
    tokens: usize,
}

struct ItemPass<'s> {
    session: Session<'s>,
    pieces: Vec<Piece>,
    tau: Option<usize>,
    immature: bool,
    skipped: bool,
}

impl<'s> ItemPass<'s> {
    fn new(session: Session<'s>) -> Self {
        Self {
            session,
            pieces: Vec::new(),
            tau: None,
            immature: false,
            skipped: false,
        }
    }

    fn push(&mut self, term: Term, var: Var, tokens: usize) {
        let value = self.session.value(var).item();
        self.pieces.push(Piece {
            term,
            var,
            value,
            tokens,
        });
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct TermTotals {
    sum: f64,
    tokens: usize,
}

fn totals(passes: &[ItemPass], term: Term) -> TermTotals {
    passes
        .iter()
        .flat_map(|p| &p.pieces)
        .filter(|p| p.term == term)
        .fold(TermTotals::default(), |acc, p| TermTotals {
            sum: acc.sum + p.value,
            tokens: acc.tokens + p.tokens,
        })
}

/// Backward through every item with per-term weights; sums in item order.
fn weighted_grads(passes: &mut [ItemPass], n_params: usize, weight: impl Fn(Term) -> f64 + Sync) -> Result<GradBuffer> {
    let per_item = passes
        .par_iter_mut()
        .map(|p| -> Result<Option<GradBuffer>> {
            let mut loss: Option<Var> = None;
            for piece in &p.pieces {
                let w = p.session.graph.scale(piece.var, weight(piece.term))?;
                loss = Some(match loss {
                    Some(l) => p.session.graph.add(l, w)?,
                    None => w,
                });
            }
            match loss {
                Some(l) => {
                    p.session.backward(l)?;
                    Ok(Some(p.session.grads()))
                }
                None => Ok(None),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradBuffer::empty(n_params);
    for g in per_item.iter().flatten() {
        total.add_assign(g);
    }
    Ok(total)
}

fn check_finite(passes: &[ItemPass], step: usize) -> Result<()> {
    for (i, p) in passes.iter().enumerate() {
        for piece in &p.pieces {
            if !piece.value.is_finite() {
                let mut detail = format!("item {i}: {:?} term is {}", piece.term, piece.value);
                for (j, q) in passes.iter().enumerate() {
                    let vals: Vec<String> = q.pieces.iter().map(|x| format!("{:?}={}", x.term, x.value)).collect();
                    let _ = write!(detail, "; item {j} [{}] tau={:?}", vals.join(", "), q.tau);
                }
                return Err(Error::NonFiniteLoss { step, detail });
            }
        }
    }
    Ok(())
}

/// Options of an ASR loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsrLossOptions {
    pub lambda: f64,
    pub theta: Option<f64>,
    /// Seed for per-item dropout; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

fn asr_item<'s>(model: &AsrModel, store: &'s ParamStore, item: &PairItem, opts: &AsrLossOptions, seed: Option<u64>) -> Result<ItemPass<'s>> {
    let mut pass = ItemPass::new(Session::training(store, seed));
    let s = &mut pass.session;
    let h = model.encode_var(s, &item.features)?;
    let lp = model.ctc_head.forward(s, h)?;
    let frames = s.graph.shape(lp)[0];
    let target = &item.tokens;
    model.vocab.check_body(target)?;
    if !ctc::is_feasible(frames, target) {
        pass.skipped = true;
        return Ok(pass);
    }
    let ctc_var = s.graph.ctc_loss(lp, target, BLANK)?;
    let path = greedy_path(&CtcPosterior::new(s.value(lp).clone())?);
    let frames = model.compress_var(s, h, &path)?;
    let tau = s.graph.shape(frames)[0];
    let immature = !target.is_empty() && opts.theta.is_some_and(|theta| immature_check(tau, target.len(), theta));
    let att = if immature {
        model.decoder.token_nll(s, Context::Lm, target)?
    } else {
        let prompt = model.map_prompt_var(s, frames)?;
        model.decoder.token_nll(s, Context::Prompted(prompt), target)?
    };
    pass.tau = Some(tau);
    pass.immature = immature;
    pass.push(Term::Ctc, ctc_var, target.len());
    pass.push(Term::Att, att, target.len() + 1);
    Ok(pass)
}

/// Result of one ASR loss evaluation. Loss terms are per-token means over
/// the batch; `grads` is the gradient of `loss`.
#[derive(Clone, Debug)]
pub struct AsrLoss {
    pub loss: f64,
    pub ctc: f64,
    pub att: f64,
    pub taus: Vec<usize>,
    pub immature: usize,
    pub skipped: usize,
    pub grads: GradBuffer,
}

/// `λ·L_ctc + (1−λ)·L_att` over a batch of paired items. Items whose target
/// cannot be aligned in the available frames are skipped and counted.
pub fn asr_loss(model: &AsrModel, items: &[&PairItem], opts: &AsrLossOptions) -> Result<AsrLoss> {
    asr_loss_at(model, items, opts, 0)
}

fn asr_loss_at(model: &AsrModel, items: &[&PairItem], opts: &AsrLossOptions, step: usize) -> Result<AsrLoss> {
    let store = &model.store;
    let mut passes = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let seed = opts.dropout_seed.map(|s| item_seed(s, step, i));
            asr_item(model, store, item, opts, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    check_finite(&passes, step)?;
    let ctc_t = totals(&passes, Term::Ctc);
    let att_t = totals(&passes, Term::Att);
    let ctc_den = ctc_t.tokens.max(1) as f64;
    let att_den = att_t.tokens.max(1) as f64;
    let lambda = opts.lambda;
    let grads = weighted_grads(&mut passes, store.len(), |term| match term {
        Term::Ctc => lambda / ctc_den,
        _ => (1.0 - lambda) / att_den,
    })?;
    let ctc = ctc_t.sum / ctc_den;
    let att = att_t.sum / att_den;
    Ok(AsrLoss {
        loss: lambda * ctc + (1.0 - lambda) * att,
        ctc,
        att,
        taus: passes.iter().filter_map(|p| p.tau).collect(),
        immature: passes.iter().filter(|p| p.immature).count(),
        skipped: passes.iter().filter(|p| p.skipped).count(),
        grads,
    })
}

/// Summed text NLL (including `<eos>`) and the gradient of its per-token mean.
#[derive(Clone, Debug)]
pub struct LmLoss {
    pub sum: f64,
    pub tokens: usize,
    pub skipped: usize,
    pub grads: GradBuffer,
}

impl LmLoss {
    pub fn mean(&self) -> f64 {
        self.sum / self.tokens.max(1) as f64
    }
}

fn lm_item<'s>(model: &AsrModel, store: &'s ParamStore, text: &[usize], pseudo: bool, seed: Option<u64>) -> Result<ItemPass<'s>> {
    let mut pass = ItemPass::new(Session::training(store, seed));
    if text.is_empty() {
        pass.skipped = true;
        return Ok(pass);
    }
    let s = &mut pass.session;
    let (term, nll) = if pseudo {
        let prompt = model.decoder.embed_tokens(s, text)?;
        (Term::Pseudo, model.decoder.token_nll(s, Context::Prompted(Some(prompt)), text)?)
    } else {
        (Term::Lm, model.decoder.token_nll(s, Context::Lm, text)?)
    };
    pass.push(term, nll, text.len() + 1);
    Ok(pass)
}

fn lm_passes<'s>(model: &'s AsrModel, items: &[(&[usize], bool)], dropout_seed: Option<u64>, step: usize) -> Result<Vec<ItemPass<'s>>> {
    let passes = items
        .par_iter()
        .enumerate()
        .map(|(i, &(text, pseudo))| {
            let seed = dropout_seed.map(|s| item_seed(s, step, i));
            lm_item(model, &model.store, text, pseudo, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    check_finite(&passes, step)?;
    Ok(passes)
}

fn single_lm_loss(model: &AsrModel, texts: &[&[usize]], pseudo: bool) -> Result<LmLoss> {
    let items: Vec<(&[usize], bool)> = texts.iter().map(|t| (*t, pseudo)).collect();
    let mut passes = lm_passes(model, &items, None, 0)?;
    let term = if pseudo { Term::Pseudo } else { Term::Lm };
    let t = totals(&passes, term);
    let den = t.tokens.max(1) as f64;
    let grads = weighted_grads(&mut passes, model.store.len(), |_| 1.0 / den)?;
    Ok(LmLoss {
        sum: t.sum,
        tokens: t.tokens,
        skipped: passes.iter().filter(|p| p.skipped).count(),
        grads,
    })
}

/// Plain LM loss of the decoder on `[<sos>, y]`.
pub fn lm_loss(model: &AsrModel, texts: &[&[usize]]) -> Result<LmLoss> {
    single_lm_loss(model, texts, false)
}

/// LM loss with the sentence's own token embeddings standing in for the
/// audio prompt: `[<aud>, emb(y), <sos>, y]`.
pub fn pseudo_prompt_lm_loss(model: &AsrModel, texts: &[&[usize]]) -> Result<LmLoss> {
    single_lm_loss(model, texts, true)
}

// Batch planning.

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepKind {
    Asr,
    Lm,
}

/// Item indices of one step: either paired items, or text items split into
/// plain and pseudo-prompt forms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub asr_items: Vec<usize>,
    pub lm_items: Vec<usize>,
    pub pseudo_lm_items: Vec<usize>,
}

impl BatchPlan {
    pub fn kind(&self) -> StepKind {
        if self.asr_items.is_empty() {
            StepKind::Lm
        } else {
            StepKind::Asr
        }
    }
}

/// Cycles through a shuffled index order, reshuffling after every pass.
#[derive(Clone, Debug)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Deterministic per-step planner.
#[derive(Clone, Debug)]
pub struct BatchPlanner {
    rng: ChaCha8Rng,
    pairs: Cycler,
    texts: Cycler,
    fraction: f64,
    split: (usize, usize),
    batch_size: usize,
    schedule: Schedule,
    lm_counter: usize,
    step: usize,
}

impl BatchPlanner {
    pub fn new(n_pairs: usize, n_texts: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let needs_text = config.lm_batch_fraction > 0.0 || matches!(config.schedule, Schedule::PretrainFinetune { pretrain_steps } if pretrain_steps > 0);
        if needs_text && n_texts == 0 {
            return Err(Error::InvalidConfig("text data is empty but LM steps are requested".into()));
        }
        if n_pairs == 0 && (config.lm_batch_fraction < 1.0 || matches!(config.schedule, Schedule::PretrainFinetune { .. })) {
            return Err(Error::InvalidConfig("paired data is empty but ASR steps are requested".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pairs = Cycler::new(n_pairs, &mut rng);
        let texts = Cycler::new(n_texts, &mut rng);
        Ok(Self {
            rng,
            pairs,
            texts,
            fraction: config.lm_batch_fraction,
            split: config.pseudo_split,
            batch_size: config.batch_size,
            schedule: config.schedule,
            lm_counter: 0,
            step: 0,
        })
    }

    fn is_lm_step(&mut self) -> bool {
        match self.schedule {
            Schedule::Joint => {
                // always draw, so the stream does not depend on the fraction
                let u: f64 = self.rng.random();
                u < self.fraction
            }
            Schedule::PretrainFinetune { pretrain_steps } => self.step <= pretrain_steps,
        }
    }

    pub fn next_plan(&mut self) -> BatchPlan {
        self.step += 1;
        let mut plan = BatchPlan {
            asr_items: Vec::new(),
            lm_items: Vec::new(),
            pseudo_lm_items: Vec::new(),
        };
        if self.is_lm_step() {
            let cycle = self.split.0 + self.split.1;
            for idx in self.texts.take(self.batch_size, &mut self.rng) {
                if self.lm_counter % cycle < self.split.0 {
                    plan.lm_items.push(idx);
                } else {
                    plan.pseudo_lm_items.push(idx);
                }
                self.lm_counter += 1;
            }
        } else {
            plan.asr_items = self.pairs.take(self.batch_size, &mut self.rng);
        }
        plan
    }
}

/// Plans for `steps` consecutive steps.
pub fn make_batch_plan(n_pairs: usize, n_texts: usize, config: &TrainConfig, steps: usize) -> Result<Vec<BatchPlan>> {
    let mut planner = BatchPlanner::new(n_pairs, n_texts, config)?;
    Ok((0..steps).map(|_| planner.next_plan()).collect())
}

// Optimizer.

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient see a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut GradBuffer, max_norm: f64) -> f64 {
    let norm = grads
        .0
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        grads.0.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= c));
    }
    norm
}

// Training loop.

/// Per-step record written to the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_ctc: Option<f64>,
    pub loss_att: Option<f64>,
    pub loss_lm: Option<f64>,
    pub loss_lm_pseudo: Option<f64>,
    pub lr: f64,
    pub tau_mean: Option<f64>,
    pub immature_count: usize,
    pub skipped: usize,
}

pub const METRICS_HEADER: &str = "step,loss_ctc,loss_att,loss_lm,loss_lm_pseudo,lr,tau_mean,immature_count";

impl StepMetrics {
    /// CSV line; absent terms are written as `-`. Floats use the shortest
    /// representation that round-trips.
    pub fn csv_line(&self) -> String {
        let f = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            f(self.loss_ctc),
            f(self.loss_att),
            f(self.loss_lm),
            f(self.loss_lm_pseudo),
            self.lr,
            f(self.tau_mean),
            self.immature_count
        )
    }
}

/// Owns the optimizer and planner state across steps of one run.
pub struct Trainer<'m> {
    pub model: &'m mut AsrModel,
    pub config: TrainConfig,
    pub optimizer: Adam,
    planner: BatchPlanner,
    step: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut AsrModel, data: &TrainData, config: TrainConfig) -> Result<Self> {
        let planner = BatchPlanner::new(data.pairs.len(), data.texts.len(), &config)?;
        let optimizer = Adam::new(&model.store, config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Self {
            model,
            config,
            optimizer,
            planner,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Steps that make up one pass over the paired data.
    pub fn steps_per_epoch(&self, data: &TrainData) -> usize {
        data.pairs.len().div_ceil(self.config.batch_size).max(1)
    }

    fn dropout_seed(&self) -> Option<u64> {
        (self.model.config.dropout_rate > 0.0).then_some(self.config.seed)
    }

    /// Runs one planned step and applies the update.
    pub fn step(&mut self, data: &TrainData) -> Result<StepMetrics> {
        self.step += 1;
        let step = self.step;
        let plan = self.planner.next_plan();
        let lr = noam_lr(step, self.model.config.model_dim, self.config.warmup_steps, self.config.noam_scale);
        let mut metrics = StepMetrics {
            step,
            loss_ctc: None,
            loss_att: None,
            loss_lm: None,
            loss_lm_pseudo: None,
            lr,
            tau_mean: None,
            immature_count: 0,
            skipped: 0,
        };
        let dropout_seed = self.dropout_seed();
        let mut grads = match plan.kind() {
            StepKind::Asr => {
                let items: Vec<&PairItem> = plan.asr_items.iter().map(|&i| &data.pairs[i]).collect();
                let opts = AsrLossOptions {
                    lambda: self.config.lambda,
                    theta: self.config.theta,
                    dropout_seed,
                };
                let out = asr_loss_at(self.model, &items, &opts, step)?;
                if out.taus.is_empty() {
                    metrics.skipped = out.skipped;
                    return Ok(metrics);
                }
                metrics.loss_ctc = Some(out.ctc);
                metrics.loss_att = Some(out.att);
                metrics.tau_mean = Some(out.taus.iter().sum::<usize>() as f64 / out.taus.len() as f64);
                metrics.immature_count = out.immature;
                metrics.skipped = out.skipped;
                out.grads
            }
            StepKind::Lm => {
                let items: Vec<(&[usize], bool)> = plan
                    .lm_items
                    .iter()
                    .map(|&i| (data.texts[i].as_slice(), false))
                    .chain(plan.pseudo_lm_items.iter().map(|&i| (data.texts[i].as_slice(), true)))
                    .collect();
                let mut passes = lm_passes(self.model, &items, dropout_seed, step)?;
                let plain = totals(&passes, Term::Lm);
                let pseudo = totals(&passes, Term::Pseudo);
                metrics.skipped = passes.iter().filter(|p| p.skipped).count();
                let den = plain.tokens + pseudo.tokens;
                if den == 0 {
                    return Ok(metrics);
                }
                metrics.loss_lm = (plain.tokens > 0).then(|| plain.sum / plain.tokens as f64);
                metrics.loss_lm_pseudo = (pseudo.tokens > 0).then(|| pseudo.sum / pseudo.tokens as f64);
                let den = den as f64;
                weighted_grads(&mut passes, self.model.store.len(), |_| 1.0 / den)?
            }
        };
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        self.optimizer.update(&mut self.model.store, &grads, lr);
        Ok(metrics)
    }

    /// Runs the configured number of steps. `on_epoch` is called after every
    /// full epoch and once more after the final step if it ends mid-epoch.
    pub fn run<F>(&mut self, data: &TrainData, mut on_epoch: F) -> Result<Vec<StepMetrics>>
    where
        F: FnMut(usize, &AsrModel, &Adam, &[StepMetrics]) -> Result<()>,
    {
        let per_epoch = self.steps_per_epoch(data);
        let mut log = Vec::with_capacity(self.config.steps);
        while self.step < self.config.steps {
            log.push(self.step(data)?);
            if self.step.is_multiple_of(per_epoch) || self.step == self.config.steps {
                on_epoch(self.step.div_ceil(per_epoch), self.model, &self.optimizer, &log)?;
            }
        }
        Ok(log)
    }
}

/// Trains `model` in place and returns the metrics log.
pub fn train(model: &mut AsrModel, data: &TrainData, config: &TrainConfig) -> Result<Vec<StepMetrics>> {
    Trainer::new(model, data, config.clone())?.run(data, |_, _, _, _| Ok(()))
}

// External LM.

#[derive(Clone, Debug, PartialEq)]
pub struct LmTrainConfig {
    pub lm: LmConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub noam_scale: f64,
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig {
                vocab_size: 27,
                model_dim: 512,
                heads: 4,
                ff_dim: 2048,
                blocks: 2,
            },
            steps: 20_000,
            batch_size: 64,
            warmup_steps: 25_000,
            noam_scale: 5.0,
            heldout_fraction: 0.05,
            seed: 0,
        }
    }
}

impl LmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.layers().validate()?;
        if self.batch_size == 0 || self.warmup_steps == 0 {
            return Err(Error::InvalidConfig("LM batch_size and warmup_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidConfig(format!(
                "heldout_fraction {} is outside [0, 1)",
                self.heldout_fraction
            )));
        }
        if !(self.noam_scale > 0.0) {
            return Err(Error::InvalidConfig("noam_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LmReport {
    /// `exp` of the held-out per-token NLL, `<eos>` predictions included.
    pub heldout_perplexity: f64,
    pub heldout_sentences: usize,
    pub losses: Vec<f64>,
}

fn external_lm_nll<'s>(lm: &LanguageModel, store: &'s ParamStore, text: &[usize]) -> Result<ItemPass<'s>> {
    let mut pass = ItemPass::new(Session::training(store, None));
    if text.is_empty() {
        pass.skipped = true;
        return Ok(pass);
    }
    let nll = lm.decoder.token_nll(&mut pass.session, Context::Lm, text)?;
    pass.push(Term::Lm, nll, text.len() + 1);
    Ok(pass)
}

/// Perplexity of `lm` over `texts`, `<eos>` included.
pub fn perplexity(lm: &LanguageModel, texts: &[Vec<usize>]) -> Result<f64> {
    let scores = texts
        .par_iter()
        .map(|t| lm.sentence_logprob(t).map(|lp| (lp, t.len() + 1)))
        .collect::<Result<Vec<_>>>()?;
    let (lp, n) = scores.iter().fold((0.0, 0usize), |(a, b), (lp, n)| (a + lp, b + n));
    Ok((-lp / n.max(1) as f64).exp())
}

/// Trains a separate text-only LM for shallow fusion. A seeded
/// `heldout_fraction` of the corpus is kept out for the perplexity report.
pub fn train_external_lm(texts: &[Vec<usize>], config: &LmTrainConfig) -> Result<(LanguageModel, LmReport)> {
    config.validate()?;
    let texts: Vec<Vec<usize>> = texts.iter().filter(|t| !t.is_empty()).cloned().collect();
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..texts.len()).collect();
    order.shuffle(&mut rng);
    let n_held = ((texts.len() as f64 * config.heldout_fraction).round() as usize).min(texts.len() - 1);
    let (held_idx, train_idx) = order.split_at(n_held);
    let train_set: Vec<Vec<usize>> = train_idx.iter().map(|&i| texts[i].clone()).collect();
    let held: Vec<Vec<usize>> = if held_idx.is_empty() {
        train_set.clone()
    } else {
        held_idx.iter().map(|&i| texts[i].clone()).collect()
    };

    let mut lm = LanguageModel::new(config.lm.clone(), config.seed)?;
    let mut adam = Adam::new(&lm.store, 0.9, 0.98, 1e-9);
    let mut cycler = Cycler::new(train_set.len(), &mut rng);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let batch = cycler.take(config.batch_size, &mut rng);
        let mut passes = batch
            .par_iter()
            .map(|&i| external_lm_nll(&lm, &lm.store, &train_set[i]))
            .collect::<Result<Vec<_>>>()?;
        check_finite(&passes, step)?;
        let t = totals(&passes, Term::Lm);
        let den = t.tokens.max(1) as f64;
        let mut grads = weighted_grads(&mut passes, lm.store.len(), |_| 1.0 / den)?;
        drop(passes);
        clip_grad_norm(&mut grads, 5.0);
        let lr = noam_lr(step, config.lm.model_dim, config.warmup_steps, config.noam_scale);
        adam.update(&mut lm.store, &grads, lr);
        losses.push(t.sum / den);
    }
    let heldout_perplexity = perplexity(&lm, &held)?;
    Ok((
        lm,
        LmReport {
            heldout_perplexity,
            heldout_sentences: held.len(),
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn immature_examples() {
        assert!(immature_check(5, 2, 2.0));
        assert!(!immature_check(4, 2, 2.0));
        for i in 1..10 {
            assert!(!immature_check(0, i, 2.0));
        }
    }

    #[test]
    fn noam_examples() {
        let peak = noam_lr(1000, 256, 1000, 1.0);
        assert!((noam_lr(4000, 256, 1000, 1.0) - peak / 2.0).abs() < 1e-15);
        let first = noam_lr(1, 256, 1000, 2.0);
        assert!((first - 2.0 / 16.0 * 1000f64.powf(-1.5)).abs() < 1e-18);
        assert!(noam_lr(999, 256, 1000, 1.0) < peak && noam_lr(1001, 256, 1000, 1.0) < peak);
    }

    #[test]
    fn planner_fraction_zero_is_pure_asr() {
        let cfg = TrainConfig {
            lm_batch_fraction: 0.0,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let plans = make_batch_plan(10, 0, &cfg, 50).unwrap();
        assert!(plans.iter().all(|p| p.kind() == StepKind::Asr && p.asr_items.len() == 3));
    }

    #[test]
    fn planner_split_is_round_robin() {
        let cfg = TrainConfig {
            lm_batch_fraction: 0.5,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let plans = make_batch_plan(10, 40, &cfg, 200).unwrap();
        let plain: usize = plans.iter().map(|p| p.lm_items.len()).sum();
        let pseudo: usize = plans.iter().map(|p| p.pseudo_lm_items.len()).sum();
        assert!(plain.abs_diff(pseudo) <= 1);
        assert!(plain > 0);
        assert_eq!(plans, make_batch_plan(10, 40, &cfg, 200).unwrap());
    }

    #[test]
    fn planner_rejects_missing_text() {
        let cfg = TrainConfig::default();
        assert!(BatchPlanner::new(10, 0, &cfg).is_err());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = GradBuffer(vec![Some(vec![3.0, 4.0]), None]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.0[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn metrics_line_marks_absent_terms() {
        let m = StepMetrics {
            step: 3,
            loss_ctc: None,
            loss_att: None,
            loss_lm: Some(0.5),
            loss_lm_pseudo: None,
            lr: 0.25,
            tau_mean: None,
            immature_count: 0,
            skipped: 0,
        };
        assert_eq!(m.csv_line(), "3,-,-,0.5,-,0.25,-,0");
        assert_eq!(METRICS_HEADER.split(',').count(), m.csv_line().split(',').count());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lambda: 1.5, ..TrainConfig::default() },
            TrainConfig { lm_batch_fraction: -0.1, ..TrainConfig::default() },
            TrainConfig { theta: Some(0.0), ..TrainConfig::default() },
            TrainConfig { pseudo_split: (0, 0), ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

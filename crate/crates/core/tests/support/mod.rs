//! Independent oracles shared by the integration and acceptance tests:
//! exhaustive CTC alignment enumeration, exhaustive hypothesis search,
//! a plain Levenshtein distance and the finite-difference gradient suites.
#![allow(dead_code)]

use std::collections::HashMap;

use promptasr::autodiff::{grad_check, grad_check_fn, Op, OpId, Tensor};
use promptasr::decoder::{Context, Decoder};
use promptasr::encoder::{average_runs, remove_blank_frames, CtcHead, Downsampler, Encoder, GreedyPath};
use promptasr::layers::{
    AttentionMask, Block, ConvModule, ConvSubsample, Embedding, FeedForward, LayerConfig, LayerNorm, Linear,
    MultiHeadAttention,
};
use promptasr::autodiff::Var;
use promptasr::params::{grad_check_params, Init, ParamStore, Session};
use promptasr::vocab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
/// Step for whole layers and losses. Stacked normalizations and softmaxes
/// have third derivatives large enough that the O(h²) central-difference
/// bias alone reaches 1e-4 at h = 1e-4.
pub const COMPOSITE_FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps this module free of distribution crates
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * normal(rng)).collect()).unwrap()
}

/// Row-normalized log probabilities from Gaussian logits of spread `sharpness`.
pub fn random_log_posterior(rng: &mut ChaCha8Rng, frames: usize, classes: usize, sharpness: f64) -> Tensor {
    let mut data = Vec::with_capacity(frames * classes);
    for _ in 0..frames {
        let logits: Vec<f64> = (0..classes).map(|_| sharpness * normal(rng)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        data.extend(logits.iter().map(|l| l - z));
    }
    Tensor::new(vec![frames, classes], data).unwrap()
}

/// Merge repeats, then drop blanks (class 0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Visits all `classes^frames` frame-level paths with their log probability.
pub fn for_each_path(lp: &Tensor, mut f: impl FnMut(&[usize], f64)) {
    let (frames, classes) = (lp.shape()[0], lp.shape()[1]);
    let mut path = vec![0usize; frames];
    loop {
        let logp: f64 = path.iter().enumerate().map(|(t, &c)| lp.row(t)[c]).sum();
        f(&path, logp);
        let mut t = 0;
        loop {
            if t == frames {
                return;
            }
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// Probability of every reachable labelling, by summing over all paths.
pub fn labelling_probs(lp: &Tensor) -> HashMap<Vec<usize>, f64> {
    let mut probs = HashMap::new();
    for_each_path(lp, |path, logp| *probs.entry(collapse(path)).or_insert(0.0) += logp.exp());
    probs
}

/// `log P(target)` by exhaustive alignment enumeration.
pub fn brute_force_ctc_logprob(lp: &Tensor, target: &[usize]) -> f64 {
    let mut total = 0.0;
    for_each_path(lp, |path, logp| {
        if collapse(path) == target {
            total += logp.exp();
        }
    });
    total.ln()
}

/// `log P(output starts with prefix)` by exhaustive enumeration.
pub fn brute_force_prefix_logprob(lp: &Tensor, prefix: &[usize]) -> f64 {
    let mut total = 0.0;
    for_each_path(lp, |path, logp| {
        if collapse(path).starts_with(prefix) {
            total += logp.exp();
        }
    });
    total.ln()
}

/// Random posterior with `T' ≤ 6` frames over `|V| ≤ 3` symbols plus blank,
/// and a feasible target of at most 3 labels.
pub fn random_ctc_instance(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let frames = rng.random_range(1..=6);
    let classes = rng.random_range(2..=4);
    let sharpness = rng.random_range(0.1..3.0);
    let lp = random_log_posterior(rng, frames, classes, sharpness);
    loop {
        let len = rng.random_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..classes)).collect();
        if promptasr::ctc::is_feasible(frames, &target) {
            return (lp, target);
        }
    }
}

/// First index of the row maximum.
pub fn argmax_oracle(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Outcome of comparing the compressors against direct oracles on one
/// random posterior and encoder output.
#[derive(Clone, Debug)]
pub struct CompressionTrial {
    pub tau_matches: bool,
    pub remove_exact: bool,
    pub average_err: f64,
}

pub fn compression_trial(rng: &mut ChaCha8Rng) -> CompressionTrial {
    use promptasr::encoder::{compress_average, compress_remove, greedy_path, CtcPosterior, EncoderOutput};

    let frames = rng.random_range(1..=30);
    let classes = rng.random_range(2..=6);
    let d = rng.random_range(1..=8);
    // a blank bias gives realistic blank-dominated paths
    let mut lp = random_log_posterior(rng, frames, classes, 2.0);
    let bias = rng.random_range(0.0..3.0);
    for t in 0..frames {
        lp.data_mut()[t * classes] += bias;
    }
    let posterior = CtcPosterior::from_logits(lp).unwrap();
    let h = random_tensor(rng, &[frames, d], 1.0);
    let path = greedy_path(&posterior);
    let labels: Vec<usize> = (0..frames).map(|t| argmax_oracle(posterior.row(t))).collect();
    let tau = labels.iter().filter(|&&l| l != 0).count();

    let enc = EncoderOutput::new(h.clone());
    let removed = compress_remove(&enc, &path).unwrap();
    let kept: Vec<f64> = (0..frames)
        .filter(|&t| labels[t] != 0)
        .flat_map(|t| h.row(t).to_vec())
        .collect();
    let remove_exact = removed.shape() == [tau, d] && removed.data() == kept.as_slice();

    let mut means = Vec::new();
    let mut t = 0;
    while t < frames {
        let start = t;
        while t < frames && labels[t] == labels[start] {
            t += 1;
        }
        if labels[start] != 0 {
            let n = (t - start) as f64;
            means.extend((0..d).map(|j| (start..t).map(|u| h.row(u)[j]).sum::<f64>() / n));
        }
    }
    let averaged = compress_average(&enc, &path).unwrap();
    let average_err = if averaged.numel() == means.len() && averaged.shape()[1] == d {
        averaged.data().iter().zip(&means).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    CompressionTrial {
        tau_matches: path.tau() == tau && path.labels() == labels.as_slice(),
        remove_exact,
        average_err,
    }
}

/// Every sequence over symbols `1..=n_symbols` of length at most `max_len`.
pub fn all_sequences(n_symbols: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for s in 1..=n_symbols {
                let mut longer: Vec<usize> = seq.clone();
                longer.push(s);
                next.push(longer);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Highest-scoring sequence among all sequences up to `max_len`; ties go to
/// the lexicographically smaller sequence. `−∞` scores are never selected.
pub fn exhaustive_best(n_symbols: usize, max_len: usize, score: impl Fn(&[usize]) -> f64) -> Option<(Vec<usize>, f64)> {
    let mut seqs = all_sequences(n_symbols, max_len);
    seqs.sort();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for seq in seqs {
        let s = score(&seq);
        if !s.is_finite() {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((seq, s));
        }
    }
    best
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

// Gradient suites.

/// Worst finite-difference error per checked item.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub draws: usize,
    pub worst: f64,
}

/// Runs `draws` accepted draws. A draw returns `None` when it lands next to
/// a ReLU kink, where central differences do not estimate the derivative;
/// such draws are replaced by fresh ones.
fn run<F>(name: &str, draws: usize, seed: u64, mut draw: F) -> SuiteResult
where
    F: FnMut(&mut ChaCha8Rng, u64) -> Option<f64>,
{
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let (mut accepted, mut attempt) = (0, 0u64);
    while accepted < draws {
        attempt += 1;
        assert!(attempt < 100 * draws as u64, "{name}: too many draws near kinks");
        if let Some(err) = draw(&mut r, seed.wrapping_mul(1000).wrapping_add(attempt)) {
            worst = worst.max(err);
            accepted += 1;
        }
    }
    SuiteResult {
        name: name.to_string(),
        draws,
        worst,
    }
}

/// Smallest `|x|` over every ReLU input evaluated by `f`.
fn relu_margin<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Session, &[Var]) -> promptasr::Result<Var>,
{
    let mut s = Session::training(store, None);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| s.graph.leaf(t.clone().with_requires_grad(true)))
        .collect();
    f(&mut s, &vars).unwrap();
    s.graph
        .record()
        .iter()
        .filter(|n| matches!(n.op, Op::Relu))
        .flat_map(|n| s.graph.value(n.inputs[0]).data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// [`grad_check_params`] unless a ReLU input lies within `KINK_MARGIN` of zero.
fn checked<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> Option<f64>
where
    F: Fn(&mut Session, &[Var]) -> promptasr::Result<Var>,
{
    if relu_margin(store, inputs, &f) < KINK_MARGIN {
        return None;
    }
    Some(grad_check_params(store, inputs, COMPOSITE_FD_STEP, f).unwrap())
}

const KINK_MARGIN: f64 = 1e-3;

/// Entries kept at least `margin` away from zero, so kinks stay out of reach
/// of the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = margin + normal(rng).abs();
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn feasible_target(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Vec<usize> {
    loop {
        let len = rng.random_range(0..=frames.min(4));
        let t: Vec<usize> = (0..len).map(|_| rng.random_range(1..classes)).collect();
        if promptasr::ctc::is_feasible(frames, &t) {
            return t;
        }
    }
}

/// One random draw of `op` with suitable inputs.
fn op_draw(id: OpId, rng: &mut ChaCha8Rng) -> (Op, Vec<Tensor>) {
    let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let x = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape, 1.0);
    match id {
        OpId::MatMul => {
            let k = dim(rng, 1, 4);
            (Op::MatMul, vec![x(rng, &[m, k]), x(rng, &[k, n])])
        }
        OpId::Add => {
            let b = if rng.random_bool(0.5) { x(rng, &[m, n]) } else { x(rng, &[n]) };
            (Op::Add, vec![x(rng, &[m, n]), b])
        }
        OpId::Mul => (Op::Mul, vec![x(rng, &[m, n]), x(rng, &[m, n])]),
        OpId::Scale => (Op::Scale(2.0 * normal(rng)), vec![x(rng, &[m, n])]),
        OpId::Softmax => (Op::Softmax, vec![x(rng, &[m, n])]),
        OpId::LogSoftmax => (Op::LogSoftmax, vec![x(rng, &[m, n])]),
        OpId::LogSumExp => (Op::LogSumExp, vec![x(rng, &[m, n])]),
        OpId::LayerNorm => {
            let d = dim(rng, 2, 8);
            (
                Op::LayerNorm { eps: 1e-5 },
                vec![x(rng, &[m, d]), x(rng, &[d]), x(rng, &[d])],
            )
        }
        OpId::Relu => (Op::Relu, vec![away_from_zero(rng, &[m, n], 0.01)]),
        OpId::EmbeddingLookup => {
            let v = dim(rng, 1, 5);
            let ids = (0..dim(rng, 1, 6)).map(|_| rng.random_range(0..v)).collect();
            (Op::EmbeddingLookup(ids), vec![x(rng, &[v, n])])
        }
        OpId::Concat => {
            let axis = rng.random_range(0..2);
            let parts = (0..dim(rng, 1, 3))
                .map(|_| {
                    let k = dim(rng, 1, 3);
                    if axis == 0 {
                        x(rng, &[k, n])
                    } else {
                        x(rng, &[m, k])
                    }
                })
                .collect();
            (Op::Concat { axis }, parts)
        }
        OpId::Slice => {
            let axis = rng.random_range(0..2);
            let len = if axis == 0 { m } else { n };
            let start = rng.random_range(0..=len);
            let end = rng.random_range(start..=len);
            (Op::Slice { axis, start, end }, vec![x(rng, &[m, n])])
        }
        OpId::Transpose => (Op::Transpose, vec![x(rng, &[m, n])]),
        OpId::MaskedFill => {
            let mask = (0..m * n).map(|_| rng.random_bool(0.4)).collect();
            (Op::MaskedFill { mask, value: -3.0 }, vec![x(rng, &[m, n])])
        }
        OpId::ReduceSum => (Op::ReduceSum, vec![x(rng, &[m, n])]),
        OpId::ReduceMean => (Op::ReduceMean, vec![x(rng, &[m, n])]),
        OpId::Conv1dStrided => {
            let (k, stride) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let t = k + dim(rng, 0, 6);
            (
                Op::Conv1dStrided { stride },
                vec![x(rng, &[t, m]), x(rng, &[k, m, n])],
            )
        }
        OpId::DepthwiseConv1d => {
            let (k, t) = (2 * dim(rng, 0, 2) + 1, dim(rng, 1, 7));
            (Op::DepthwiseConv1d, vec![x(rng, &[t, n]), x(rng, &[k, n])])
        }
        OpId::CtcLoss => {
            let (t, classes) = (dim(rng, 1, 6), dim(rng, 2, 4));
            let target = feasible_target(rng, t, classes);
            (
                Op::CtcLoss { target, blank: 0 },
                vec![random_log_posterior(rng, t, classes, 1.5)],
            )
        }
    }
}

/// Every differentiable op, `draws` random inputs each.
pub fn op_suite(draws: usize, seed: u64) -> Vec<SuiteResult> {
    OpId::ALL
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            run(id.name(), draws, seed + i as u64, |rng, _| {
                let (op, inputs) = op_draw(id, rng);
                Some(grad_check(&op, &inputs, FD_STEP).unwrap())
            })
        })
        .collect()
}

fn layer_cfg(rng: &mut ChaCha8Rng) -> LayerConfig {
    let heads = dim(rng, 1, 2);
    LayerConfig {
        model_dim: heads * dim(rng, 2, 3),
        heads,
        ff_dim: dim(rng, 3, 6),
        blocks: 1,
        dropout_rate: 0.0,
    }
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> AttentionMask {
    match rng.random_range(0..3) {
        0 => AttentionMask::full(n, n),
        1 => AttentionMask::causal(n),
        _ => {
            let keep: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.6)).collect();
            // the diagonal keeps every row non-empty
            AttentionMask::from_fn(n, n, |q, k| q == k || keep[q * n + k])
        }
    }
}

fn random_path(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> GreedyPath {
    GreedyPath::new((0..frames).map(|_| rng.random_range(0..classes)).collect())
}

/// Every network layer, `draws` random instances each. Parameters and data
/// inputs are perturbed.
pub fn layer_suite(draws: usize, seed: u64) -> Vec<SuiteResult> {
    let mut out = Vec::new();
    let x = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape, 1.0);

    out.push(run("linear", draws, seed, |rng, s| {
        let (din, dout, rows) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 4));
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, &mut Init::new(s), "l", din, dout);
        randomize(&mut store, rng);
        checked(&store, &[x(rng, &[rows, din])], |s, v| l.forward(s, v[0]))
    }));
    out.push(run("layer_norm", draws, seed + 1, |rng, s| {
        let (d, rows) = (dim(rng, 2, 8), dim(rng, 1, 4));
        let mut store = ParamStore::new();
        let l = LayerNorm::new(&mut store, &mut Init::new(s), "ln", d);
        randomize(&mut store, rng);
        checked(&store, &[x(rng, &[rows, d])], |s, v| l.forward(s, v[0]))
    }));
    out.push(run("embedding", draws, seed + 2, |rng, s| {
        let (v, d) = (dim(rng, 1, 6), dim(rng, 1, 5));
        let ids: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.random_range(0..v)).collect();
        let mut store = ParamStore::new();
        let e = Embedding::new(&mut store, &mut Init::new(s), "e", v, d);
        checked(&store, &[], |s, _| e.forward(s, &ids))
    }));
    out.push(run("feed_forward", draws, seed + 3, |rng, s| {
        let (d, ff, rows) = (dim(rng, 1, 5), dim(rng, 1, 6), dim(rng, 1, 4));
        let mut store = ParamStore::new();
        let l = FeedForward::new(&mut store, &mut Init::new(s), "ff", d, ff);
        randomize(&mut store, rng);
        let input = away_from_zero(rng, &[rows, d], 0.01);
        checked(&store, &[input], |s, v| l.forward(s, v[0], 0.0))
    }));
    out.push(run("multi_head_attention", draws, seed + 4, |rng, s| {
        let cfg = layer_cfg(rng);
        let n = dim(rng, 1, 5);
        let mask = random_mask(rng, n);
        let mut store = ParamStore::new();
        let l = MultiHeadAttention::new(&mut store, &mut Init::new(s), "a", cfg.model_dim, cfg.heads);
        checked(&store, &[x(rng, &[n, cfg.model_dim])], |s, v| l.forward(s, v[0], &mask))
    }));
    out.push(run("conv_module", draws, seed + 5, |rng, s| {
        let (d, t, k) = (dim(rng, 1, 4), dim(rng, 1, 6), 2 * dim(rng, 0, 2) + 1);
        let mut store = ParamStore::new();
        let l = ConvModule::new(&mut store, &mut Init::new(s), "c", d, k);
        randomize(&mut store, rng);
        checked(&store, &[x(rng, &[t, d])], |s, v| l.forward(s, v[0]))
    }));
    out.push(run("block", draws, seed + 6, |rng, s| {
        let cfg = layer_cfg(rng);
        let n = dim(rng, 1, 5);
        let mask = random_mask(rng, n);
        let conv = rng.random_bool(0.5).then_some(3);
        let mut store = ParamStore::new();
        let l = Block::new(&mut store, &mut Init::new(s), "b", &cfg, conv);
        randomize(&mut store, rng);
        checked(&store, &[x(rng, &[n, cfg.model_dim])], |s, v| l.forward(s, v[0], &mask))
    }));
    out.push(run("conv_subsample", draws, seed + 7, |rng, s| {
        let rate = if rng.random_bool(0.5) { 2 } else { 4 };
        let (fin, d) = (dim(rng, 1, 4), dim(rng, 1, 4));
        let t = rate + dim(rng, 0, 8);
        let mut store = ParamStore::new();
        let l = ConvSubsample::new(&mut store, &mut Init::new(s), "sub", fin, d, rate).unwrap();
        randomize(&mut store, rng);
        checked(&store, &[x(rng, &[t, fin])], |s, v| l.forward(s, v[0]))
    }));
    out.push(run("encoder", draws, seed + 8, |rng, s| {
        let cfg = layer_cfg(rng);
        let fin = dim(rng, 1, 4);
        let t = 2 + dim(rng, 0, 8);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut Init::new(s), "enc", fin, 2, &cfg, Some(3)).unwrap();
        randomize(&mut store, rng);
        checked(&store, &[x(rng, &[t, fin])], |s, v| enc.forward(s, v[0]))
    }));
    out.push(run("ctc_head", draws, seed + 9, |rng, s| {
        let (d, classes, t) = (dim(rng, 1, 5), dim(rng, 2, 5), dim(rng, 1, 5));
        let mut store = ParamStore::new();
        let head = CtcHead::new(&mut store, &mut Init::new(s), "ctc", d, classes);
        randomize(&mut store, rng);
        checked(&store, &[x(rng, &[t, d])], |s, v| head.forward(s, v[0]))
    }));
    out.push(run("downsample", draws, seed + 10, |rng, s| {
        let (d, factor) = (dim(rng, 1, 4), dim(rng, 1, 3));
        let t = factor + dim(rng, 0, 6);
        let mut store = ParamStore::new();
        let down = Downsampler::new(&mut store, &mut Init::new(s), "down", d, factor).unwrap();
        randomize(&mut store, rng);
        checked(&store, &[x(rng, &[t, d])], |s, v| down.forward(s, v[0]))
    }));
    out.push(run("remove_blank_frames", draws, seed + 11, |rng, _| {
        let (t, d) = (dim(rng, 1, 7), dim(rng, 1, 4));
        let path = random_path(rng, t, 3);
        Some(grad_check_fn(&[x(rng, &[t, d])], FD_STEP, |g, v| remove_blank_frames(g, v[0], &path)).unwrap())
    }));
    out.push(run("average_runs", draws, seed + 12, |rng, _| {
        let (t, d) = (dim(rng, 1, 7), dim(rng, 1, 4));
        let path = random_path(rng, t, 3);
        Some(grad_check_fn(&[x(rng, &[t, d])], FD_STEP, |g, v| average_runs(g, v[0], &path)).unwrap())
    }));
    out.push(run("decoder", draws, seed + 13, |rng, s| {
        let cfg = layer_cfg(rng);
        let vocab = Vocab::new(dim(rng, 1, 3)).unwrap();
        let body: Vec<usize> = (0..dim(rng, 0, 3)).map(|_| rng.random_range(1..=vocab.n_symbols())).collect();
        let tau = dim(rng, 0, 3);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, &mut Init::new(s), "dec", &cfg, vocab).unwrap();
        randomize(&mut store, rng);
        let prompt = x(rng, &[tau, cfg.model_dim]);
        let inputs = if tau == 0 { vec![] } else { vec![prompt] };
        checked(&store, &inputs, |s, v| {
            dec.token_nll(s, Context::Prompted(v.first().copied()), &body)
        })
    }));
    out
}

/// Moves zero-initialized biases and unit gains off their special values so
/// every parameter is exercised at a generic point.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += 0.1 * normal(rng);
        }
    }
}

/// The two training losses through a whole small recognizer: the CTC loss
/// of the encoder and head, and the per-token mixed ASR loss
/// `λ·L_ctc/I + (1−λ)·L_att/(I+1)` including the prompt path. Prompt frames
/// are selected by a path fixed before differencing; the selection itself is
/// not differentiable. Also the decoder's plain and pseudo-prompt LM losses.
pub fn loss_suite(draws: usize, seed: u64) -> Vec<SuiteResult> {
    use promptasr::model::{AsrModel, Compression, ModelConfig};

    let model_for = |rng: &mut ChaCha8Rng, s: u64| {
        let compression = match rng.random_range(0..3) {
            0 => Compression::Remove,
            1 => Compression::Average,
            _ => Compression::Downsample(2),
        };
        let cfg = ModelConfig {
            feat_dim: dim(rng, 1, 3),
            vocab_size: dim(rng, 1, 3),
            model_dim: 4,
            heads: 2,
            ff_dim: 5,
            encoder_blocks: 1,
            decoder_blocks: 1,
            subsample: 2,
            conv_kernel: Some(3),
            compression,
            dropout_rate: 0.0,
        };
        let mut model = AsrModel::new(cfg, s).unwrap();
        randomize(&mut model.store, rng);
        // sharper CTC rows so the fixed path keeps some non-blank frames
        let w = model.ctc_head.proj.weight;
        for v in model.store.get_mut(w).data_mut() {
            *v *= 10.0;
        }
        model
    };

    let mut out = Vec::new();
    out.push(run("ctc_loss", draws, seed, |rng, s| {
        let model = model_for(rng, s);
        let t = 4 + 2 * dim(rng, 0, 3);
        let x = random_tensor(rng, &[t, model.config.feat_dim], 1.0);
        let target = feasible_target(rng, t / 2, model.vocab.n_classes());
        checked(&model.store, &[x], |s, v| {
            let h = model.encoder.forward(s, v[0])?;
            let lp = model.ctc_head.forward(s, h)?;
            s.graph.ctc_loss(lp, &target, 0)
        })
    }));
    out.push(run("asr_loss", draws, seed + 1, |rng, s| {
        let model = model_for(rng, s);
        let t = 4 + 2 * dim(rng, 0, 3);
        let x = random_tensor(rng, &[t, model.config.feat_dim], 1.0);
        let target = feasible_target(rng, t / 2, model.vocab.n_classes());
        let lambda: f64 = rng.random();
        let path = {
            let h = model.encode(&promptasr::encoder::AudioFeatures::new("u", x.clone()).unwrap()).unwrap();
            promptasr::encoder::greedy_path(&model.ctc_posteriors(&h).unwrap())
        };
        let n_ctc = target.len().max(1) as f64;
        let n_att = (target.len() + 1) as f64;
        checked(&model.store, &[x], |s, v| {
            let h = model.encoder.forward(s, v[0])?;
            let lp = model.ctc_head.forward(s, h)?;
            let ctc = s.graph.ctc_loss(lp, &target, 0)?;
            let frames = model.compress_var(s, h, &path)?;
            let prompt = model.map_prompt_var(s, frames)?;
            let att = model.decoder.token_nll(s, Context::Prompted(prompt), &target)?;
            let ctc = s.graph.scale(ctc, lambda / n_ctc)?;
            let att = s.graph.scale(att, (1.0 - lambda) / n_att)?;
            s.graph.add(ctc, att)
        })
    }));
    out.push(run("lm_loss", draws, seed + 2, |rng, s| {
        let model = model_for(rng, s);
        let body: Vec<usize> = (0..dim(rng, 1, 4)).map(|_| rng.random_range(1..=model.vocab.n_symbols())).collect();
        let pseudo = rng.random_bool(0.5);
        checked(&model.store, &[], |s, _| {
            let ctx = if pseudo {
                Context::Prompted(Some(model.decoder.embed_tokens(s, &body)?))
            } else {
                Context::Lm
            };
            model.decoder.token_nll(s, ctx, &body)
        })
    }));
    out
}

// Beam search oracle.

/// A random recognizer and external LM over three symbols with output heads
/// scaled up, so scores are peaked the way a trained model's are.
pub fn beam_toy(seed: u64) -> (promptasr::model::AsrModel, promptasr::model::LanguageModel) {
    use promptasr::model::{AsrModel, Compression, LanguageModel, LmConfig, ModelConfig};

    let cfg = ModelConfig {
        feat_dim: 4,
        vocab_size: 3,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        encoder_blocks: 1,
        decoder_blocks: 1,
        subsample: 2,
        conv_kernel: Some(3),
        compression: Compression::Remove,
        dropout_rate: 0.0,
    };
    let mut model = AsrModel::new(cfg, seed).unwrap();
    scale_param(&mut model.store, model.ctc_head.proj.weight, 30.0);
    scale_param(&mut model.store, model.decoder.head.weight, 4.0);
    let lm_cfg = LmConfig {
        vocab_size: 3,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        blocks: 1,
    };
    let mut lm = LanguageModel::new(lm_cfg, seed + 1).unwrap();
    scale_param(&mut lm.store, lm.decoder.head.weight, 4.0);
    (model, lm)
}

fn scale_param(store: &mut ParamStore, id: promptasr::params::ParamId, c: f64) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= c);
}

/// Combined score of a finished hypothesis, computed from scratch: full
/// decoder recompute, enumerated CTC labelling probability and the LM
/// sentence probability.
pub fn oracle_score(
    model: &promptasr::model::AsrModel,
    lm: Option<&promptasr::model::LanguageModel>,
    prompt: &promptasr::decoder::PromptSequence,
    labellings: &HashMap<Vec<usize>, f64>,
    weights: &promptasr::decoding::FusionWeights,
    y: &[usize],
) -> f64 {
    let mut with_eos = y.to_vec();
    with_eos.push(model.vocab.eos());
    let dec = model.sequence_logprob(prompt, &with_eos).unwrap();
    let mut total = dec + weights.length_penalty * y.len() as f64;
    if weights.ctc_weight != 0.0 {
        total += weights.ctc_weight * labellings.get(y).map_or(f64::NEG_INFINITY, |p| p.ln());
    }
    if weights.lm_weight != 0.0 {
        total += weights.lm_weight * lm.unwrap().sentence_logprob(y).unwrap();
    }
    total
}

#[derive(Clone, Debug)]
pub struct BeamTrial {
    pub oracle: Vec<usize>,
    pub oracle_score: f64,
    pub exhaustive: Vec<usize>,
    pub exhaustive_score: f64,
    pub beam: Vec<usize>,
    pub beam_score: f64,
}

/// One random utterance of 12 input frames (6 encoder frames), decoded with
/// an exhaustive beam, with `beam`, and by brute force over every output of
/// at most 4 symbols.
pub fn beam_trial(
    model: &promptasr::model::AsrModel,
    lm: &promptasr::model::LanguageModel,
    rng: &mut ChaCha8Rng,
    beam: usize,
) -> BeamTrial {
    use promptasr::decoding::{beam_search, FusionWeights};
    use promptasr::encoder::AudioFeatures;

    let x = AudioFeatures::new("toy", random_tensor(rng, &[12, model.config.feat_dim], 1.5)).unwrap();
    let prep = model.prepare(&x).unwrap();
    let labellings = labelling_probs(prep.posterior.log_probs());
    let weights = |beam| FusionWeights {
        beam,
        max_len: Some(4),
        ..FusionWeights::default()
    };
    let full = weights(usize::MAX);
    let (oracle, oracle_score) = exhaustive_best(model.vocab.n_symbols(), 4, |y| {
        oracle_score(model, Some(lm), &prep.prompt, &labellings, &full, y)
    })
    .unwrap();
    let ex = beam_search(model, &prep.prompt, &prep.posterior, Some(lm), &full).unwrap();
    let bm = beam_search(model, &prep.prompt, &prep.posterior, Some(lm), &weights(beam)).unwrap();
    BeamTrial {
        oracle,
        oracle_score,
        exhaustive: ex.best.tokens,
        exhaustive_score: ex.best.combined,
        beam: bm.best.tokens,
        beam_score: bm.best.combined,
    }
}

// Tiny models and data for training checks.

pub fn tiny_config() -> promptasr::model::ModelConfig {
    promptasr::model::ModelConfig {
        feat_dim: 4,
        vocab_size: 3,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        encoder_blocks: 1,
        decoder_blocks: 1,
        subsample: 2,
        conv_kernel: Some(3),
        compression: promptasr::model::Compression::Remove,
        dropout_rate: 0.0,
    }
}

/// Paired items of 12 input frames with transcripts of 1 to 2 symbols, so
/// every target fits the 6 encoder frames.
pub fn tiny_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<promptasr::training::PairItem> {
    use promptasr::encoder::AudioFeatures;
    use rand::Rng;
    (0..n)
        .map(|i| {
            let len = rng.random_range(1..=2);
            promptasr::training::PairItem {
                features: AudioFeatures::new(format!("p{i}"), random_tensor(rng, &[12, 4], 1.5)).unwrap(),
                tokens: (0..len).map(|_| rng.random_range(1..=3)).collect(),
            }
        })
        .collect()
}

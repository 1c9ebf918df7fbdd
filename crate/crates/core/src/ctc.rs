//! CTC lattice computations in log space: the negative log-likelihood with its
//! gradient, and label-prefix scoring for joint decoding.

use crate::error::{Error, Result};
use crate::kernels::log_add;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Number of adjacent equal labels; each one forces an extra blank frame.
pub fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(frames: usize, target: &[usize]) -> bool {
    frames >= target.len() + repeats(target)
}

fn check_target(frames: usize, classes: usize, target: &[usize], blank: usize) -> Result<()> {
    for &label in target {
        if label >= classes || label == blank {
            return Err(Error::InvalidTokens(format!(
                "CTC target label {label} is blank or outside {classes} classes"
            )));
        }
    }
    if !is_feasible(frames, target) {
        return Err(Error::InfeasibleTarget {
            frames,
            target_len: target.len(),
            repeats: repeats(target),
        });
    }
    Ok(())
}

/// Blank-interleaved label sequence `∅ y1 ∅ y2 … ∅`.
fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Forward variables `α[t][s]` (log), including the emission at `t`.
fn alphas(lp: &[f64], frames: usize, classes: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![NEG_INF; frames * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        let row = &lp[t * classes..(t + 1) * classes];
        for s in 0..s_len {
            let prev = (t - 1) * s_len;
            let mut acc = alpha[prev + s];
            if s >= 1 {
                acc = log_add(acc, alpha[prev + s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[prev + s - 2]);
            }
            alpha[t * s_len + s] = if acc == NEG_INF { NEG_INF } else { acc + row[ext[s]] };
        }
    }
    alpha
}

/// `−log P(target | lp)` for a `[frames × classes]` log-probability matrix.
pub fn ctc_nll(lp: &[f64], frames: usize, classes: usize, target: &[usize], blank: usize) -> Result<f64> {
    check_target(frames, classes, target, blank)?;
    if frames == 0 {
        return Ok(0.0);
    }
    let ext = extended(target, blank);
    let alpha = alphas(lp, frames, classes, &ext, blank);
    let s_len = ext.len();
    let last = (frames - 1) * s_len;
    let mut total = alpha[last + s_len - 1];
    if s_len > 1 {
        total = log_add(total, alpha[last + s_len - 2]);
    }
    Ok(-total)
}

/// Gradient of [`ctc_nll`] with respect to every entry of `lp`, treating the
/// entries as free variables: `−Σ_{s: ext[s]=k} α_t(s)β_t(s)/P`.
pub fn ctc_nll_grad(lp: &[f64], frames: usize, classes: usize, target: &[usize], blank: usize) -> Result<Vec<f64>> {
    check_target(frames, classes, target, blank)?;
    let mut grad = vec![0.0; frames * classes];
    if frames == 0 {
        return Ok(grad);
    }
    let ext = extended(target, blank);
    let s_len = ext.len();
    let alpha = alphas(lp, frames, classes, &ext, blank);

    // β[t][s]: log-probability of finishing from state s at t, emission at t excluded.
    let mut beta = vec![NEG_INF; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        let next = &lp[(t + 1) * classes..(t + 2) * classes];
        for s in 0..s_len {
            let nb = (t + 1) * s_len;
            let mut acc = beta[nb + s] + next[ext[s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[nb + s + 1] + next[ext[s + 1]]);
            }
            if s + 2 < s_len && can_skip(&ext, s + 2, blank) {
                acc = log_add(acc, beta[nb + s + 2] + next[ext[s + 2]]);
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > NEG_INF {
                grad[t * classes + ext[s]] -= occ.exp();
            }
        }
    }
    Ok(grad)
}

/// Prefix-lattice state for one hypothesis: log-probabilities that the first
/// `t+1` frames produced exactly this prefix, ending in a non-blank (`gamma_n`)
/// or a blank (`gamma_b`).
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixState {
    gamma_n: Vec<f64>,
    gamma_b: Vec<f64>,
    last: Option<usize>,
    len: usize,
}

impl PrefixState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Scores label prefixes against a fixed CTC posterior.
#[derive(Clone, Debug)]
pub struct PrefixScorer {
    lp: Vec<f64>,
    frames: usize,
    classes: usize,
    blank: usize,
}

impl PrefixScorer {
    pub fn new(lp: Vec<f64>, frames: usize, classes: usize, blank: usize) -> Self {
        assert_eq!(lp.len(), frames * classes);
        Self {
            lp,
            frames,
            classes,
            blank,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn at(&self, t: usize, k: usize) -> f64 {
        self.lp[t * self.classes + k]
    }

    pub fn initial(&self) -> PrefixState {
        let mut gamma_b = vec![NEG_INF; self.frames];
        let mut acc = 0.0;
        for (t, g) in gamma_b.iter_mut().enumerate() {
            acc += self.at(t, self.blank);
            *g = acc;
        }
        PrefixState {
            gamma_n: vec![NEG_INF; self.frames],
            gamma_b,
            last: None,
            len: 0,
        }
    }

    /// Extends `prefix` by `label`; returns the new state and the log
    /// probability that the CTC output begins with the extended prefix.
    pub fn extend(&self, prefix: &PrefixState, label: usize) -> (PrefixState, f64) {
        let t_len = self.frames;
        let mut gamma_n = vec![NEG_INF; t_len];
        let mut gamma_b = vec![NEG_INF; t_len];
        if t_len == 0 {
            return (
                PrefixState {
                    gamma_n,
                    gamma_b,
                    last: Some(label),
                    len: prefix.len + 1,
                },
                NEG_INF,
            );
        }
        if prefix.is_empty() {
            gamma_n[0] = self.at(0, label);
        }
        let mut psi = gamma_n[0];
        for t in 1..t_len {
            let phi = if prefix.last == Some(label) {
                prefix.gamma_b[t - 1]
            } else {
                log_add(prefix.gamma_n[t - 1], prefix.gamma_b[t - 1])
            };
            let emit = self.at(t, label);
            gamma_n[t] = log_add(gamma_n[t - 1], phi) + emit;
            gamma_b[t] = log_add(gamma_b[t - 1], gamma_n[t - 1]) + self.at(t, self.blank);
            psi = log_add(psi, phi + emit);
        }
        (
            PrefixState {
                gamma_n,
                gamma_b,
                last: Some(label),
                len: prefix.len + 1,
            },
            psi,
        )
    }

    /// Log probability that the CTC output is exactly this prefix.
    pub fn full(&self, prefix: &PrefixState) -> f64 {
        match self.frames {
            0 => {
                if prefix.is_empty() {
                    0.0
                } else {
                    NEG_INF
                }
            }
            t => log_add(prefix.gamma_n[t - 1], prefix.gamma_b[t - 1]),
        }
    }

    /// Log prefix probability of a whole label sequence (0 for the empty one).
    pub fn prefix_score(&self, prefix: &[usize]) -> f64 {
        let mut state = self.initial();
        let mut score = 0.0;
        for &l in prefix {
            let (next, psi) = self.extend(&state, l);
            state = next;
            score = psi;
        }
        score
    }

    pub fn full_score(&self, labels: &[usize]) -> f64 {
        let mut state = self.initial();
        for &l in labels {
            state = self.extend(&state, l).0;
        }
        self.full(&state)
    }
}

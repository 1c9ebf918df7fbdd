mod support;

use promptasr::autodiff::{Graph, Tensor};
use promptasr::encoder::{ctc_greedy_decode, greedy_path, CtcPosterior};
use promptasr::Error;
use proptest::prelude::*;
use rand::Rng;

fn uniform(frames: usize, classes: usize) -> Tensor {
    Tensor::new(vec![frames, classes], vec![-(classes as f64).ln(); frames * classes]).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn loss_matches_alignment_enumeration() {
    let mut rng = support::rng(101);
    for _ in 0..500 {
        let (lp, target) = support::random_ctc_instance(&mut rng);
        let oracle = -support::brute_force_ctc_logprob(&lp, &target);
        let loss = CtcPosterior::new(lp.clone()).unwrap().loss(&target).unwrap();
        assert!(rel_err(loss, oracle) < 1e-6, "{loss} vs {oracle} for {target:?}");

        let mut g = Graph::new();
        let v = g.leaf(lp.with_requires_grad(true));
        let out = g.ctc_loss(v, &target, 0).unwrap();
        assert_eq!(g.value(out).item(), loss);
    }
}

#[test]
fn uniform_two_frames_single_label() {
    let p = CtcPosterior::new(uniform(2, 3)).unwrap();
    assert!((p.loss(&[1]).unwrap() - 3f64.ln()).abs() < 1e-9);
    assert!((p.prefix_scorer().full_score(&[1]) - (1.0f64 / 3.0).ln()).abs() < 1e-9);
}

#[test]
fn infeasible_targets_are_errors() {
    let p = CtcPosterior::new(uniform(1, 3)).unwrap();
    assert!(matches!(p.loss(&[1, 1]), Err(Error::InfeasibleTarget { .. })));
    let p = CtcPosterior::new(uniform(2, 3)).unwrap();
    assert!(matches!(p.loss(&[2, 2]), Err(Error::InfeasibleTarget { .. })));
    assert!(p.loss(&[1, 2]).is_ok());
}

#[test]
fn probabilities_over_all_labellings_sum_to_one() {
    let mut rng = support::rng(7);
    for frames in 1..=3 {
        for _ in 0..20 {
            let lp = support::random_log_posterior(&mut rng, frames, 3, 2.0);
            let p = CtcPosterior::new(lp).unwrap();
            let total: f64 = support::all_sequences(2, frames)
                .iter()
                .filter_map(|y| p.loss(y).ok())
                .map(|l| (-l).exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-6, "T'={frames}: {total}");
        }
    }
}

#[test]
fn prefix_scores_match_enumeration() {
    let mut rng = support::rng(8);
    for _ in 0..200 {
        let frames = rng.random_range(1..=5);
        let classes = rng.random_range(2..=4);
        let lp = support::random_log_posterior(&mut rng, frames, classes, 1.5);
        let scorer = CtcPosterior::new(lp.clone()).unwrap().prefix_scorer();
        let len = rng.random_range(1..=3);
        let prefix: Vec<usize> = (0..len).map(|_| rng.random_range(1..classes)).collect();
        let got = scorer.prefix_score(&prefix);
        let want = support::brute_force_prefix_logprob(&lp, &prefix);
        if want == f64::NEG_INFINITY {
            assert_eq!(got, f64::NEG_INFINITY);
        } else {
            assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
        }
        let full = scorer.full_score(&prefix);
        let exact = support::brute_force_ctc_logprob(&lp, &prefix);
        if exact == f64::NEG_INFINITY {
            assert_eq!(full, f64::NEG_INFINITY);
        } else {
            assert!((full - exact).abs() < 1e-9 * exact.abs().max(1.0));
        }
    }
}

#[test]
fn prefix_mass_is_conserved() {
    let mut rng = support::rng(9);
    for _ in 0..300 {
        let frames = rng.random_range(1..=8);
        let classes = rng.random_range(2..=5);
        let lp = support::random_log_posterior(&mut rng, frames, classes, 1.0);
        let scorer = CtcPosterior::new(lp).unwrap().prefix_scorer();
        let len = rng.random_range(0..=frames.min(3));
        let prefix: Vec<usize> = (0..len).map(|_| rng.random_range(1..classes)).collect();
        let parent = scorer.prefix_score(&prefix).exp();
        let children: f64 = (1..classes)
            .map(|c| {
                let mut longer = prefix.clone();
                longer.push(c);
                scorer.prefix_score(&longer).exp()
            })
            .sum();
        let ends = scorer.full_score(&prefix).exp();
        assert!((children + ends - parent).abs() < 1e-9, "{children} + {ends} != {parent}");
    }
}

#[test]
fn prefix_edge_cases() {
    let p = CtcPosterior::new(uniform(2, 3)).unwrap();
    assert_eq!(p.prefix_score(&[]), 0.0);
    assert_eq!(p.prefix_score(&[1, 2, 1]), f64::NEG_INFINITY);
    // all labellings together carry the whole mass
    let lp = support::random_log_posterior(&mut support::rng(3), 4, 3, 1.0);
    let total: f64 = support::labelling_probs(&lp).values().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn greedy_decode_ignores_row_rescaling(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..12),
        scales in prop::collection::vec(0.01f64..100.0, 12),
    ) {
        let frames = rows.len();
        let probs: Vec<f64> = rows.concat();
        let lp = Tensor::new(vec![frames, 4], probs.iter().map(|p| p.ln()).collect()).unwrap();
        let scaled: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(i, p)| (p * scales[i / 4]).ln())
            .collect();
        let a = greedy_path(&CtcPosterior::from_logits(lp).unwrap());
        let b = greedy_path(&CtcPosterior::from_logits(Tensor::new(vec![frames, 4], scaled).unwrap()).unwrap());
        prop_assert_eq!(ctc_greedy_decode(&a), ctc_greedy_decode(&b));
    }

    #[test]
    fn greedy_decode_matches_collapse_oracle(labels in prop::collection::vec(0usize..4, 0..20)) {
        let path = promptasr::encoder::GreedyPath::new(labels.clone());
        prop_assert_eq!(ctc_greedy_decode(&path), support::collapse(&labels));
    }
}

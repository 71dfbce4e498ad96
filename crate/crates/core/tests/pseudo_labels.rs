mod common;

use common::majority_vote;
use fedmatch::nn::ProbDist;
use fedmatch::ssl::agreement_pseudo_label;

const C: usize = 3;
const TAU: f64 = 0.85;

/// One row peaked at `class` with top probability `top`.
fn peaked(class: usize, top: f64) -> ProbDist {
    let rest = (1.0 - top) / (C - 1) as f64;
    let row: Vec<f64> = (0..C).map(|c| if c == class { top } else { rest }).collect();
    ProbDist::from_rows(&[row]).unwrap()
}

fn check(local: usize, helpers: &[usize], confident: bool) {
    let top = if confident { 0.9 } else { 0.6 };
    let local_dist = peaked(local, top);
    let helper_dists: Vec<ProbDist> = helpers.iter().map(|&h| peaked(h, 0.5)).collect();
    let out = agreement_pseudo_label(&local_dist, &helper_dists, TAU).unwrap();

    let mut votes = vec![local];
    votes.extend_from_slice(helpers);
    let expected = majority_vote(&votes, C);
    let row: Vec<f64> = out.labels.row(0).to_vec();
    let want: Vec<f64> = (0..C).map(|c| if c == expected { 1.0 } else { 0.0 }).collect();
    assert_eq!(row, want, "local {local} helpers {helpers:?}");
    assert_eq!(out.keep_mask, vec![confident]);
}

#[test]
fn two_helpers_all_patterns() {
    let mut cases = 0;
    for local in 0..C {
        for h1 in 0..C {
            for h2 in 0..C {
                for confident in [false, true] {
                    check(local, &[h1, h2], confident);
                    cases += 1;
                }
            }
        }
    }
    assert_eq!(cases, 3 * 3 * 3 * 2);
}

#[test]
fn fewer_helpers_all_patterns() {
    for local in 0..C {
        for confident in [false, true] {
            check(local, &[], confident);
            for h in 0..C {
                check(local, &[h], confident);
            }
        }
    }
}

#[test]
fn gate_is_inclusive_at_tau() {
    let out = agreement_pseudo_label(&peaked(1, TAU), &[], TAU).unwrap();
    assert_eq!(out.keep_mask, vec![true]);
}

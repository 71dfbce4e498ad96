#![allow(dead_code)]

use std::sync::Arc;

use fedmatch::federation::{ExperimentConfig, Method, Scenario};
use fedmatch::helper_selection::squared_distance;
use fedmatch::nn::{Activation, ModelArch, ParamVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn toy_arch<R: Rng>(rng: &mut R) -> Arc<ModelArch> {
    let input = rng.random_range(2..6);
    let hidden = rng.random_range(2..6);
    let classes = rng.random_range(2..5);
    Arc::new(ModelArch::new(vec![input, hidden, classes], Activation::Tanh).unwrap())
}

pub fn random_params<R: Rng>(arch: &Arc<ModelArch>, scale: f64, rng: &mut R) -> ParamVector {
    let values = (0..arch.param_count())
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    ParamVector::new(arch.clone(), values).unwrap()
}

pub fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Central finite differences of `f` around `params`.
pub fn central_difference<F>(params: &ParamVector, eps: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&ParamVector) -> f64,
{
    let base = params.values().to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let fp = f(&params.with_values(plus).unwrap());
            let fm = f(&params.with_values(minus).unwrap());
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Exhaustive k nearest neighbours: squared distance, then lower id.
pub fn brute_knn(points: &[(usize, Vec<f64>)], query: &[f64], k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .filter(|(id, _)| Some(*id) != exclude)
        .map(|(id, p)| (squared_distance(query, p), *id))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(d, id)| (id, d)).collect()
}

/// Majority vote over argmax indices; the lowest class wins ties.
pub fn majority_vote(votes: &[usize], classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for &v in votes {
        counts[v] += 1;
    }
    let best = *counts.iter().max().unwrap();
    counts.iter().position(|&c| c == best).unwrap()
}

/// A small experiment that finishes in well under a second.
pub fn tiny_config(scenario: Scenario, rounds: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.classes = 3;
    cfg.data.dim = 4;
    cfg.data.n_per_class = 60;
    cfg.data.labels_per_class = 2;
    cfg.model.hidden = vec![6];
    cfg.round.scenario = scenario;
    cfg.round.loss = scenario.default_loss();
    cfg.round.clients = 4;
    cfg.round.rounds = rounds;
    cfg.round.helper_period = 2;
    cfg.round.batch_unlabeled = 20;
    cfg.round.batch_server = 10;
    cfg.round.lr = 0.01;
    cfg.round.seed = seed;
    cfg
}

pub fn methods_for(scenario: Scenario) -> Vec<Method> {
    let cfg = tiny_config(scenario, 1, 0);
    Method::ALL.iter().copied().filter(|&m| cfg.check_method(m).is_ok()).collect()
}

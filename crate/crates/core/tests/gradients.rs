mod common;

use common::*;
use fedmatch::nn::{self, LossSpec, ProbDist};
use fedmatch::ssl::{phi_loss, AugmentConfig, HelperSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

fn random_targets<R: Rng>(rows: usize, classes: usize, rng: &mut R) -> ndarray::Array2<f64> {
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    nn::one_hot_labels(&labels, classes)
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let arch = toy_arch(&mut rng);
        let theta = random_params(&arch, 0.7, &mut rng);
        let x = gaussian_matrix(7, arch.input_dim(), &mut rng);
        let y = random_targets(7, arch.num_classes(), &mut rng);
        let spec = LossSpec::CrossEntropy { batch: x.view(), targets: y.view() };
        let analytic = nn::gradient(&spec, &theta).unwrap();
        let numeric = central_difference(&theta, EPS, |p| nn::loss_value(&spec, p).unwrap());
        assert!(max_relative_error(&analytic, &numeric, FLOOR) < TOL);
    }
}

#[test]
fn kl_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let arch = toy_arch(&mut rng);
        let theta = random_params(&arch, 0.7, &mut rng);
        let other = random_params(&arch, 0.7, &mut rng);
        let x = gaussian_matrix(6, arch.input_dim(), &mut rng);
        let reference: ProbDist = nn::forward(&other, x.view()).unwrap();
        let spec = LossSpec::KlToReference { batch: x.view(), reference: &reference };
        let analytic = nn::gradient(&spec, &theta).unwrap();
        let numeric = central_difference(&theta, EPS, |p| nn::loss_value(&spec, p).unwrap());
        assert!(max_relative_error(&analytic, &numeric, FLOOR) < TOL);
    }
}

#[test]
fn l1_matches_finite_differences_away_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let arch = toy_arch(&mut rng);
        let psi = random_params(&arch, 0.5, &mut rng);
        let analytic = nn::gradient(&LossSpec::L1, &psi).unwrap();
        let numeric = central_difference(&psi, 1e-6, |p| nn::loss_value(&LossSpec::L1, p).unwrap());
        for (i, v) in psi.values().iter().enumerate() {
            if v.abs() > 1e-3 {
                assert!((analytic[i] - numeric[i]).abs() <= TOL * analytic[i].abs().max(FLOOR));
            }
        }
    }
}

#[test]
fn squared_l2_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let arch = toy_arch(&mut rng);
        let psi = random_params(&arch, 0.5, &mut rng);
        let sigma = random_params(&arch, 0.5, &mut rng);
        let spec = LossSpec::SquaredL2 { anchor: sigma.values() };
        let analytic = nn::gradient(&spec, &psi).unwrap();
        let numeric = central_difference(&psi, EPS, |p| nn::loss_value(&spec, p).unwrap());
        assert!(max_relative_error(&analytic, &numeric, FLOOR) < TOL);
    }
}

#[test]
fn phi_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let aug = AugmentConfig::default();
    for case in 0..20 {
        let arch = toy_arch(&mut rng);
        let theta = random_params(&arch, 1.0, &mut rng);
        let h = 1 + case % 2;
        let members = (0..h).map(|_| random_params(&arch, 1.0, &mut rng)).collect();
        let helpers = HelperSet::new(members, (0..h).collect()).unwrap();
        let x = gaussian_matrix(8, arch.input_dim(), &mut rng);
        let tau = 1.0 / arch.num_classes() as f64 + 0.1;
        let aug_seed: u64 = rng.random();
        let eval = |p: &fedmatch::nn::ParamVector| {
            let mut r = ChaCha8Rng::seed_from_u64(aug_seed);
            phi_loss(p, x.view(), &helpers, tau, &aug, &mut r).unwrap()
        };
        let out = eval(&theta);
        let numeric = central_difference(&theta, EPS, |p| {
            let o = eval(p);
            assert_eq!(o.kept, out.kept, "confidence gate moved under perturbation");
            o.value
        });
        assert!(max_relative_error(&out.grad, &numeric, FLOOR) < TOL);
    }
}

//! Losses on unlabeled data: inter-client consistency, agreement-based
//! pseudo-labels and the combined consistency regularizer.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{self, ParamVector, ProbDist};

/// Frozen peer models sent to a client. Never trained locally.
#[derive(Clone, Debug, Default)]
pub struct HelperSet {
    members: Vec<ParamVector>,
    source_ids: Vec<usize>,
}

impl HelperSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(members: Vec<ParamVector>, source_ids: Vec<usize>) -> Result<Self> {
        if members.len() != source_ids.len() {
            return Err(invalid("helper members and source ids differ in length"));
        }
        for pair in members.windows(2) {
            pair[0].check_compatible(&pair[1])?;
        }
        Ok(Self {
            members,
            source_ids,
        })
    }

    pub fn members(&self) -> &[ParamVector] {
        &self.members
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Strong augmentation: additive Gaussian noise followed by random feature
/// dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            mask_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be a non-negative number".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn augment<R: Rng + ?Sized>(
    cfg: &AugmentConfig,
    batch: ArrayView2<'_, f64>,
    rng: &mut R,
) -> Array2<f64> {
    let mut out = batch.to_owned();
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        out.mapv_inplace(|v| v + normal.sample(rng));
    }
    if cfg.mask_prob > 0.0 {
        let mask = Bernoulli::new(cfg.mask_prob).expect("validated probability");
        out.mapv_inplace(|v| if mask.sample(rng) { 0.0 } else { v });
    }
    out
}

/// Pseudo-labels with the rows that passed the confidence gate.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBatch {
    pub labels: Array2<f64>,
    pub keep_mask: Vec<bool>,
}

impl PseudoBatch {
    pub fn kept(&self) -> usize {
        self.keep_mask.iter().filter(|k| **k).count()
    }
}

/// Per-row vote counts: the local argmax plus one vote per helper argmax.
pub fn vote_counts(local: &ProbDist, helpers: &[ProbDist]) -> Result<Array2<f64>> {
    for h in helpers {
        if h.rows().dim() != local.rows().dim() {
            return Err(invalid("helper predictions differ in shape from the local ones"));
        }
    }
    let mut counts = nn::one_hot(local);
    for h in helpers {
        counts += &nn::one_hot(h);
    }
    Ok(counts)
}

/// Majority vote over local and helper argmaxes (lowest class wins ties),
/// keeping only rows where the local model's top probability reaches `tau`.
pub fn agreement_pseudo_label(
    local: &ProbDist,
    helpers: &[ProbDist],
    tau: f64,
) -> Result<PseudoBatch> {
    let counts = vote_counts(local, helpers)?;
    let mut labels = Array2::zeros(counts.dim());
    for (i, row) in counts.outer_iter().enumerate() {
        labels[[i, nn::argmax_lowest(row.iter().copied())]] = 1.0;
    }
    let keep_mask = (0..local.n_rows()).map(|i| local.max_prob(i) >= tau).collect();
    Ok(PseudoBatch { labels, keep_mask })
}

/// Mean over helpers of `KL(helper || local)`.
pub fn inter_client_consistency(local: &ProbDist, helpers: &[ProbDist]) -> Result<f64> {
    if helpers.is_empty() {
        return Err(Error::NoHelpers);
    }
    let mut total = 0.0;
    for h in helpers {
        total += nn::kl_divergence(h, local)?;
    }
    Ok(total / helpers.len() as f64)
}

/// Value and gradient of the consistency regularizer at one model.
#[derive(Clone, Debug)]
pub struct PhiOutput {
    pub value: f64,
    pub pseudo_ce: f64,
    pub consistency: f64,
    pub kept: usize,
    pub grad: Vec<f64>,
}

/// Pseudo-label cross-entropy on the augmented batch plus the inter-client
/// KL on the clean batch. With no helpers the KL term vanishes and the vote
/// is the local model's alone; with no confident rows the CE term vanishes.
pub fn phi_loss<R: Rng + ?Sized>(
    theta: &ParamVector,
    batch: ArrayView2<'_, f64>,
    helpers: &HelperSet,
    tau: f64,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<PhiOutput> {
    let local = nn::forward(theta, batch)?;
    let helper_preds = helpers
        .members()
        .iter()
        .map(|h| nn::forward(h, batch))
        .collect::<Result<Vec<_>>>()?;
    let pseudo = agreement_pseudo_label(&local, &helper_preds, tau)?;
    let strong = augment(aug, batch, rng);

    let mut grad = vec![0.0; theta.len()];
    let kept: Vec<usize> = (0..pseudo.keep_mask.len())
        .filter(|&i| pseudo.keep_mask[i])
        .collect();
    let mut pseudo_ce = 0.0;
    if !kept.is_empty() {
        let x = strong.select(Axis(0), &kept);
        let y = pseudo.labels.select(Axis(0), &kept);
        let (value, g) = nn::loss_and_gradient(
            &nn::LossSpec::CrossEntropy {
                batch: x.view(),
                targets: y.view(),
            },
            theta,
        )?;
        pseudo_ce = value;
        add_into(&mut grad, &g);
    }

    let mut consistency = 0.0;
    if !helper_preds.is_empty() {
        let h = helper_preds.len() as f64;
        let mut mean_helper = Array2::<f64>::zeros(local.rows().dim());
        for p in &helper_preds {
            mean_helper += p.rows();
        }
        mean_helper /= h;
        let n = batch.nrows().max(1) as f64;
        let (probs, g) = nn::backprop(theta, batch, |p| (p - &mean_helper) / n)?;
        consistency = inter_client_consistency(&probs, &helper_preds)?;
        add_into(&mut grad, &g);
    }

    Ok(PhiOutput {
        value: pseudo_ce + consistency,
        pseudo_ce,
        consistency,
        kept: kept.len(),
        grad,
    })
}

pub(crate) fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ModelArch};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn dist(rows: &[&[f64]]) -> ProbDist {
        ProbDist::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_augmentation() {
        let x = array![[1.0, 2.0], [3.0, -4.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&AugmentConfig::identity(), x.view(), &mut rng), x);
    }

    #[test]
    fn augmentation_is_seeded() {
        let x = Array2::<f64>::zeros((10, 3));
        let cfg = AugmentConfig {
            noise_sigma: 0.3,
            mask_prob: 0.2,
        };
        let a = augment(&cfg, x.view(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&cfg, x.view(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn augmentation_noise_scale() {
        let x = Array2::<f64>::ones((10_000, 2));
        let cfg = AugmentConfig {
            noise_sigma: 0.1,
            mask_prob: 0.0,
        };
        let out = augment(&cfg, x.view(), &mut ChaCha8Rng::seed_from_u64(4));
        let diff = &out - &x;
        for col in diff.columns() {
            let mean = col.mean().unwrap();
            let var = col.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!((var.sqrt() - 0.1).abs() < 0.01, "std {}", var.sqrt());
        }
    }

    #[test]
    fn agreement_examples() {
        let local = dist(&[&[0.9, 0.05, 0.05]]);
        let h1 = dist(&[&[0.2, 0.7, 0.1]]);
        let h2 = dist(&[&[0.6, 0.3, 0.1]]);
        let pb = agreement_pseudo_label(&local, &[h1.clone(), h2], 0.85).unwrap();
        assert_eq!(pb.labels, array![[1.0, 0.0, 0.0]]);
        assert_eq!(pb.keep_mask, vec![true]);

        let unsure = dist(&[&[0.4, 0.3, 0.3]]);
        let pb = agreement_pseudo_label(&unsure, &[h1.clone()], 0.85).unwrap();
        assert_eq!(pb.keep_mask, vec![false]);

        let h3 = dist(&[&[0.1, 0.1, 0.8]]);
        let pb = agreement_pseudo_label(&local, &[h1, h3], 0.85).unwrap();
        assert_eq!(pb.labels, array![[1.0, 0.0, 0.0]]);

        let wrong = dist(&[&[0.5, 0.5]]);
        assert!(agreement_pseudo_label(&local, &[wrong], 0.85).is_err());
    }

    #[test]
    fn consistency_examples() {
        let local = dist(&[&[0.5, 0.5]]);
        assert!(inter_client_consistency(&local, &[local.clone()]).unwrap().abs() < 1e-12);
        let sure = dist(&[&[1.0, 0.0]]);
        let v = inter_client_consistency(&local, &[sure.clone()]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let other = dist(&[&[0.3, 0.7]]);
        let a = nn::kl_divergence(&sure, &local).unwrap();
        let b = nn::kl_divergence(&other, &local).unwrap();
        let both = inter_client_consistency(&local, &[sure, other]).unwrap();
        assert_eq!(both, (a + b) / 2.0);
        assert!(matches!(
            inter_client_consistency(&local, &[]),
            Err(Error::NoHelpers)
        ));
    }

    #[test]
    fn phi_vanishes_without_helpers_or_confidence() {
        let arch = Arc::new(ModelArch::new(vec![2, 3], Activation::Tanh).unwrap());
        let theta = ParamVector::zeros(arch);
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let out = phi_loss(
            &theta,
            x.view(),
            &HelperSet::empty(),
            0.85,
            &AugmentConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.kept, 0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn phi_with_self_helper_is_self_training_ce() {
        let arch = Arc::new(ModelArch::new(vec![2, 2], Activation::Tanh).unwrap());
        let theta = ParamVector::new(arch, vec![4.0, 0.0, 0.0, 4.0, 0.0, 0.0]).unwrap();
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let helpers = HelperSet::new(vec![theta.clone()], vec![7]).unwrap();
        let out = phi_loss(
            &theta,
            x.view(),
            &helpers,
            0.85,
            &AugmentConfig::identity(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let preds = nn::forward(&theta, x.view()).unwrap();
        let own = nn::cross_entropy(nn::one_hot(&preds).view(), &preds).unwrap();
        assert_eq!(out.kept, 2);
        assert!(out.consistency.abs() < 1e-12);
        assert!((out.value - own).abs() < 1e-12);
    }
}

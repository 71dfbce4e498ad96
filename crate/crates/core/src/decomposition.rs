//! Additive split of the model into a supervised half `sigma` and an
//! unsupervised half `psi`, with one training step for each half.
//!
//! The model evaluated everywhere is `theta = sigma + psi`. Each step
//! differentiates with respect to `theta` and applies the result to the
//! half being trained; the other half is left bit-for-bit untouched.

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{self, OptimState, ParamVector};
use crate::ssl::{self, AugmentConfig, HelperSet};

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedModel {
    sigma: ParamVector,
    psi: ParamVector,
}

impl DecomposedModel {
    pub fn new(sigma: ParamVector, psi: ParamVector) -> Result<Self> {
        sigma.check_compatible(&psi)?;
        Ok(Self { sigma, psi })
    }

    pub fn sigma(&self) -> &ParamVector {
        &self.sigma
    }

    pub fn psi(&self) -> &ParamVector {
        &self.psi
    }

    pub fn into_parts(self) -> (ParamVector, ParamVector) {
        (self.sigma, self.psi)
    }

    pub fn compose(&self) -> ParamVector {
        self.sigma.add(&self.psi).expect("halves share one arch")
    }
}

/// Element-wise `sigma + psi`.
pub fn compose(model: &DecomposedModel) -> ParamVector {
    model.compose()
}

/// Loss weights and the pseudo-label confidence threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub lambda_iccs: f64,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub tau: f64,
}

impl LossConfig {
    pub fn labels_at_client() -> Self {
        Self {
            lambda_s: 10.0,
            lambda_iccs: 1e-2,
            lambda_l1: 1e-4,
            lambda_l2: 10.0,
            tau: 0.85,
        }
    }

    pub fn labels_at_server() -> Self {
        Self {
            lambda_l1: 1e-5,
            ..Self::labels_at_client()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda_s", self.lambda_s),
            ("lambda_iccs", self.lambda_iccs),
            ("lambda_l1", self.lambda_l1),
            ("lambda_l2", self.lambda_l2),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config("tau must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::labels_at_client()
    }
}

/// Features with optional labels. Supervised steps refuse unlabeled batches.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: Option<&'a [usize]>,
}

impl<'a> Batch<'a> {
    pub fn labeled(features: ArrayView2<'a, f64>, labels: &'a [usize]) -> Self {
        Self {
            features,
            labels: Some(labels),
        }
    }

    pub fn unlabeled(features: ArrayView2<'a, f64>) -> Self {
        Self {
            features,
            labels: None,
        }
    }
}

/// Gradient of `lambda_s * CE` at `theta`, plus the loss value.
pub(crate) fn supervised_gradient(
    theta: &ParamVector,
    batch: &Batch<'_>,
    lambda_s: f64,
) -> Result<(f64, Vec<f64>)> {
    let labels = batch
        .labels
        .ok_or_else(|| invalid("supervised step needs a labeled batch"))?;
    if labels.len() != batch.features.nrows() {
        return Err(invalid("label count differs from batch rows"));
    }
    let classes = theta.arch().num_classes();
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let targets = nn::one_hot_labels(labels, classes);
    let (ce, mut grad) = nn::loss_and_gradient(
        &nn::LossSpec::CrossEntropy {
            batch: batch.features,
            targets: targets.view(),
        },
        theta,
    )?;
    grad.iter_mut().for_each(|g| *g *= lambda_s);
    Ok((lambda_s * ce, grad))
}

/// One SGD step on `sigma` against `lambda_s * CE(y, p_{sigma + psi*})`.
/// Returns the new model and the loss before the step.
pub fn supervised_step(
    model: &DecomposedModel,
    batch: &Batch<'_>,
    cfg: &LossConfig,
    opt: &OptimState,
) -> Result<(DecomposedModel, f64)> {
    let theta = model.compose();
    let (loss, grad) = supervised_gradient(&theta, batch, cfg.lambda_s)?;
    let mut sigma = model.sigma.clone();
    sigma
        .values_mut()
        .iter_mut()
        .zip(&grad)
        .for_each(|(s, g)| *s -= opt.lr * g);
    Ok((
        DecomposedModel {
            sigma,
            psi: model.psi.clone(),
        },
        loss,
    ))
}

/// `sign(x) * max(|x| - t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Breakdown of the unsupervised objective before the step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnsupervisedLoss {
    pub total: f64,
    pub phi: f64,
    pub l2: f64,
    pub l1: f64,
    pub kept: usize,
}

/// One proximal step on `psi` against
/// `lambda_iccs * Phi + lambda_l2 ||sigma* - psi||^2 + lambda_l1 ||psi||_1`.
///
/// The smooth terms take a gradient step; the L1 term is applied as
/// soft-thresholding by `lr * lambda_l1`, which yields exact zeros.
pub fn unsupervised_step<R: Rng + ?Sized>(
    model: &DecomposedModel,
    batch: ArrayView2<'_, f64>,
    helpers: &HelperSet,
    cfg: &LossConfig,
    aug: &AugmentConfig,
    opt: &OptimState,
    rng: &mut R,
) -> Result<(DecomposedModel, UnsupervisedLoss)> {
    let mut grad = vec![0.0; model.psi.len()];
    let mut loss = UnsupervisedLoss::default();

    if cfg.lambda_iccs > 0.0 {
        let theta = model.compose();
        let phi = ssl::phi_loss(&theta, batch, helpers, cfg.tau, aug, rng)?;
        grad.iter_mut()
            .zip(&phi.grad)
            .for_each(|(g, p)| *g += cfg.lambda_iccs * p);
        loss.phi = phi.value;
        loss.kept = phi.kept;
    }

    let sigma = model.sigma.values();
    let psi = model.psi.values();
    if cfg.lambda_l2 > 0.0 {
        for ((g, s), p) in grad.iter_mut().zip(sigma).zip(psi) {
            *g += cfg.lambda_l2 * 2.0 * (p - s);
        }
        loss.l2 = sigma.iter().zip(psi).map(|(s, p)| (s - p) * (s - p)).sum();
    }
    loss.l1 = psi.iter().map(|p| p.abs()).sum();
    loss.total = cfg.lambda_iccs * loss.phi + cfg.lambda_l2 * loss.l2 + cfg.lambda_l1 * loss.l1;

    let shrink = opt.lr * cfg.lambda_l1;
    let new_psi: Vec<f64> = psi
        .iter()
        .zip(&grad)
        .map(|(p, g)| soft_threshold(p - opt.lr * g, shrink))
        .collect();
    let psi = model.psi.with_values(new_psi)?;
    Ok((
        DecomposedModel {
            sigma: model.sigma.clone(),
            psi,
        },
        loss,
    ))
}

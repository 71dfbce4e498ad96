//! σ/ψ split: supervised steps touch only σ, unsupervised steps only ψ.
use std::sync::Arc;

use fedmatch::decomposition::{supervised_step, unsupervised_step, Batch, DecomposedModel, LossConfig};
use fedmatch::nn::{Activation, ModelArch, OptimState, ParamVector};
use fedmatch::ssl::{AugmentConfig, HelperSet};
use ndarray::array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fedmatch::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let arch = Arc::new(ModelArch::new(vec![2, 8, 3], Activation::Tanh)?);
    let sigma = ParamVector::variance_scaling(arch.clone(), &mut rng);
    let psi = ParamVector::variance_scaling(arch.clone(), &mut rng);
    let mut model = DecomposedModel::new(sigma, psi)?;
    println!("{arch}: {} parameters per component", arch.param_count());

    let x = array![[1.0, 0.5], [-1.0, 0.2], [0.3, -1.2], [0.9, 0.9]];
    let y = [0, 1, 2, 0];
    let cfg = LossConfig::labels_at_client();
    let opt = OptimState::new(0.02);

    for step in 0..5 {
        let (next, loss) = supervised_step(&model, &Batch::labeled(x.view(), &y), &cfg, &opt)?;
        assert_eq!(next.psi(), model.psi());
        model = next;
        println!("supervised step {step}: lambda_s * CE = {loss:.4}");
    }

    let helper = ParamVector::variance_scaling(arch, &mut rng);
    let helpers = HelperSet::new(vec![helper], vec![1])?;
    for step in 0..5 {
        let (next, loss) = unsupervised_step(&model, x.view(), &helpers, &cfg, &AugmentConfig::default(), &opt, &mut rng)?;
        assert_eq!(next.sigma(), model.sigma());
        model = next;
        println!(
            "unsupervised step {step}: total {:.4} (phi {:.4}, l2 {:.4}, l1 {:.4}, kept {})",
            loss.total, loss.phi, loss.l2, loss.l1, loss.kept
        );
    }
    println!("nnz(psi) fraction {:.3}", model.psi().nnz_fraction());
    Ok(())
}

//! Agreement-based pseudo-labels and the consistency regularizer Φ.
use std::sync::Arc;

use fedmatch::nn::{self, Activation, ModelArch, ParamVector, ProbDist};
use fedmatch::ssl::{agreement_pseudo_label, inter_client_consistency, phi_loss, AugmentConfig, HelperSet};
use ndarray::array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fedmatch::Result<()> {
    let local = ProbDist::from_rows(&[vec![0.9, 0.05, 0.05], vec![0.5, 0.3, 0.2], vec![0.1, 0.88, 0.02]])?;
    let h1 = ProbDist::from_rows(&[vec![0.2, 0.7, 0.1], vec![0.1, 0.1, 0.8], vec![0.1, 0.8, 0.1]])?;
    let h2 = ProbDist::from_rows(&[vec![0.3, 0.6, 0.1], vec![0.1, 0.2, 0.7], vec![0.6, 0.3, 0.1]])?;

    let pseudo = agreement_pseudo_label(&local, &[h1.clone(), h2.clone()], 0.85)?;
    for (i, keep) in pseudo.keep_mask.iter().enumerate() {
        let label = pseudo.labels.row(i).iter().position(|v| *v == 1.0).unwrap();
        println!("row {i}: local argmax {} -> pseudo-label {label}, kept {keep}", local.argmax(i));
    }
    println!("inter-client KL: {:.4}", inter_client_consistency(&local, &[h1, h2])?);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = Arc::new(ModelArch::new(vec![2, 6, 3], Activation::Relu)?);
    let theta = ParamVector::variance_scaling(arch.clone(), &mut rng);
    let helpers = HelperSet::new(
        (0..2).map(|_| ParamVector::variance_scaling(arch.clone(), &mut rng)).collect(),
        vec![4, 9],
    )?;
    let x = array![[0.4, -0.3], [1.2, 0.8], [-0.7, 0.1]];
    let out = phi_loss(&theta, x.view(), &helpers, 0.5, &AugmentConfig::default(), &mut rng)?;
    println!(
        "phi = {:.4} (pseudo CE {:.4} on {} rows + KL {:.4}), |grad| = {:.4}",
        out.value,
        out.pseudo_ce,
        out.kept,
        out.consistency,
        out.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    );
    let probs = nn::forward(&theta, x.view())?;
    println!("local predictions:\n{:.3}", probs.rows());
    Ok(())
}

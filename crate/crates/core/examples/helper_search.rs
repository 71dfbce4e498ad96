//! Embedding client models on a shared probe and picking helpers by k-NN.
use std::sync::Arc;

use fedmatch::helper_selection::{build_index, embed_model, query_helpers, ProbeInput};
use fedmatch::nn::{Activation, ModelArch, ParamVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fedmatch::Result<()> {
    let arch = Arc::new(ModelArch::new(vec![4, 8, 3], Activation::Tanh)?);
    let probe = ProbeInput::gaussian(8, 4, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // Two families of clients: small perturbations of two base models.
    let bases: Vec<ParamVector> = (0..2).map(|_| ParamVector::variance_scaling(arch.clone(), &mut rng)).collect();
    let mut embeddings = Vec::new();
    for id in 0..8 {
        let noise = ParamVector::variance_scaling(arch.clone(), &mut rng);
        let values: Vec<f64> = bases[id % 2]
            .values()
            .iter()
            .zip(noise.values())
            .map(|(b, n)| b + 0.05 * n)
            .collect();
        let model = bases[0].with_values(values)?;
        embeddings.push(embed_model(&model, &probe, id, 1)?);
    }

    let index = build_index(&embeddings)?;
    for id in 0..8 {
        println!("client {id} (family {}): helpers {:?}", id % 2, query_helpers(&index, id, 2)?);
    }
    Ok(())
}

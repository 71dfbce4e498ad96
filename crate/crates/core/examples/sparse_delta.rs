//! Thresholded deltas, their wire format and the cost ledger.
use std::sync::Arc;

use fedmatch::comm::{apply, diff, CostLedger, Direction, SparseDelta};
use fedmatch::nn::{Activation, ModelArch, ParamVector};

fn main() -> fedmatch::Result<()> {
    let arch = Arc::new(ModelArch::new(vec![1, 1, 2], Activation::Tanh)?);
    let n = arch.param_count();
    let reference = ParamVector::new(arch.clone(), (0..n).map(|i| i as f64).collect())?;
    let mut local = reference.values().to_vec();
    local[1] += 0.5;
    local[2] += 4e-6;
    local[4] -= 3e-5;
    let local = reference.with_values(local)?;

    let delta = diff(&local, &reference, 2e-5)?;
    println!("{} of {} entries sent: indices {:?} values {:?}", delta.nnz(), n, delta.indices(), delta.values());
    let rebuilt = apply(&reference, &delta)?;
    let err = rebuilt.values().iter().zip(local.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max reconstruction error {err:e}");

    let bytes = delta.to_bytes();
    let decoded = SparseDelta::from_bytes(&bytes)?;
    assert_eq!(decoded.to_bytes(), bytes);
    println!("wire record: {} bytes", bytes.len());

    let exact = diff(&local, &reference, 0.0)?;
    assert_eq!(apply(&reference, &exact)?, local);

    let mut ledger = CostLedger::new();
    ledger.record_round(1, Direction::S2C, &[SparseDelta::empty(n)], None);
    ledger.record_round(1, Direction::C2S, &[delta], None);
    let r = ledger.get(1).unwrap();
    println!("round 1: s2c {:.1}% c2s {:.1}%", r.s2c_pct(), r.c2s_pct());
    Ok(())
}

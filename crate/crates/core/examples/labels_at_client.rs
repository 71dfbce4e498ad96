//! FedMatch with a few labels on every client, stepped round by round.
use fedmatch::federation::{ExperimentConfig, Method, Simulation};

fn main() -> fedmatch::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.round.rounds = 30;
    cfg.round.lr = 0.05;
    cfg.round.local_epochs = 3;
    cfg.round.loss.lambda_l2 = 0.0;

    let mut sim = Simulation::new(&cfg, Method::Fedmatch)?;
    println!("{}", fedmatch::federation::METRICS_HEADER);
    while sim.round() < cfg.round.rounds {
        let m = sim.step()?;
        if m.round % 5 == 0 {
            println!(
                "{},{:.3},{:.3},{:.3},{:.3},{:.1},{:.1},{:.3}",
                m.round, m.test_acc, m.labeled_acc, m.loss_s, m.loss_u, m.s2c_pct, m.c2s_pct,
                m.nnz_psi_frac.unwrap_or(f64::NAN)
            );
        }
    }
    println!("client label reads: {}", sim.client_label_reads());
    Ok(())
}

//! FedMatch with labels only at the server: clients never see a label.
use fedmatch::decomposition::LossConfig;
use fedmatch::federation::{run_experiment, ExperimentConfig, Method, Scenario};

fn main() -> fedmatch::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.round.scenario = Scenario::LabelsAtServer;
    cfg.round.loss = LossConfig::labels_at_server();
    cfg.round.rounds = 30;
    cfg.round.lr = 0.03;
    cfg.round.local_epochs = 3;
    cfg.round.server_epochs = 3;

    let out = run_experiment(&cfg, Method::Fedmatch)?;
    let last = out.metrics.last().unwrap();
    println!(
        "round {}: test acc {:.3}, server labeled acc {:.3}, s2c {:.1}%, c2s {:.1}%",
        last.round, last.test_acc, last.labeled_acc, last.s2c_pct, last.c2s_pct
    );
    println!("label reads: clients {}, server {}", out.client_label_reads, out.server_label_reads);
    Ok(())
}

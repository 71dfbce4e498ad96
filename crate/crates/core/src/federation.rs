//! Round orchestration for both label scenarios plus the FedAvg/FedProx
//! baselines.
//!
//! A round is bulk-synchronous: the server freezes a snapshot, every selected
//! client trains independently on its own rng stream, and the server then
//! folds the results in client-id order. Because each client's stream is
//! derived from `(seed, client_id, round)` and folding is ordered, the metric
//! series does not depend on how client jobs are scheduled.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comm::{self, CostLedger, Direction, SparseDelta};
use crate::data::{
    self, ClientDataHandle, Dataset, LabelAudit, LabelSite, LabeledView, PartitionMode,
    PartitionPlan, Split,
};
use crate::decomposition::{self, Batch, DecomposedModel, LossConfig};
use crate::error::{invalid, Error, Result};
use crate::helper_selection::{self, EmbeddingIndex, ModelEmbedding, ProbeInput};
use crate::nn::{self, Activation, ModelArch, OptimState, ParamVector};
use crate::ssl::{self, AugmentConfig, HelperSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    LabelsAtClient,
    LabelsAtServer,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::LabelsAtClient => "labels_at_client",
            Scenario::LabelsAtServer => "labels_at_server",
        }
    }

    /// Default loss weights for the scenario.
    pub fn default_loss(self) -> LossConfig {
        match self {
            Scenario::LabelsAtClient => LossConfig::labels_at_client(),
            Scenario::LabelsAtServer => LossConfig::labels_at_server(),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labels_at_client" => Ok(Scenario::LabelsAtClient),
            "labels_at_server" => Ok(Scenario::LabelsAtServer),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedmatch,
    FedavgSl,
    FedproxSl,
    FedavgFixmatch,
    FedproxFixmatch,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fedmatch,
        Method::FedavgSl,
        Method::FedproxSl,
        Method::FedavgFixmatch,
        Method::FedproxFixmatch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fedmatch => "fedmatch",
            Method::FedavgSl => "fedavg_sl",
            Method::FedproxSl => "fedprox_sl",
            Method::FedavgFixmatch => "fedavg_fixmatch",
            Method::FedproxFixmatch => "fedprox_fixmatch",
        }
    }

    fn proximal(self) -> bool {
        matches!(self, Method::FedproxSl | Method::FedproxFixmatch)
    }

    fn fixmatch(self) -> bool {
        matches!(self, Method::FedavgFixmatch | Method::FedproxFixmatch)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// How ψ starts out. σ always starts from variance scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiInit {
    Zeros,
    VarianceScaling,
}

/// Order in which client jobs run within a round. Results are identical for
/// all three.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scheduling {
    Sequential,
    #[default]
    Parallel,
    Reversed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub spread: f64,
    pub labels_per_class: usize,
    pub partition: PartitionMode,
    pub dirichlet_alpha: f64,
    pub stream_steps: usize,
    pub rounds_per_step: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 16,
            n_per_class: 250,
            spread: 1.5,
            labels_per_class: 5,
            partition: PartitionMode::Iid,
            dirichlet_alpha: 0.5,
            stream_steps: 1,
            rounds_per_step: 10,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.dim == 0 || self.n_per_class == 0 {
            return Err(Error::Config("dim and n_per_class must be positive".into()));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::Config("spread must be a non-negative number".into()));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::Config("dirichlet_alpha must be positive".into()));
        }
        if self.stream_steps == 0 || self.rounds_per_step == 0 {
            return Err(Error::Config("stream_steps and rounds_per_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub psi_init: PsiInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: Activation::Tanh,
            psi_init: PsiInit::VarianceScaling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub scenario: Scenario,
    /// K
    pub clients: usize,
    /// F
    pub fraction: f64,
    /// R
    pub rounds: usize,
    /// E_L
    pub local_epochs: usize,
    /// E_G
    pub server_epochs: usize,
    /// H
    pub helpers: usize,
    pub helper_period: usize,
    pub loss: LossConfig,
    pub comm_threshold: f64,
    pub seed: u64,
    pub lr: f64,
    pub adaptive_lr: bool,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub batch_server: usize,
    pub fedprox_mu: f64,
    pub lambda_u: f64,
    pub augment: AugmentConfig,
    pub probe_rows: usize,
    /// Fully supervised upper bound: SL baselines also see the labels of the
    /// clients' unlabeled share.
    pub full_labels: bool,
    /// Probability that a selected client drops out of a round.
    pub client_dropout: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::LabelsAtClient,
            clients: 10,
            fraction: 1.0,
            rounds: 100,
            local_epochs: 1,
            server_epochs: 1,
            helpers: 2,
            helper_period: helper_selection::DEFAULT_HELPER_PERIOD,
            loss: LossConfig::labels_at_client(),
            comm_threshold: comm::DEFAULT_THRESHOLD,
            seed: 0,
            lr: 1e-3,
            adaptive_lr: true,
            batch_labeled: 10,
            batch_unlabeled: 100,
            batch_server: 100,
            fedprox_mu: 1e-2,
            lambda_u: 1.0,
            augment: AugmentConfig::default(),
            probe_rows: helper_selection::DEFAULT_PROBE_ROWS,
            full_labels: false,
            client_dropout: 0.0,
        }
    }
}

impl RoundConfig {
    /// A = round(F·K), at least one.
    pub fn active_clients(&self) -> usize {
        active_count(self.clients, self.fraction)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0) {
            return Err(Error::Config("fraction must exceed 0".into()));
        }
        if self.fraction > 1.0 {
            return Err(Error::Config("fraction must not exceed 1".into()));
        }
        let positive = [
            ("clients", self.clients),
            ("rounds", self.rounds),
            ("helper_period", self.helper_period),
            ("batch_labeled", self.batch_labeled),
            ("batch_unlabeled", self.batch_unlabeled),
            ("batch_server", self.batch_server),
            ("probe_rows", self.probe_rows),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if (self.fraction * self.clients as f64).round() < 1.0 {
            return Err(Error::Config("fraction * clients rounds to zero active clients".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.comm_threshold >= 0.0 && self.comm_threshold.is_finite()) {
            return Err(Error::Config("comm_threshold must be non-negative".into()));
        }
        if !(self.fedprox_mu >= 0.0) || !(self.lambda_u >= 0.0) {
            return Err(Error::Config("fedprox_mu and lambda_u must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.client_dropout) {
            return Err(Error::Config("client_dropout must lie in [0, 1)".into()));
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

/// Everything needed to run one experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub round: RoundConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.round.validate()?;
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn check_method(&self, method: Method) -> Result<()> {
        if self.round.full_labels {
            if self.round.scenario == Scenario::LabelsAtServer {
                return Err(Error::Config(
                    "full_labels needs labels at the clients (labels_at_client)".into(),
                ));
            }
            if !matches!(method, Method::FedavgSl | Method::FedproxSl) {
                return Err(Error::Config(format!(
                    "full_labels only applies to supervised baselines, not {method}"
                )));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ModelArch> {
        let mut dims = vec![self.data.dim];
        dims.extend_from_slice(&self.model.hidden);
        dims.push(self.data.classes);
        ModelArch::new(dims, self.model.activation)
    }
}

fn active_count(k: usize, fraction: f64) -> usize {
    ((fraction * k as f64).round() as usize).clamp(1, k.max(1))
}

/// Uniform sample of A = round(F·K) distinct ids, sorted ascending.
pub fn select_clients<R: Rng + ?Sized>(k: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut ids = rand::seq::index::sample(rng, k, active_count(k, fraction)).into_vec();
    ids.sort_unstable();
    ids
}

/// Element-wise arithmetic mean.
pub fn aggregate_mean(vectors: &[ParamVector]) -> Result<ParamVector> {
    let sizes = vec![1.0; vectors.len()];
    aggregate_weighted(vectors, &sizes)
}

/// Σ_a (n_a / Σ n) θ_a, normalized over the given clients.
pub fn aggregate_weighted(vectors: &[ParamVector], sizes: &[f64]) -> Result<ParamVector> {
    let first = vectors
        .first()
        .ok_or_else(|| invalid("cannot aggregate an empty set"))?;
    if sizes.len() != vectors.len() {
        return Err(invalid("one size per vector required"));
    }
    if sizes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(invalid("aggregation sizes must be positive"));
    }
    for v in &vectors[1..] {
        first.check_compatible(v)?;
    }
    let total: f64 = sizes.iter().sum();
    let mut acc = vec![0.0; first.len()];
    for (v, &s) in vectors.iter().zip(sizes) {
        let w = s / total;
        acc.iter_mut()
            .zip(v.values())
            .for_each(|(a, x)| *a += w * x);
    }
    if vectors.iter().all(|v| v == first) {
        return Ok(first.clone());
    }
    first.with_values(acc)
}

/// μ(θ − θ^G).
pub fn fedprox_gradient_term(theta: &[f64], global: &[f64], mu: f64) -> Result<Vec<f64>> {
    if theta.len() != global.len() {
        return Err(invalid("proximal term needs equal lengths"));
    }
    Ok(theta.iter().zip(global).map(|(t, g)| mu * (t - g)).collect())
}

/// SplitMix64 over the words, for independent per-(client, round) streams.
pub fn derive_seed(words: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &w in words {
        let mut z = h ^ w.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const SERVER_STREAM: u64 = u64::MAX;
const INIT_STREAM: u64 = u64::MAX - 1;
const DATA_STREAM: u64 = u64::MAX - 2;
const PARTITION_STREAM: u64 = u64::MAX - 3;
const PROBE_STREAM: u64 = u64::MAX - 4;

fn client_rng(seed: u64, client: usize, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, client as u64, round as u64]))
}

fn server_rng(seed: u64, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(&[seed, SERVER_STREAM, round as u64]))
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    /// The parameters the client holds, as last seen by the server.
    pub model: DecomposedModel,
    pub opt: OptimState,
    pub data: ClientDataHandle,
    pub last_update_round: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: DecomposedModel,
    pub opt: OptimState,
    pub embeddings: BTreeMap<usize, ModelEmbedding>,
    /// Latest reconstructed ψ per client, the source of helper payloads.
    pub client_psi: BTreeMap<usize, ParamVector>,
    pub ledger: CostLedger,
    pub probe: ProbeInput,
    /// Present only when labels sit at the server.
    pub labeled: Option<LabeledView>,
    pub seed: u64,
}

impl ServerState {
    fn helper_index(&self) -> Result<Option<EmbeddingIndex>> {
        if self.embeddings.is_empty() {
            return Ok(None);
        }
        let all: Vec<ModelEmbedding> = self.embeddings.values().cloned().collect();
        helper_selection::build_index(&all).map(Some)
    }
}

/// Losses accumulated over one round, averaged per step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RoundLosses {
    pub supervised: f64,
    pub unsupervised: f64,
    pub supervised_steps: usize,
    pub unsupervised_steps: usize,
    pub participants: usize,
}

impl RoundLosses {
    fn add_s(&mut self, v: f64) {
        self.supervised += v;
        self.supervised_steps += 1;
    }

    fn add_u(&mut self, v: f64) {
        self.unsupervised += v;
        self.unsupervised_steps += 1;
    }

    fn merge(&mut self, other: &RoundLosses) {
        self.supervised += other.supervised;
        self.unsupervised += other.unsupervised;
        self.supervised_steps += other.supervised_steps;
        self.unsupervised_steps += other.unsupervised_steps;
    }

    pub fn mean_supervised(&self) -> f64 {
        if self.supervised_steps == 0 {
            0.0
        } else {
            self.supervised / self.supervised_steps as f64
        }
    }

    pub fn mean_unsupervised(&self) -> f64 {
        if self.unsupervised_steps == 0 {
            0.0
        } else {
            self.unsupervised / self.unsupervised_steps as f64
        }
    }
}

fn minibatches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut pos: Vec<usize> = (0..n).collect();
    pos.shuffle(rng);
    pos.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Supervised and unsupervised minibatch schedules for one epoch, paired by
/// step with the shorter list cycled.
fn epoch_schedule(
    data: &ClientDataHandle,
    cfg: &RoundConfig,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Option<Vec<usize>>, Option<Vec<usize>>)> {
    let n_s = data.labeled.as_ref().map_or(0, LabeledView::len);
    let n_u = data.unlabeled.len_at(round);
    let sup = minibatches(n_s, cfg.batch_labeled, rng);
    let uns = minibatches(n_u, cfg.batch_unlabeled, rng);
    let steps = sup.len().max(uns.len());
    (0..steps)
        .map(|i| {
            (
                (!sup.is_empty()).then(|| sup[i % sup.len()].clone()),
                (!uns.is_empty()).then(|| uns[i % uns.len()].clone()),
            )
        })
        .collect()
}

/// Local FedMatch training: supervised steps on σ (when the handle has
/// labels) interleaved with unsupervised steps on ψ.
fn train_fedmatch_client(
    data: &ClientDataHandle,
    start: DecomposedModel,
    helpers: &HelperSet,
    cfg: &RoundConfig,
    opt: &OptimState,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(DecomposedModel, RoundLosses)> {
    let mut model = start;
    let mut losses = RoundLosses::default();
    for _ in 0..cfg.local_epochs {
        for (sup, uns) in epoch_schedule(data, cfg, round, rng) {
            if let (Some(pos), Some(view)) = (sup, data.labeled.as_ref()) {
                let (x, y) = view.batch(&pos);
                let (next, loss) =
                    decomposition::supervised_step(&model, &Batch::labeled(x.view(), &y), &cfg.loss, opt)?;
                model = next;
                losses.add_s(loss);
            }
            if let Some(pos) = uns {
                let x = data.unlabeled.features(round, &pos);
                let (next, loss) = decomposition::unsupervised_step(
                    &model,
                    x.view(),
                    helpers,
                    &cfg.loss,
                    &cfg.augment,
                    opt,
                    rng,
                )?;
                model = next;
                losses.add_u(loss.total);
            }
        }
    }
    Ok((model, losses))
}

fn sgd(theta: &mut [f64], grad: &[f64], lr: f64) {
    theta.iter_mut().zip(grad).for_each(|(t, g)| *t -= lr * g);
}

/// Local training of a single shared θ for the baselines.
#[allow(clippy::too_many_arguments)]
fn train_theta_client(
    data: &ClientDataHandle,
    start: ParamVector,
    method: Method,
    cfg: &RoundConfig,
    opt: &OptimState,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamVector, RoundLosses)> {
    let global = start.values().to_vec();
    let mu = if method.proximal() { cfg.fedprox_mu } else { 0.0 };
    let mut theta = start;
    let mut losses = RoundLosses::default();
    let no_helpers = HelperSet::empty();
    for _ in 0..cfg.local_epochs {
        for (sup, uns) in epoch_schedule(data, cfg, round, rng) {
            if let (Some(pos), Some(view)) = (sup, data.labeled.as_ref()) {
                let (x, y) = view.batch(&pos);
                let (loss, mut grad) = decomposition::supervised_gradient(
                    &theta,
                    &Batch::labeled(x.view(), &y),
                    cfg.loss.lambda_s,
                )?;
                if mu > 0.0 {
                    ssl::add_into(&mut grad, &fedprox_gradient_term(theta.values(), &global, mu)?);
                }
                sgd(theta.values_mut(), &grad, opt.lr);
                losses.add_s(loss);
            }
            let Some(pos) = uns.filter(|_| method.fixmatch()) else {
                continue;
            };
            let x = data.unlabeled.features(round, &pos);
            let phi = ssl::phi_loss(&theta, x.view(), &no_helpers, cfg.loss.tau, &cfg.augment, rng)?;
            let mut grad: Vec<f64> = phi.grad.iter().map(|g| cfg.lambda_u * g).collect();
            if mu > 0.0 {
                ssl::add_into(&mut grad, &fedprox_gradient_term(theta.values(), &global, mu)?);
            }
            sgd(theta.values_mut(), &grad, opt.lr);
            losses.add_u(cfg.lambda_u * phi.value);
        }
    }
    Ok((theta, losses))
}

/// Server-side supervised epochs on its labeled set. With `decomposed`, only
/// σ moves (ψ frozen); otherwise the whole θ stored in σ is trained.
fn server_phase(
    server: &mut ServerState,
    cfg: &RoundConfig,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RoundLosses> {
    let mut losses = RoundLosses::default();
    let Some(view) = server.labeled.clone() else {
        return Ok(losses);
    };
    for _ in 0..cfg.server_epochs {
        for pos in minibatches(view.len(), cfg.batch_server, rng) {
            let (x, y) = view.batch(&pos);
            let (next, loss) = decomposition::supervised_step(
                &server.global,
                &Batch::labeled(x.view(), &y),
                &cfg.loss,
                &server.opt,
            )?;
            server.global = next;
            losses.add_s(loss);
        }
    }
    log::debug!("round {round}: server phase took {} steps", losses.supervised_steps);
    Ok(losses)
}

struct FedMatchJob {
    id: usize,
    start: DecomposedModel,
    helpers: HelperSet,
    s2c: Vec<SparseDelta>,
    helper_payloads: Vec<SparseDelta>,
}

struct FedMatchResult {
    id: usize,
    recon: DecomposedModel,
    s2c: Vec<SparseDelta>,
    helper_payloads: Vec<SparseDelta>,
    c2s: Vec<SparseDelta>,
    losses: RoundLosses,
}

fn dropped_out(cfg: &RoundConfig, rng: &mut ChaCha8Rng) -> bool {
    cfg.client_dropout > 0.0 && rng.random::<f64>() < cfg.client_dropout
}

fn run_jobs<J, T, F>(jobs: Vec<J>, scheduling: Scheduling, f: F) -> Result<Vec<T>>
where
    J: Send,
    T: Send,
    F: Fn(J) -> Result<T> + Sync + Send,
{
    match scheduling {
        Scheduling::Parallel => jobs.into_par_iter().map(f).collect(),
        Scheduling::Sequential => jobs.into_iter().map(f).collect(),
        Scheduling::Reversed => {
            let mut out = jobs.into_iter().rev().map(f).collect::<Result<Vec<T>>>()?;
            out.reverse();
            Ok(out)
        }
    }
}

/// One FedMatch round. Labels-at-client clients train σ and ψ; under
/// labels-at-server the server first trains σ and clients train ψ only.
fn fedmatch_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    round: usize,
    cfg: &RoundConfig,
    scheduling: Scheduling,
) -> Result<RoundLosses> {
    let mut srng = server_rng(server.seed, round);
    let mut total = RoundLosses::default();
    let labels_at_server = cfg.scenario == Scenario::LabelsAtServer;
    if labels_at_server {
        total = server_phase(server, cfg, round, &mut srng)?;
    }
    let selected = select_clients(clients.len(), cfg.fraction, &mut srng);
    let index = if cfg.helpers > 0 && helper_selection::helper_due(round, cfg.helper_period) {
        server.helper_index()?
    } else {
        None
    };
    let t = cfg.comm_threshold;
    let global = server.global.clone();

    let mut jobs = Vec::with_capacity(selected.len());
    for &id in &selected {
        let held = &clients[id].model;
        let ds = comm::diff(global.sigma(), held.sigma(), t)?;
        let dp = comm::diff(global.psi(), held.psi(), t)?;
        let start = DecomposedModel::new(comm::apply(held.sigma(), &ds)?, comm::apply(held.psi(), &dp)?)?;
        let mut helper_payloads = Vec::new();
        let mut members = Vec::new();
        let mut ids = Vec::new();
        if let Some(index) = &index {
            match helper_selection::query_helpers(index, id, cfg.helpers) {
                Ok(found) => {
                    for h in found {
                        let psi_h = &server.client_psi[&h];
                        let payload = comm::diff(psi_h, start.psi(), t)?;
                        let received = comm::apply(start.psi(), &payload)?;
                        members.push(start.sigma().add(&received)?);
                        ids.push(h);
                        helper_payloads.push(payload);
                    }
                }
                Err(Error::NotYetEmbedded(_)) => {}
                Err(e) => return Err(e),
            }
        }
        jobs.push(FedMatchJob {
            id,
            start,
            helpers: HelperSet::new(members, ids)?,
            s2c: vec![ds, dp],
            helper_payloads,
        });
    }

    let opt = server.opt.clone();
    let data: Vec<&ClientDataHandle> = clients.iter().map(|c| &c.data).collect();
    let results = run_jobs(jobs, scheduling, |job| -> Result<Option<FedMatchResult>> {
        let mut rng = client_rng(server.seed, job.id, round);
        if dropped_out(cfg, &mut rng) {
            return Ok(None);
        }
        let (local, losses) =
            train_fedmatch_client(data[job.id], job.start.clone(), &job.helpers, cfg, &opt, round, &mut rng)?;
        let dp = comm::diff(local.psi(), job.start.psi(), t)?;
        let psi = comm::apply(job.start.psi(), &dp)?;
        let (sigma, c2s) = if labels_at_server {
            (job.start.sigma().clone(), vec![dp])
        } else {
            let ds = comm::diff(local.sigma(), job.start.sigma(), t)?;
            (comm::apply(job.start.sigma(), &ds)?, vec![ds, dp])
        };
        Ok(Some(FedMatchResult {
            id: job.id,
            recon: DecomposedModel::new(sigma, psi)?,
            s2c: job.s2c,
            helper_payloads: job.helper_payloads,
            c2s,
            losses,
        }))
    })?;

    server.ledger.touch(round);
    let mut sigmas = Vec::new();
    let mut psis = Vec::new();
    for (id, res) in selected.iter().zip(results) {
        let Some(res) = res else {
            log::warn!("round {round}: client {id} dropped out");
            continue;
        };
        server
            .ledger
            .record_round(round, Direction::S2C, &res.s2c, Some(&res.helper_payloads));
        server.ledger.record_round(round, Direction::C2S, &res.c2s, None);
        let theta = res.recon.compose();
        server.embeddings.insert(
            res.id,
            helper_selection::embed_model(&theta, &server.probe, res.id, round)?,
        );
        server.client_psi.insert(res.id, res.recon.psi().clone());
        sigmas.push(res.recon.sigma().clone());
        psis.push(res.recon.psi().clone());
        total.merge(&res.losses);
        total.participants += 1;
        let client = &mut clients[res.id];
        client.model = res.recon;
        client.opt = opt.clone();
        client.last_update_round = Some(round);
    }
    if psis.is_empty() {
        log::warn!("round {round}: no client returned an update");
        return Ok(total);
    }
    let psi = aggregate_mean(&psis)?;
    let sigma = if labels_at_server {
        server.global.sigma().clone()
    } else {
        aggregate_mean(&sigmas)?
    };
    server.global = DecomposedModel::new(sigma, psi)?;
    Ok(total)
}

/// FedMatch round with labels at the clients.
pub fn run_round_labels_at_client(
    server: &mut ServerState,
    clients: &mut [ClientState],
    round: usize,
    cfg: &RoundConfig,
    scheduling: Scheduling,
) -> Result<RoundLosses> {
    if cfg.scenario != Scenario::LabelsAtClient {
        return Err(Error::Config("round runner expects labels_at_client".into()));
    }
    fedmatch_round(server, clients, round, cfg, scheduling)
}

/// FedMatch round with labels only at the server.
pub fn run_round_labels_at_server(
    server: &mut ServerState,
    clients: &mut [ClientState],
    round: usize,
    cfg: &RoundConfig,
    scheduling: Scheduling,
) -> Result<RoundLosses> {
    if cfg.scenario != Scenario::LabelsAtServer {
        return Err(Error::Config("round runner expects labels_at_server".into()));
    }
    if clients.iter().any(|c| c.data.labeled.is_some()) {
        return Err(Error::Config("clients must hold no labels under labels_at_server".into()));
    }
    fedmatch_round(server, clients, round, cfg, scheduling)
}

/// Baseline round on a single θ kept in the σ slot (ψ stays zero).
fn baseline_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    round: usize,
    cfg: &RoundConfig,
    method: Method,
    scheduling: Scheduling,
) -> Result<RoundLosses> {
    let mut srng = server_rng(server.seed, round);
    let mut total = RoundLosses::default();
    server.ledger.touch(round);
    if cfg.scenario == Scenario::LabelsAtServer {
        total = server_phase(server, cfg, round, &mut srng)?;
        if !method.fixmatch() {
            return Ok(total);
        }
    }
    let selected = select_clients(clients.len(), cfg.fraction, &mut srng);
    let theta = server.global.sigma().clone();
    let opt = server.opt.clone();
    let data: Vec<&ClientDataHandle> = clients.iter().map(|c| &c.data).collect();
    let results = run_jobs(selected.clone(), scheduling, |id| {
        let mut rng = client_rng(server.seed, id, round);
        if dropped_out(cfg, &mut rng) {
            return Ok(None);
        }
        let d = data[id];
        let size = d.labeled.as_ref().map_or(0, LabeledView::len)
            + if method.fixmatch() { d.unlabeled.len_at(round) } else { 0 };
        let (local, losses) = train_theta_client(d, theta.clone(), method, cfg, &opt, round, &mut rng)?;
        Ok(Some((local, losses, size)))
    })?;

    let p = theta.len();
    let mut thetas = Vec::new();
    let mut sizes = Vec::new();
    for (&id, res) in selected.iter().zip(results) {
        let Some((local, losses, size)) = res else {
            log::warn!("round {round}: client {id} dropped out");
            continue;
        };
        server.ledger.record_dense(round, Direction::S2C, p);
        server.ledger.record_dense(round, Direction::C2S, p);
        total.merge(&losses);
        total.participants += 1;
        let client = &mut clients[id];
        client.model = DecomposedModel::new(local.clone(), ParamVector::zeros(local.arch().clone()))?;
        client.opt = opt.clone();
        client.last_update_round = Some(round);
        if size > 0 {
            thetas.push(local);
            sizes.push(size as f64);
        }
    }
    if !thetas.is_empty() {
        let psi = server.global.psi().clone();
        server.global = DecomposedModel::new(aggregate_weighted(&thetas, &sizes)?, psi)?;
    }
    Ok(total)
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_acc: f64,
    pub labeled_acc: f64,
    pub loss_s: f64,
    pub loss_u: f64,
    pub s2c_pct: f64,
    pub c2s_pct: f64,
    pub nnz_psi_frac: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "round,test_acc,labeled_acc,loss_s,loss_u,s2c_pct,c2s_pct,nnz_psi_frac";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub method: Method,
    pub scenario: Scenario,
    pub seed: u64,
    pub rounds: Vec<RoundMetrics>,
}

impl MetricsSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for m in &self.rounds {
            let nnz = m.nnz_psi_frac.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.round, m.test_acc, m.labeled_acc, m.loss_s, m.loss_u, m.s2c_pct, m.c2s_pct, nnz
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn last(&self) -> Option<&RoundMetrics> {
        self.rounds.last()
    }
}

/// Final state of a finished experiment.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub metrics: MetricsSeries,
    pub ledger: CostLedger,
    pub final_model: DecomposedModel,
    /// Label reads through client data handles.
    pub client_label_reads: usize,
    /// Label reads through the server's labeled handle.
    pub server_label_reads: usize,
}

/// A configured experiment that can be advanced round by round.
pub struct Simulation {
    cfg: ExperimentConfig,
    method: Method,
    scheduling: Scheduling,
    dataset: Arc<Dataset>,
    plan: PartitionPlan,
    server: ServerState,
    clients: Vec<ClientState>,
    client_audit: LabelAudit,
    server_audit: LabelAudit,
    test_idx: Vec<usize>,
    valid_idx: Vec<usize>,
    labeled_idx: Vec<usize>,
    round: usize,
    metrics: Vec<RoundMetrics>,
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig, method: Method) -> Result<Self> {
        cfg.validate()?;
        cfg.check_method(method)?;
        let seed = cfg.round.seed;
        let d = &cfg.data;
        let dataset = Arc::new(data::make_blobs(
            d.classes,
            d.dim,
            d.n_per_class,
            d.spread,
            derive_seed(&[seed, DATA_STREAM]),
        )?);
        Self::with_dataset(cfg, method, dataset)
    }

    /// Like [`Simulation::new`] on a caller-provided dataset.
    pub fn with_dataset(cfg: &ExperimentConfig, method: Method, dataset: Arc<Dataset>) -> Result<Self> {
        cfg.validate()?;
        cfg.check_method(method)?;
        let rc = &cfg.round;
        let seed = rc.seed;
        if dataset.dim() != cfg.data.dim || dataset.num_classes() != cfg.data.classes {
            return Err(Error::Config("dataset shape differs from the data config".into()));
        }
        let site = match rc.scenario {
            Scenario::LabelsAtClient => LabelSite::Clients,
            Scenario::LabelsAtServer => LabelSite::Server,
        };
        let pseed = derive_seed(&[seed, PARTITION_STREAM]);
        let lpc = cfg.data.labels_per_class;
        let plan = match cfg.data.partition {
            PartitionMode::Iid => data::split_iid(&dataset, rc.clients, lpc, site, pseed)?,
            PartitionMode::NonIid => data::split_noniid(
                &dataset,
                rc.clients,
                lpc,
                site,
                cfg.data.dirichlet_alpha,
                pseed,
            )?,
        };
        let plan = data::split_streaming(&plan, cfg.data.stream_steps, cfg.data.rounds_per_step)?;

        let arch = Arc::new(cfg.arch()?);
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, INIT_STREAM]));
        let sigma = ParamVector::variance_scaling(arch.clone(), &mut init_rng);
        let psi = match (method, cfg.model.psi_init) {
            (Method::Fedmatch, PsiInit::VarianceScaling) => {
                ParamVector::variance_scaling(arch.clone(), &mut init_rng)
            }
            _ => ParamVector::zeros(arch.clone()),
        };
        let global = DecomposedModel::new(sigma, psi)?;

        let client_audit = LabelAudit::new();
        let server_audit = LabelAudit::new();
        let with_labels = rc.scenario == Scenario::LabelsAtClient;
        let handles =
            ClientDataHandle::from_plan(&dataset, &plan, with_labels, rc.full_labels, &client_audit);
        let zero = DecomposedModel::new(ParamVector::zeros(arch.clone()), ParamVector::zeros(arch.clone()))?;
        let clients = handles
            .into_iter()
            .enumerate()
            .map(|(id, data)| ClientState {
                id,
                model: zero.clone(),
                opt: OptimState::new(rc.lr),
                data,
                last_update_round: None,
            })
            .collect();
        let labeled = (rc.scenario == Scenario::LabelsAtServer).then(|| {
            LabeledView::new(dataset.clone(), plan.server_labeled.clone(), server_audit.clone())
        });
        let server = ServerState {
            global,
            opt: OptimState::new(rc.lr),
            embeddings: BTreeMap::new(),
            client_psi: BTreeMap::new(),
            ledger: CostLedger::new(),
            probe: ProbeInput::gaussian(
                rc.probe_rows,
                cfg.data.dim,
                derive_seed(&[seed, PROBE_STREAM]),
            ),
            labeled,
            seed,
        };
        Ok(Self {
            test_idx: dataset.indices(Split::Test),
            valid_idx: dataset.indices(Split::Valid),
            labeled_idx: plan.all_labeled(),
            cfg: cfg.clone(),
            method,
            scheduling: Scheduling::default(),
            dataset,
            plan,
            server,
            clients,
            client_audit,
            server_audit,
            round: 0,
            metrics: Vec::new(),
        })
    }

    pub fn with_scheduling(mut self, scheduling: Scheduling) -> Self {
        self.scheduling = scheduling;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn client_label_reads(&self) -> usize {
        self.client_audit.reads()
    }

    /// The model evaluated by the metrics: σ + ψ (θ for the baselines).
    pub fn global_theta(&self) -> ParamVector {
        self.server.global.compose()
    }

    /// Runs the next round and returns its metrics row.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        self.round += 1;
        let round = self.round;
        let rc = &self.cfg.round;
        let losses = match self.method {
            Method::Fedmatch => fedmatch_round(&mut self.server, &mut self.clients, round, rc, self.scheduling)?,
            m => baseline_round(&mut self.server, &mut self.clients, round, rc, m, self.scheduling)?,
        };

        let theta = self.global_theta();
        let ds = &self.dataset;
        let test_acc = eval_accuracy(&theta, ds, &self.test_idx)?;
        let labeled_acc = eval_accuracy(&theta, ds, &self.labeled_idx)?;
        if rc.adaptive_lr && !self.valid_idx.is_empty() {
            let val = eval_loss(&theta, ds, &self.valid_idx)?;
            let next = nn::lr_step(&self.server.opt, val);
            if next.lr < self.server.opt.lr {
                log::info!("round {round}: lr decayed to {}", next.lr);
            }
            self.server.opt = next;
        }
        let cost = self.server.ledger.get(round).cloned().unwrap_or_default();
        let row = RoundMetrics {
            round,
            test_acc,
            labeled_acc,
            loss_s: losses.mean_supervised(),
            loss_u: losses.mean_unsupervised(),
            s2c_pct: cost.s2c_pct(),
            c2s_pct: cost.c2s_pct(),
            nnz_psi_frac: (self.method == Method::Fedmatch).then(|| self.server.global.psi().nnz_fraction()),
        };
        log::debug!(
            "round {round}: test {:.4} labeled {:.4} s2c {:.1}% c2s {:.1}%",
            row.test_acc,
            row.labeled_acc,
            row.s2c_pct,
            row.c2s_pct
        );
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Runs the remaining rounds.
    pub fn run(mut self) -> Result<ExperimentOutcome> {
        while self.round < self.cfg.round.rounds {
            self.step()?;
        }
        Ok(ExperimentOutcome {
            metrics: MetricsSeries {
                method: self.method,
                scenario: self.cfg.round.scenario,
                seed: self.cfg.round.seed,
                rounds: self.metrics,
            },
            ledger: self.server.ledger,
            final_model: self.server.global,
            client_label_reads: self.client_audit.reads(),
            server_label_reads: self.server_audit.reads(),
        })
    }
}

fn eval_accuracy(theta: &ParamVector, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let preds = nn::forward(theta, ds.rows(idx).view())?;
    Ok(nn::accuracy(&preds, &ds.labels_of(idx)))
}

fn eval_loss(theta: &ParamVector, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    let preds = nn::forward(theta, ds.rows(idx).view())?;
    let targets = nn::one_hot_labels(&ds.labels_of(idx), ds.num_classes());
    nn::cross_entropy(targets.view(), &preds)
}

/// Runs a full experiment with parallel client scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, method: Method) -> Result<ExperimentOutcome> {
    Simulation::new(cfg, method)?.run()
}

//! Synthetic blob datasets, client partitions and per-client data handles.
//!
//! Partitions follow the usual federated semi-supervised layout: a small
//! labeled set per class (held by each client, or only by the server) and the
//! rest of the training split spread over clients as unlabeled data, either
//! evenly (IID) or with Dirichlet class imbalance. Streaming plans cut each
//! client's unlabeled share into ordered chunks revealed one at a time.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.len() != features.nrows() || splits.len() != features.nrows() {
            return Err(invalid("features, labels and split tags differ in length"));
        }
        if num_classes < 2 {
            return Err(invalid("need at least two classes"));
        }
        if labels.iter().any(|&y| y >= num_classes) {
            return Err(invalid("label outside [0, C)"));
        }
        Ok(Self {
            features,
            labels,
            splits,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn rows(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), indices)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// CSV with header `feature_0..feature_{d-1},label,split`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("feature_{j}")).collect();
        header.push("label".into());
        header.push("split".into());
        w.write_record(&header)?;
        for (i, row) in self.features.outer_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.splits[i].as_str().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]. The class count is
    /// taken as the largest label plus one.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let header = r.headers()?.clone();
        let dim = header.len().checked_sub(2).ok_or_else(|| invalid("header too short"))?;
        for (j, name) in header.iter().take(dim).enumerate() {
            if name != format!("feature_{j}") {
                return Err(invalid(format!("unexpected column `{name}`")));
            }
        }
        if header.get(dim) != Some("label") || header.get(dim + 1) != Some("split") {
            return Err(invalid("last columns must be `label,split`"));
        }
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..dim {
                flat.push(rec[j].parse::<f64>().map_err(|e| invalid(e.to_string()))?);
            }
            labels.push(rec[dim].parse::<usize>().map_err(|e| invalid(e.to_string()))?);
            splits.push(Split::parse(&rec[dim + 1])?);
        }
        let n = labels.len();
        let features =
            Array2::from_shape_vec((n, dim), flat).map_err(|e| invalid(e.to_string()))?;
        let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        Self::new(features, labels, splits, classes)
    }
}

/// One isotropic Gaussian cluster per class with standard-normal centres,
/// split 90/5/5 into train/valid/test within each class.
pub fn make_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid("need at least two classes"));
    }
    if dim == 0 || n_per_class == 0 {
        return Err(invalid("dimension and class size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Array2<f64> = Array2::from_shape_simple_fn((classes, dim), || {
        StandardNormal.sample(&mut rng)
    });
    let n = classes * n_per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut splits = vec![Split::Train; n];
    let n_train = (n_per_class as f64 * 0.9).round() as usize;
    let n_valid = (n_per_class as f64 * 0.05).round() as usize;
    for c in 0..classes {
        let base = c * n_per_class;
        for k in 0..n_per_class {
            let mut row = features.row_mut(base + k);
            for j in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                row[j] = centers[[c, j]] + spread * z;
            }
            labels.push(c);
        }
        let mut order: Vec<usize> = (base..base + n_per_class).collect();
        order.shuffle(&mut rng);
        for (pos, &i) in order.iter().enumerate() {
            splits[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
        }
    }
    Dataset::new(features, labels, splits, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    NonIid,
}

/// Who holds the labeled instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSite {
    Clients,
    Server,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Dirichlet draw used for the unlabeled share (non-IID only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_proportions: Option<Vec<f64>>,
    /// Ordered chunks of `unlabeled` (streaming only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_chunks: Option<Vec<Vec<usize>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSchedule {
    pub steps: usize,
    pub rounds_per_step: usize,
}

impl StreamSchedule {
    /// Zero-based chunk visible at (one-based) `round`.
    pub fn step_at(&self, round: usize) -> usize {
        (round.saturating_sub(1) / self.rounds_per_step.max(1)).min(self.steps - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    pub label_site: LabelSite,
    pub labels_per_class: usize,
    pub server_labeled: Vec<usize>,
    pub clients: Vec<ClientPartition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamSchedule>,
}

impl PartitionPlan {
    pub fn write(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    /// All labeled indices, server or clients.
    pub fn all_labeled(&self) -> Vec<usize> {
        let mut out = self.server_labeled.clone();
        for c in &self.clients {
            out.extend_from_slice(&c.labeled);
        }
        out
    }
}

/// Labeled picks per class plus the shuffled leftover training pool.
fn pick_labeled(
    ds: &Dataset,
    clients: usize,
    labels_per_class: usize,
    site: LabelSite,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<usize>>, Vec<usize>, Vec<Vec<usize>>)> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for i in ds.indices(Split::Train) {
        by_class[ds.labels[i]].push(i);
    }
    let holders = match site {
        LabelSite::Clients => clients,
        LabelSite::Server => 1,
    };
    let need = holders * labels_per_class;
    let mut labeled = vec![Vec::new(); holders];
    let mut leftover_by_class = Vec::with_capacity(by_class.len());
    for (c, pool) in by_class.iter_mut().enumerate() {
        if pool.len() < need {
            return Err(Error::Config(format!(
                "class {c} has {} training instances, {need} labeled ones requested",
                pool.len()
            )));
        }
        pool.shuffle(rng);
        for (h, chunk) in pool[..need].chunks(labels_per_class.max(1)).enumerate() {
            if labels_per_class > 0 {
                labeled[h].extend_from_slice(chunk);
            }
        }
        leftover_by_class.push(pool[need..].to_vec());
    }
    let mut pool: Vec<usize> = leftover_by_class.iter().flatten().copied().collect();
    pool.sort_unstable();
    pool.shuffle(rng);
    Ok((labeled, pool, leftover_by_class))
}

fn even_sizes(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|k| total / parts + usize::from(k < total % parts))
        .collect()
}

fn assemble(
    mode: PartitionMode,
    site: LabelSite,
    labels_per_class: usize,
    labeled: Vec<Vec<usize>>,
    unlabeled: Vec<Vec<usize>>,
    proportions: Option<Vec<Vec<f64>>>,
) -> PartitionPlan {
    let (server_labeled, client_labeled) = match site {
        LabelSite::Server => (
            labeled.into_iter().next().unwrap_or_default(),
            vec![Vec::new(); unlabeled.len()],
        ),
        LabelSite::Clients => (Vec::new(), labeled),
    };
    let mut props = proportions.map(|p| p.into_iter().map(Some).collect::<Vec<_>>());
    let clients = client_labeled
        .into_iter()
        .zip(unlabeled)
        .enumerate()
        .map(|(k, (labeled, unlabeled))| ClientPartition {
            labeled,
            unlabeled,
            class_proportions: props.as_mut().and_then(|p| p[k].take()),
            stream_chunks: None,
        })
        .collect();
    PartitionPlan {
        mode,
        label_site: site,
        labels_per_class,
        server_labeled,
        clients,
        stream: None,
    }
}

/// `labels_per_class` labeled instances per class for each label holder and
/// an even split of the remaining training pool as unlabeled data.
pub fn split_iid(
    ds: &Dataset,
    clients: usize,
    labels_per_class: usize,
    site: LabelSite,
    seed: u64,
) -> Result<PartitionPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labeled, pool, _) = pick_labeled(ds, clients, labels_per_class, site, &mut rng)?;
    let mut unlabeled = Vec::with_capacity(clients);
    let mut start = 0;
    for size in even_sizes(pool.len(), clients) {
        unlabeled.push(pool[start..start + size].to_vec());
        start += size;
    }
    Ok(assemble(PartitionMode::Iid, site, labels_per_class, labeled, unlabeled, None))
}

fn dirichlet(alpha: f64, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("alpha: {e}")))?;
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|d| *d /= sum);
    } else {
        draws.iter_mut().for_each(|d| *d = 1.0 / k as f64);
    }
    Ok(draws)
}

/// Largest-remainder rounding of `weights * total` to integers summing to
/// `total`.
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return even_sizes(total, weights.len());
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / wsum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

/// Like [`split_iid`] for the labeled part; each client's unlabeled class mix
/// follows its own symmetric Dirichlet(`alpha`) draw. Demand for an exhausted
/// class is moved to the client's other classes in proportion to its draw.
pub fn split_noniid(
    ds: &Dataset,
    clients: usize,
    labels_per_class: usize,
    site: LabelSite,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if !(alpha > 0.0) {
        return Err(Error::Config("dirichlet alpha must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (labeled, pool, mut by_class) =
        pick_labeled(ds, clients, labels_per_class, site, &mut rng)?;
    for class_pool in &mut by_class {
        class_pool.shuffle(&mut rng);
    }
    let classes = ds.num_classes();
    let sizes = even_sizes(pool.len(), clients);
    let mut unlabeled = Vec::with_capacity(clients);
    let mut proportions = Vec::with_capacity(clients);
    let mut cursor = vec![0usize; classes];
    for (k, &size) in sizes.iter().enumerate() {
        let p = dirichlet(alpha, classes, &mut rng)?;
        let mut demand = apportion(&p, size);
        let mut mine = Vec::with_capacity(size);
        loop {
            let mut short = 0;
            for c in 0..classes {
                let available = by_class[c].len() - cursor[c];
                let take = demand[c].min(available);
                mine.extend_from_slice(&by_class[c][cursor[c]..cursor[c] + take]);
                cursor[c] += take;
                short += demand[c] - take;
                demand[c] = 0;
            }
            if short == 0 {
                break;
            }
            let open: Vec<f64> = (0..classes)
                .map(|c| {
                    if cursor[c] < by_class[c].len() {
                        p[c].max(1e-12)
                    } else {
                        0.0
                    }
                })
                .collect();
            if open.iter().all(|w| *w == 0.0) {
                break;
            }
            log::info!("client {k}: {short} unlabeled instances moved off exhausted classes");
            demand = apportion(&open, short);
        }
        unlabeled.push(mine);
        proportions.push(p);
    }
    Ok(assemble(
        PartitionMode::NonIid,
        site,
        labels_per_class,
        labeled,
        unlabeled,
        Some(proportions),
    ))
}

/// Cuts each client's unlabeled share into `steps` near-equal ordered chunks.
pub fn split_streaming(
    plan: &PartitionPlan,
    steps: usize,
    rounds_per_step: usize,
) -> Result<PartitionPlan> {
    if steps == 0 || rounds_per_step == 0 {
        return Err(Error::Config("streaming needs at least one step and one round per step".into()));
    }
    let mut out = plan.clone();
    if steps == 1 {
        return Ok(out);
    }
    for client in &mut out.clients {
        let mut chunks = Vec::with_capacity(steps);
        let mut start = 0;
        for size in even_sizes(client.unlabeled.len(), steps) {
            chunks.push(client.unlabeled[start..start + size].to_vec());
            start += size;
        }
        client.stream_chunks = Some(chunks);
    }
    out.stream = Some(StreamSchedule {
        steps,
        rounds_per_step,
    });
    Ok(out)
}

/// Per-class instance counts of an index set.
pub fn class_histogram(ds: &Dataset, indices: &[usize]) -> Vec<usize> {
    let mut h = vec![0; ds.num_classes()];
    for &i in indices {
        h[ds.labels[i]] += 1;
    }
    h
}

/// Shared counter of label reads through [`LabeledView`]s.
#[derive(Clone, Debug, Default)]
pub struct LabelAudit(Arc<AtomicUsize>);

impl LabelAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reads(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn add(&self, n: usize) {
        self.0.fetch_add(n, Ordering::SeqCst);
    }
}

/// Labeled rows; every label handed out is counted on the audit.
#[derive(Clone, Debug)]
pub struct LabeledView {
    ds: Arc<Dataset>,
    indices: Vec<usize>,
    audit: LabelAudit,
}

impl LabeledView {
    pub fn new(ds: Arc<Dataset>, indices: Vec<usize>, audit: LabelAudit) -> Self {
        Self { ds, indices, audit }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Features and labels of the rows at `positions` (offsets into the view).
    pub fn batch(&self, positions: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let idx: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        self.audit.add(idx.len());
        (self.ds.rows(&idx), self.ds.labels_of(&idx))
    }
}

/// Feature-only rows. There is no way to reach a label from here.
#[derive(Clone, Debug)]
pub struct UnlabeledView {
    ds: Arc<Dataset>,
    indices: Vec<usize>,
    chunks: Option<(Vec<Vec<usize>>, StreamSchedule)>,
}

impl UnlabeledView {
    pub fn new(ds: Arc<Dataset>, indices: Vec<usize>) -> Self {
        Self {
            ds,
            indices,
            chunks: None,
        }
    }

    pub fn streaming(
        ds: Arc<Dataset>,
        indices: Vec<usize>,
        chunks: Vec<Vec<usize>>,
        schedule: StreamSchedule,
    ) -> Self {
        Self {
            ds,
            indices,
            chunks: Some((chunks, schedule)),
        }
    }

    /// Dataset indices visible at `round` (all of them outside streaming).
    pub fn visible(&self, round: usize) -> &[usize] {
        match &self.chunks {
            Some((chunks, schedule)) => &chunks[schedule.step_at(round)],
            None => &self.indices,
        }
    }

    pub fn len_at(&self, round: usize) -> usize {
        self.visible(round).len()
    }

    pub fn features(&self, round: usize, positions: &[usize]) -> Array2<f64> {
        let visible = self.visible(round);
        let idx: Vec<usize> = positions.iter().map(|&p| visible[p]).collect();
        self.ds.rows(&idx)
    }
}

/// Everything a client may touch. Label-free when `labeled` is `None`.
#[derive(Clone, Debug)]
pub struct ClientDataHandle {
    pub client_id: usize,
    pub labeled: Option<LabeledView>,
    pub unlabeled: UnlabeledView,
}

impl ClientDataHandle {
    /// Builds handles for every client of `plan`. With `with_labels` false
    /// (labels-at-server), no handle carries a labeled view. With
    /// `unlabeled_labels` the unlabeled share is also exposed as labeled,
    /// which only the fully supervised upper-bound baseline uses.
    pub fn from_plan(
        ds: &Arc<Dataset>,
        plan: &PartitionPlan,
        with_labels: bool,
        unlabeled_labels: bool,
        audit: &LabelAudit,
    ) -> Vec<ClientDataHandle> {
        plan.clients
            .iter()
            .enumerate()
            .map(|(k, part)| {
                let labeled = with_labels.then(|| {
                    let mut idx = part.labeled.clone();
                    if unlabeled_labels {
                        idx.extend_from_slice(&part.unlabeled);
                    }
                    LabeledView::new(ds.clone(), idx, audit.clone())
                });
                let unlabeled = match (&part.stream_chunks, &plan.stream) {
                    (Some(chunks), Some(schedule)) => UnlabeledView::streaming(
                        ds.clone(),
                        part.unlabeled.clone(),
                        chunks.clone(),
                        schedule.clone(),
                    ),
                    _ => UnlabeledView::new(ds.clone(), part.unlabeled.clone()),
                };
                ClientDataHandle {
                    client_id: k,
                    labeled,
                    unlabeled,
                }
            })
            .collect()
    }
}

/// Checks that `parts` are pairwise disjoint; returns their union's size.
pub fn disjoint_union_len<'a>(parts: impl IntoIterator<Item = &'a [usize]>) -> Option<usize> {
    let mut seen = BTreeMap::new();
    for part in parts {
        for &i in part {
            if seen.insert(i, ()).is_some() {
                return None;
            }
        }
    }
    Some(seen.len())
}

//! Model embeddings on a shared Gaussian probe and nearest-neighbour helper
//! lookup over them.

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::nn::{self, ParamVector};

/// Probe rows used when no size is configured.
pub const DEFAULT_PROBE_ROWS: usize = 8;
/// Rounds between helper deliveries.
pub const DEFAULT_HELPER_PERIOD: usize = 10;

/// Fixed standard-Gaussian input shared by every embedding of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeInput {
    rows: Array2<f64>,
    seed: u64,
}

impl ProbeInput {
    pub fn gaussian(rows: usize, input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Array2::from_shape_simple_fn((rows, input_dim), || {
            StandardNormal.sample(&mut rng)
        });
        Self { rows, seed }
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelEmbedding {
    pub vector: Vec<f64>,
    pub client_id: usize,
    pub round_tag: usize,
}

/// Row-major concatenation of the model's softmax outputs on the probe.
pub fn embed_model(
    params: &ParamVector,
    probe: &ProbeInput,
    client_id: usize,
    round_tag: usize,
) -> Result<ModelEmbedding> {
    let probs = nn::forward(params, probe.rows.view())?;
    Ok(ModelEmbedding {
        vector: probs.rows().iter().copied().collect(),
        client_id,
        round_tag,
    })
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// KD-tree over the latest embedding of each client.
#[derive(Clone, Debug)]
pub struct EmbeddingIndex {
    dim: usize,
    points: Vec<Vec<f64>>,
    ids: Vec<usize>,
    /// Point order after partitioning; leaves reference ranges of it.
    order: Vec<usize>,
    nodes: Vec<Node>,
    by_id: HashMap<usize, usize>,
}

/// Candidate ordering: distance first, then client id.
fn candidate_cmp(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

impl EmbeddingIndex {
    /// Builds the tree. When a client appears more than once only its
    /// highest `round_tag` embedding is kept.
    pub fn build(embeddings: &[ModelEmbedding]) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::NoEmbeddings);
        }
        let dim = embeddings[0].vector.len();
        if embeddings.iter().any(|e| e.vector.len() != dim) {
            return Err(invalid("embeddings differ in length"));
        }
        let mut latest: HashMap<usize, &ModelEmbedding> = HashMap::new();
        for e in embeddings {
            match latest.get(&e.client_id) {
                Some(prev) if prev.round_tag > e.round_tag => {}
                _ => {
                    latest.insert(e.client_id, e);
                }
            }
        }
        let mut kept: Vec<&ModelEmbedding> = latest.into_values().collect();
        kept.sort_by_key(|e| e.client_id);

        let points: Vec<Vec<f64>> = kept.iter().map(|e| e.vector.clone()).collect();
        let ids: Vec<usize> = kept.iter().map(|e| e.client_id).collect();
        let by_id = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut index = Self {
            dim,
            order: (0..points.len()).collect(),
            points,
            ids,
            nodes: Vec::new(),
            by_id,
        };
        let n = index.points.len();
        index.build_node(0, n);
        Ok(index)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let slot = self.nodes.len();
        if end - start <= LEAF_SIZE || self.dim == 0 {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        let (dim, spread) = self.widest_dim(start, end);
        if spread <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return slot;
        }
        self.nodes.push(Node::Leaf { start, end });
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][dim].total_cmp(&points[b][dim])
        });
        let value = self.points[self.order[mid]][dim];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[slot] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        slot
    }

    fn widest_dim(&self, start: usize, end: usize) -> (usize, f64) {
        (0..self.dim)
            .map(|d| {
                let (lo, hi) = self.order[start..end].iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), &i| (lo.min(self.points[i][d]), hi.max(self.points[i][d])),
                );
                (d, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, client_id: usize) -> bool {
        self.by_id.contains_key(&client_id)
    }

    pub fn embedding_of(&self, client_id: usize) -> Option<&[f64]> {
        self.by_id.get(&client_id).map(|&i| self.points[i].as_slice())
    }

    /// The `k` nearest clients to `query` as `(client_id, squared distance)`,
    /// nearest first, distance ties resolved by lower client id.
    pub fn knn(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(invalid(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim
            )));
        }
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.search(0, query, k, exclude, &mut best);
        }
        Ok(best.into_iter().map(|(d, id)| (id, d)).collect())
    }

    fn search(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        exclude: Option<usize>,
        best: &mut Vec<(f64, usize)>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let id = self.ids[i];
                    if Some(id) == exclude {
                        continue;
                    }
                    let cand = (squared_distance(query, &self.points[i]), id);
                    if best.len() < k {
                        let pos = best.partition_point(|b| candidate_cmp(b, &cand).is_lt());
                        best.insert(pos, cand);
                    } else if candidate_cmp(&cand, best.last().unwrap()).is_lt() {
                        best.pop();
                        let pos = best.partition_point(|b| candidate_cmp(b, &cand).is_lt());
                        best.insert(pos, cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, best);
                // Equal bounds are still visited so that a lower id at the
                // same distance can displace the current worst.
                let bound = diff * diff;
                if best.len() < k || bound <= best.last().unwrap().0 {
                    self.search(far, query, k, exclude, best);
                }
            }
        }
    }
}

pub fn build_index(embeddings: &[ModelEmbedding]) -> Result<EmbeddingIndex> {
    EmbeddingIndex::build(embeddings)
}

/// Up to `h` nearest peers of `requester`, never the requester itself.
pub fn query_helpers(index: &EmbeddingIndex, requester: usize, h: usize) -> Result<Vec<usize>> {
    let query = index
        .embedding_of(requester)
        .ok_or(Error::NotYetEmbedded(requester))?
        .to_vec();
    Ok(index
        .knn(&query, h, Some(requester))?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

/// Helpers go out on rounds that are multiples of `period`.
pub fn helper_due(round: usize, period: usize) -> bool {
    period > 0 && round > 0 && round.is_multiple_of(period)
}

//! Undirected attributed graphs, their propagation operators, and the
//! train/validation/test protocols built on them.

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// Immutable undirected graph in CSR form with node features and labels.
///
/// Adjacency is symmetric, deduplicated and free of self-loops. Self-loops
/// only appear inside the normalized operators.
#[derive(Clone, Debug)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Tensor,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    sparse_features: OnceLock<Arc<CsrMatrix>>,
}

impl Graph {
    /// Symmetrizes and deduplicates `edges`, dropping self-loops.
    pub fn build(
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Vec<Option<usize>>,
        num_classes: usize,
    ) -> Result<Graph> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Graph(format!(
                "{} label entries for {} feature rows",
                labels.len(),
                n
            )));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&c| c >= num_classes) {
            return Err(Error::Graph(format!("label {bad} >= class count {num_classes}")));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::Graph(format!("edge ({u}, {v}) outside [0, {n})")));
            }
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Ok(Graph {
            offsets,
            neighbors,
            features,
            labels,
            num_classes,
            sparse_features: OnceLock::new(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|u| self.degree(u)).collect()
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&u| self.degree(u) == 0).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes() {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Same structure and labels with replaced features.
    pub fn with_features(&self, features: Tensor) -> Result<Graph> {
        if features.rows() != self.num_nodes() {
            return Err(Error::shape("with_features", (self.num_nodes(), 0), features.shape()));
        }
        Ok(Graph {
            offsets: self.offsets.clone(),
            neighbors: self.neighbors.clone(),
            features,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            sparse_features: OnceLock::new(),
        })
    }

    /// Features as CSR, built once.
    pub fn sparse_features(&self) -> Arc<CsrMatrix> {
        Arc::clone(
            self.sparse_features
                .get_or_init(|| Arc::new(CsrMatrix::from_dense(&self.features))),
        )
    }

    /// Fraction of nonzero feature entries.
    pub fn feature_density(&self) -> f64 {
        let len = self.features.len().max(1);
        self.sparse_features().nnz() as f64 / len as f64
    }

    /// GCN propagation operator `D̃^{-1/2}(A + I)D̃^{-1/2}`.
    pub fn gcn_norm(&self) -> CsrMatrix {
        let n = self.num_nodes();
        let inv_sqrt: Vec<f64> = (0..n).map(|u| 1.0 / ((self.degree(u) + 1) as f64).sqrt()).collect();
        let mut triplets = Vec::with_capacity(self.neighbors.len() + n);
        for u in 0..n {
            triplets.push((u, u, inv_sqrt[u] * inv_sqrt[u]));
            for &v in self.neighbors(u) {
                triplets.push((u, v, inv_sqrt[u] * inv_sqrt[v]));
            }
        }
        CsrMatrix::from_triplets(n, n, &triplets).expect("indices in range")
    }

    /// Row-normalized adjacency: row `u` averages the neighbors of `u`.
    /// Isolated nodes get an empty row, so their neighbor mean is zero.
    pub fn mean_aggregator(&self) -> CsrMatrix {
        let n = self.num_nodes();
        let mut triplets = Vec::with_capacity(self.neighbors.len());
        for u in 0..n {
            let d = self.degree(u) as f64;
            for &v in self.neighbors(u) {
                triplets.push((u, v, 1.0 / d));
            }
        }
        CsrMatrix::from_triplets(n, n, &triplets).expect("indices in range")
    }

    /// Mean aggregator that samples at most `fanout` neighbors per node.
    pub fn sampled_mean_aggregator(&self, fanout: usize, rng: &mut impl Rng) -> CsrMatrix {
        let n = self.num_nodes();
        let mut triplets = Vec::new();
        for u in 0..n {
            let nbrs = self.neighbors(u);
            if nbrs.len() <= fanout {
                for &v in nbrs {
                    triplets.push((u, v, 1.0 / nbrs.len() as f64));
                }
            } else {
                for &v in nbrs.choose_multiple(rng, fanout) {
                    triplets.push((u, v, 1.0 / fanout as f64));
                }
            }
        }
        CsrMatrix::from_triplets(n, n, &triplets).expect("indices in range")
    }

    /// Symmetric normalized Laplacian `I - D^{-1/2} A D^{-1/2}` as a dense
    /// matrix. Fails on isolated nodes.
    pub fn normalized_laplacian(&self) -> Result<Tensor> {
        if let Some(&node) = self.isolated_nodes().first() {
            return Err(Error::DegenerateDegree { node });
        }
        Ok(self.laplacian_dense())
    }

    /// Normalized Laplacian where every isolated node carries a self-loop,
    /// which makes it a separate zero-eigenvalue component.
    pub fn normalized_laplacian_with_self_loops(&self) -> Tensor {
        self.laplacian_dense()
    }

    fn laplacian_dense(&self) -> Tensor {
        let n = self.num_nodes();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|u| match self.degree(u) {
                0 => 1.0,
                d => 1.0 / (d as f64).sqrt(),
            })
            .collect();
        let mut lap = Tensor::identity(n);
        for u in 0..n {
            if self.degree(u) == 0 {
                // a lone self-loop normalizes to 1, cancelling the identity
                lap.set(u, u, 0.0);
            }
            for &v in self.neighbors(u) {
                lap.set(u, v, -inv_sqrt[u] * inv_sqrt[v]);
            }
        }
        lap
    }

    /// Number of connected components.
    pub fn num_components(&self) -> usize {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            count += 1;
            seen[s] = true;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &v in self.neighbors(u) {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        count
    }
}

/// Subgraph induced by a node subset together with the id remap.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub graph: Graph,
    /// `origin[new_id] = old_id`.
    pub origin: Vec<usize>,
}

impl Subgraph {
    /// Local id of an original node, if it was kept.
    pub fn local_id(&self, old: usize) -> Option<usize> {
        self.origin.binary_search(&old).ok()
    }
}

/// Keeps the nodes in `observed` and every edge with both endpoints kept.
/// Local ids follow ascending original id.
pub fn induced_subgraph(graph: &Graph, observed: &[usize]) -> Result<Subgraph> {
    if observed.is_empty() {
        return Err(Error::Graph("induced subgraph of an empty node set".into()));
    }
    let origin: Vec<usize> = observed.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if let Some(&bad) = origin.last().filter(|&&v| v >= graph.num_nodes()) {
        return Err(Error::Graph(format!("observed id {bad} outside graph")));
    }
    let mut local = vec![usize::MAX; graph.num_nodes()];
    for (new, &old) in origin.iter().enumerate() {
        local[old] = new;
    }
    let mut edges = Vec::new();
    for (new, &old) in origin.iter().enumerate() {
        for &v in graph.neighbors(old) {
            let lv = local[v];
            if lv != usize::MAX && new < lv {
                edges.push((new, lv));
            }
        }
    }
    let features = graph.features().gather_rows(&origin);
    let labels = origin.iter().map(|&o| graph.labels()[o]).collect();
    let sub = Graph::build(&edges, features, labels, graph.num_classes())?;
    Ok(Subgraph { graph: sub, origin })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Setting {
    Transductive,
    Inductive,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Transductive => "trans",
            Setting::Inductive => "induc",
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trans" | "transductive" => Ok(Setting::Transductive),
            "induc" | "inductive" => Ok(Setting::Inductive),
            other => Err(Error::Config(format!("unknown setting `{other}` (trans | induc)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitParams {
    pub labeled_per_class: usize,
    pub validation_count: usize,
    /// Fraction of all nodes held out as unobserved test nodes (inductive).
    pub holdout_fraction: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            labeled_per_class: 20,
            validation_count: 30,
            holdout_fraction: 0.2,
        }
    }
}

/// Node roles for one run. `train_labeled`, `train_soft`, `validation` and
/// `test` are pairwise disjoint; all ids refer to the full graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub mode: Setting,
    pub train_labeled: Vec<usize>,
    pub train_soft: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Nodes visible before inference (inductive only).
    pub observed: Option<Vec<usize>>,
}

impl SplitSpec {
    /// Nodes whose teacher outputs the student is trained to match.
    ///
    /// Transductive runs see the whole graph, so the (label-free) teacher
    /// predictions on test nodes are targets too. Inductive runs only use
    /// observed nodes.
    pub fn soft_target_ids(&self) -> Vec<usize> {
        let mut ids = self.train_soft.clone();
        if self.mode == Setting::Transductive {
            ids.extend_from_slice(&self.test);
        }
        ids.sort_unstable();
        ids
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for set in [&self.train_labeled, &self.train_soft, &self.validation, &self.test] {
            for &id in set.iter() {
                if !seen.insert(id) {
                    return Err(Error::Split(format!("node {id} appears in two roles")));
                }
            }
        }
        if let Some(observed) = &self.observed {
            let obs: BTreeSet<usize> = observed.iter().copied().collect();
            if self.test.iter().any(|t| obs.contains(t)) {
                return Err(Error::Split("an inductive test node is observed".into()));
            }
            let train = self.train_labeled.iter().chain(&self.train_soft).chain(&self.validation);
            if let Some(bad) = train.into_iter().find(|t| !obs.contains(t)) {
                return Err(Error::Split(format!("training node {bad} is not observed")));
            }
        }
        Ok(())
    }
}

/// Random split with `labeled_per_class` labeled nodes per class and
/// `validation_count` validation nodes, drawn from labeled nodes only.
///
/// Transductive: every remaining labeled node is a test node; nodes without
/// a label are `train_soft`. Inductive: first a random `holdout_fraction` of
/// all nodes is removed (its labeled members become the test set), then the
/// observed nodes are split as above with the observed remainder as
/// `train_soft`.
pub fn make_split(graph: &Graph, mode: Setting, params: SplitParams, seed: u64) -> Result<SplitSpec> {
    let n = graph.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pool, test_holdout, observed) = match mode {
        Setting::Transductive => ((0..n).collect::<Vec<_>>(), Vec::new(), None),
        Setting::Inductive => {
            if !(0.0..1.0).contains(&params.holdout_fraction) {
                return Err(Error::Split(format!(
                    "holdout fraction {} outside [0, 1)",
                    params.holdout_fraction
                )));
            }
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let held = (params.holdout_fraction * n as f64).round() as usize;
            let mut unobserved = all[..held].to_vec();
            let mut observed = all[held..].to_vec();
            unobserved.sort_unstable();
            observed.sort_unstable();
            let test = unobserved.into_iter().filter(|&u| graph.labels()[u].is_some()).collect();
            (observed.clone(), test, Some(observed))
        }
    };

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); graph.num_classes()];
    let mut unlabeled = Vec::new();
    for &u in &pool {
        match graph.labels()[u] {
            Some(c) => by_class[c].push(u),
            None => unlabeled.push(u),
        }
    }
    let mut labeled = Vec::new();
    let mut rest = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.len() < params.labeled_per_class {
            return Err(Error::Split(format!(
                "class {c} has {} nodes, fewer than {} requested",
                members.len(),
                params.labeled_per_class
            )));
        }
        members.shuffle(&mut rng);
        labeled.extend_from_slice(&members[..params.labeled_per_class]);
        rest.extend_from_slice(&members[params.labeled_per_class..]);
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    if rest.len() < params.validation_count {
        return Err(Error::Split(format!(
            "only {} nodes left for {} validation nodes",
            rest.len(),
            params.validation_count
        )));
    }
    let mut validation = rest[..params.validation_count].to_vec();
    let mut remainder = rest[params.validation_count..].to_vec();
    labeled.sort_unstable();
    validation.sort_unstable();
    remainder.sort_unstable();

    let (test, train_soft) = match mode {
        Setting::Transductive => (remainder, unlabeled),
        Setting::Inductive => {
            let mut soft = remainder;
            soft.extend(unlabeled);
            soft.sort_unstable();
            (test_holdout, soft)
        }
    };
    let split = SplitSpec {
        mode,
        train_labeled: labeled,
        train_soft,
        validation,
        test,
        observed,
    };
    split.check_disjoint()?;
    Ok(split)
}

/// Scales each row to sum to 1; all-zero rows stay zero.
pub fn row_normalize(features: &Tensor) -> Tensor {
    let mut out = features.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let sum: f64 = row.iter().sum();
        if sum != 0.0 {
            row.iter_mut().for_each(|x| *x /= sum);
        }
    }
    out
}

/// Convex blend `(1 - fraction) X + fraction R`, where `R` is uniform over
/// each feature's observed `[min, max]` range. Deterministic per seed.
pub fn add_feature_noise(features: &Tensor, fraction: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("noise fraction {fraction} outside [0, 1]")));
    }
    if fraction == 0.0 {
        return Ok(features.clone());
    }
    let (n, d) = features.shape();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = features.clone();
    for i in 0..n {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            let r = lo[j] + rng.random::<f64>() * (hi[j] - lo[j]);
            *v = (1.0 - fraction) * *v + fraction * r;
        }
    }
    Ok(out)
}

//! Losses and the three training stages: teacher pretraining, kernel-matched
//! distillation into an MLP, and graph-free inference.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{induced_subgraph, Graph, Setting, SplitSpec};
use crate::kernels::{mapping_distance, mapping_matrix, reconstruction_loss, KernelKind, KernelSpec};
use crate::models::{
    gnn_forward, mlp_forward, predict, Input, ModelConfig, ModelKind, ModelParams, NormKind, Propagation,
};
use crate::optim::Adam;
use crate::sparse::CsrMatrix;
use crate::spectral::pe::{embed_pe, FusionVars};
use crate::spectral::{FusionMode, PeFusion};
use crate::tensor::Tensor;

/// Floor applied to `q` in [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

/// Independent random stream `id` derived from a run seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_KERNEL: u64 = 4;
const STREAM_FANOUT: u64 = 5;

/// Mean over rows of `Σ_i p_i ln(p_i / q_i)`, with `q` floored at
/// [`KL_FLOOR`] and `0 ln 0 = 0`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape("kl_divergence", p.shape(), q.shape()));
    }
    if p.data().iter().chain(q.data()).any(|&x| x < 0.0) {
        return Err(Error::Contract("kl_divergence of negative entries".into()));
    }
    if p.rows() == 0 {
        return Err(Error::Contract("kl_divergence over zero rows".into()));
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum();
    Ok(total / p.rows() as f64)
}

/// `KL(teacher ‖ softmax(logits / τ))` averaged over rows and scaled by τ².
/// The teacher rows are constants.
pub fn soft_target_loss(tape: &mut Tape, logits: Var, teacher_logits: &Tensor, tau: f64) -> Result<Var> {
    if tape.shape(logits) != teacher_logits.shape() {
        return Err(Error::shape("soft_target_loss", tape.shape(logits), teacher_logits.shape()));
    }
    let p = soft_targets(teacher_logits, tau);
    let entropy_term: f64 = p.data().iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
    let rows = p.rows() as f64;
    let scaled = tape.scale(logits, 1.0 / tau);
    let log_q = tape.log_softmax_rows(scaled);
    let pv = tape.constant(p);
    let weighted = tape.mul(pv, log_q)?;
    let cross = tape.sum(weighted);
    // (Σ p ln p − Σ p ln q) / rows
    let neg = tape.scale(cross, -tau * tau / rows);
    Ok(tape.add_scalar(neg, tau * tau * entropy_term / rows))
}

/// Teacher probabilities at temperature τ.
pub fn soft_targets(teacher_logits: &Tensor, tau: f64) -> Tensor {
    teacher_logits.map(|x| x / tau).softmax_rows()
}

/// Mean cross-entropy of `logits` rows against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let log_p = tape.log_softmax_rows(logits);
    tape.nll_mean(log_p, labels)
}

/// `θ · CE + (1 − θ) · τ² KL`. A term whose node set is empty is dropped;
/// an empty labeled set with θ > 0 is an error.
pub fn output_loss(
    tape: &mut Tape,
    labeled: Option<(Var, &[usize])>,
    soft: Option<(Var, &Tensor)>,
    theta: f64,
    tau: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&theta) || tau <= 0.0 {
        return Err(Error::Config(format!("θ = {theta}, τ = {tau} out of range")));
    }
    let labeled = labeled.filter(|(_, labels)| !labels.is_empty());
    if labeled.is_none() && theta > 0.0 && soft.is_none() {
        return Err(Error::Contract("output loss with no labeled or soft-target nodes".into()));
    }
    let truth = match labeled {
        Some((logits, labels)) if theta > 0.0 => {
            let ce = cross_entropy(tape, logits, labels)?;
            Some(tape.scale(ce, theta))
        }
        _ => None,
    };
    let soft_term = match soft {
        Some((logits, teacher)) if theta < 1.0 => {
            let kl = soft_target_loss(tape, logits, teacher, tau)?;
            Some(tape.scale(kl, 1.0 - theta))
        }
        _ => None,
    };
    match (truth, soft_term) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::Contract("output loss has no active term".into())),
    }
}

/// `L_out + (γ / K) Σ_l distance_l`. With no distances or γ = 0 the output
/// loss is returned unchanged.
pub fn total_loss(tape: &mut Tape, output: Var, distances: &[Var], gamma: f64) -> Result<Var> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("γ = {gamma} must be >= 0")));
    }
    if distances.is_empty() || gamma == 0.0 {
        return Ok(output);
    }
    let mut sum = distances[0];
    for &d in &distances[1..] {
        sum = tape.add(sum, d)?;
    }
    let weighted = tape.scale(sum, gamma / distances.len() as f64);
    tape.add(output, weighted)
}

/// Early-stopping limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            max_epochs: 1000,
            patience: 50,
        }
    }
}

/// Best-snapshot tracker: validation accuracy first, validation loss as
/// the tie-break.
#[derive(Clone, Debug)]
struct Stopper<T> {
    best: Option<(f64, f64, T)>,
    since: usize,
    patience: usize,
}

impl<T: Clone> Stopper<T> {
    fn new(patience: usize) -> Self {
        Stopper {
            best: None,
            since: 0,
            patience,
        }
    }

    /// Returns whether training should stop.
    fn observe(&mut self, acc: f64, loss: f64, snapshot: impl FnOnce() -> T) -> bool {
        let better = match &self.best {
            None => true,
            Some((a, l, _)) => acc > *a || (acc == *a && loss < *l),
        };
        if better {
            self.best = Some((acc, loss, snapshot()));
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= self.patience
    }

    fn into_best(self) -> (f64, f64, T) {
        self.best.expect("at least one epoch observed")
    }
}

fn labels_of(graph: &Graph, ids: &[usize]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&i| graph.labels()[i].ok_or_else(|| Error::Split(format!("node {i} has no label"))))
        .collect()
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

/// Teacher training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub norm: NormKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Sampled neighbor count per node for SAGE training; full mean if `None`.
    pub fanout: Option<usize>,
}

impl TeacherConfig {
    /// GCN: hidden 64, weight decay 1e-3. SAGE: hidden 128, weight decay
    /// 5e-4. Both: 2 layers, dropout 0.8, no normalization, lr 0.01.
    pub fn defaults(kind: ModelKind) -> Result<Self> {
        let (hidden_dim, dropout, weight_decay) = match kind {
            ModelKind::Gcn => (64, 0.8, 1e-3),
            ModelKind::Sage => (128, 0.8, 5e-4),
            ModelKind::Mlp => return Err(Error::Config("an MLP cannot be a teacher".into())),
        };
        Ok(TeacherConfig {
            kind,
            hidden_dim,
            num_layers: 2,
            dropout,
            norm: NormKind::None,
            lr: 0.01,
            weight_decay,
            schedule: Schedule::default(),
            fanout: None,
        })
    }
}

/// Teacher predictions for the nodes it was trained with, indexed by
/// full-graph id. Rows of nodes the teacher never saw are unavailable.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub logits: Tensor,
    pub hidden: Vec<Tensor>,
    pub available: Vec<bool>,
    /// Degree of each node in the graph the teacher was trained on.
    pub degrees: Vec<usize>,
}

impl TeacherOutputs {
    fn check(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&i| !self.available[i]) {
            Some(bad) => Err(Error::Contract(format!("teacher output for unseen node {bad} requested"))),
            None => Ok(()),
        }
    }

    pub fn logits_of(&self, ids: &[usize]) -> Result<Tensor> {
        self.check(ids)?;
        Ok(self.logits.gather_rows(ids))
    }

    pub fn hidden_of(&self, layer: usize, ids: &[usize]) -> Result<Tensor> {
        self.check(ids)?;
        let h = self
            .hidden
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("teacher has no hidden layer {layer}")))?;
        Ok(h.gather_rows(ids))
    }
}

#[derive(Clone, Debug)]
pub struct TeacherRun {
    pub params: ModelParams,
    pub outputs: TeacherOutputs,
    pub best_val_acc: f64,
    pub epochs: usize,
}

/// Graph operator for a teacher kind.
pub fn propagation_for(graph: &Graph, kind: ModelKind) -> Result<Propagation> {
    match kind {
        ModelKind::Gcn => Ok(Propagation::Gcn(Arc::new(graph.gcn_norm()))),
        ModelKind::Sage => Ok(Propagation::Sage(Arc::new(graph.mean_aggregator()))),
        ModelKind::Mlp => Err(Error::Config("an MLP has no graph operator".into())),
    }
}

/// Eval-mode teacher forward over a whole graph.
pub fn teacher_predict(params: &ModelParams, graph: &Graph) -> Result<crate::models::ForwardTrace> {
    let prop = propagation_for(graph, params.kind())?;
    predict(params, graph.features(), Some(&prop))
}

/// Stage I: trains a GNN teacher with cross-entropy on the labeled nodes,
/// early-stopped on validation accuracy. Inductive splits train on the
/// subgraph induced by the observed nodes.
pub fn stage1_pretrain(graph: &Graph, split: &SplitSpec, config: &TeacherConfig, seed: u64) -> Result<TeacherRun> {
    split.check_disjoint()?;
    let sub;
    let (train_graph, origin): (&Graph, Option<&[usize]>) = match &split.observed {
        None => (graph, None),
        Some(observed) => {
            sub = induced_subgraph(graph, observed)?;
            (&sub.graph, Some(&sub.origin[..]))
        }
    };
    let local = |ids: &[usize]| -> Result<Vec<usize>> {
        match origin {
            None => Ok(ids.to_vec()),
            Some(origin) => ids
                .iter()
                .map(|&i| {
                    origin
                        .binary_search(&i)
                        .map_err(|_| Error::Split(format!("node {i} is not observed")))
                })
                .collect(),
        }
    };
    let labeled = local(&split.train_labeled)?;
    let validation = local(&split.validation)?;
    let labeled_y = labels_of(train_graph, &labeled)?;
    let val_y = labels_of(train_graph, &validation)?;

    let model_config = ModelConfig {
        kind: config.kind,
        input_dim: train_graph.feature_dim(),
        hidden_dim: config.hidden_dim,
        output_dim: train_graph.num_classes(),
        num_layers: config.num_layers,
        dropout: config.dropout,
        norm: config.norm,
    };
    let mut params = ModelParams::init(model_config, &mut stream(seed, STREAM_INIT))?;
    let full_prop = propagation_for(train_graph, config.kind)?;
    let sparse = train_graph.sparse_features();
    let features = train_graph.features();
    let mut dropout_rng = stream(seed, STREAM_DROPOUT);
    let mut fanout_rng = stream(seed, STREAM_FANOUT);
    let mut optimizer = Adam::new(config.lr, config.weight_decay);
    let mut stopper = Stopper::new(config.schedule.patience);
    let mut epochs = 0;

    for epoch in 0..config.schedule.max_epochs {
        epochs = epoch + 1;
        let prop = match (config.kind, config.fanout) {
            (ModelKind::Sage, Some(k)) => {
                Propagation::Sage(Arc::new(train_graph.sampled_mean_aggregator(k, &mut fanout_rng)))
            }
            _ => full_prop.clone(),
        };
        let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(dropout_rng.next_u64()));
        let bound = params.bind(&mut tape, true);
        let input = Input::from_features(&mut tape, features, Some(&sparse));
        let out = gnn_forward(&mut tape, &params, &bound, &input, &prop)?;
        let picked = tape.gather_rows(out.logits, &labeled)?;
        let loss = cross_entropy(&mut tape, picked, &labeled_y)?;
        check_finite(epoch, tape.value(loss).item())?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = bound
            .vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        optimizer.step(&mut params.tensors_mut(), &g)?;
        params.apply_running_stats(&out.batch_stats);

        let trace = predict(&params, features, Some(&full_prop))?;
        let (acc, loss) = eval_logits(&trace.logits, &validation, &val_y);
        if stopper.observe(acc, loss, || params.clone()) {
            break;
        }
    }
    let (best_val_acc, _, best) = stopper.into_best();
    let outputs = teacher_outputs_on(&best, graph, train_graph, origin)?;
    Ok(TeacherRun {
        params: best,
        outputs,
        best_val_acc,
        epochs,
    })
}

/// Eval-mode teacher outputs for the graph the split lets it train on,
/// indexed by full-graph id.
pub fn teacher_outputs(params: &ModelParams, graph: &Graph, split: &SplitSpec) -> Result<TeacherOutputs> {
    match &split.observed {
        None => teacher_outputs_on(params, graph, graph, None),
        Some(observed) => {
            let sub = induced_subgraph(graph, observed)?;
            teacher_outputs_on(params, graph, &sub.graph, Some(&sub.origin))
        }
    }
}

fn teacher_outputs_on(
    params: &ModelParams,
    graph: &Graph,
    train_graph: &Graph,
    origin: Option<&[usize]>,
) -> Result<TeacherOutputs> {
    let trace = teacher_predict(params, train_graph)?;
    let n = graph.num_nodes();
    Ok(match origin {
        None => TeacherOutputs {
            logits: trace.logits,
            hidden: trace.hidden,
            available: vec![true; n],
            degrees: graph.degrees(),
        },
        Some(origin) => {
            let scatter = |t: &Tensor| {
                let mut full = Tensor::zeros(n, t.cols());
                for (row, &g) in origin.iter().enumerate() {
                    full.row_mut(g).copy_from_slice(t.row(row));
                }
                full
            };
            let mut available = vec![false; n];
            let mut degrees = vec![0; n];
            for (row, &g) in origin.iter().enumerate() {
                available[g] = true;
                degrees[g] = train_graph.degree(row);
            }
            TeacherOutputs {
                logits: scatter(&trace.logits),
                hidden: trace.hidden.iter().map(scatter).collect(),
                available,
                degrees,
            }
        }
    })
}

/// Validation accuracy and mean cross-entropy for `ids` (row ids into
/// `logits`) with labels `y`.
fn eval_logits(logits: &Tensor, ids: &[usize], y: &[usize]) -> (f64, f64) {
    let rows = logits.gather_rows(ids);
    let pred = rows.argmax_rows();
    let correct = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    let mut loss = 0.0;
    for (i, &c) in y.iter().enumerate() {
        let mut row = rows.row(i).to_vec();
        crate::tensor::log_softmax_in_place(&mut row);
        loss -= row[c];
    }
    let n = ids.len().max(1) as f64;
    (correct as f64 / n, loss / n)
}

/// Student training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub gamma: f64,
    pub theta: f64,
    pub tau: f64,
    pub kernel: KernelKind,
    pub pe: Option<FusionMode>,
    /// Hidden layers matched by kernel distance; all shared layers if `None`.
    pub match_layers: Option<Vec<usize>>,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub norm: NormKind,
    pub batch_size: usize,
    pub schedule: Schedule,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            gamma: 0.5,
            theta: 0.4,
            tau: 1.0,
            kernel: KernelKind::Gaussian,
            pe: None,
            match_layers: None,
            lr: 1e-3,
            weight_decay: 0.0,
            dropout: 0.8,
            norm: NormKind::None,
            batch_size: 512,
            schedule: Schedule::default(),
        }
    }
}

impl DistillConfig {
    /// Soft-target-only distillation: no kernel matching, no encodings.
    pub fn glnn() -> Self {
        DistillConfig {
            gamma: 0.0,
            pe: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("θ = {} outside [0, 1]", self.theta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("γ = {} must be finite and >= 0", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("τ = {} must be > 0", self.tau)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        Ok(())
    }
}

/// A trained student: the MLP plus everything its input pipeline needs.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub mlp: ModelParams,
    pub fusion: Option<PeFusion>,
    /// Kernel with trained parameters (sigmoid, reverse), if any.
    pub kernel: Option<KernelSpec>,
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub loss: f64,
    pub val_acc: f64,
    pub reconstruction: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct DistillRun {
    pub student: StudentModel,
    pub best_val_acc: f64,
    pub epochs: usize,
    pub history: Vec<EpochStats>,
    /// Nodes whose features, encodings, labels or teacher outputs were read.
    pub touched: Vec<bool>,
}

impl DistillRun {
    /// Fails if any test node of an inductive split was read.
    pub fn audit(&self, split: &SplitSpec) -> Result<()> {
        if split.mode != Setting::Inductive {
            return Ok(());
        }
        match split.test.iter().find(|&&t| self.touched[t]) {
            Some(t) => Err(Error::Contract(format!("unobserved node {t} was read during distillation"))),
            None => Ok(()),
        }
    }
}

/// Node data as seen by the student, with read tracking.
struct StudentView<'a> {
    graph: &'a Graph,
    sparse: Option<Arc<CsrMatrix>>,
    pe: Option<&'a Tensor>,
    touched: Vec<bool>,
}

impl<'a> StudentView<'a> {
    fn new(graph: &'a Graph, pe: Option<&'a Tensor>) -> Self {
        let sparse = (graph.feature_density() <= 0.25).then(|| graph.sparse_features());
        StudentView {
            graph,
            sparse,
            pe,
            touched: vec![false; graph.num_nodes()],
        }
    }

    fn mark(&mut self, ids: &[usize]) {
        for &i in ids {
            self.touched[i] = true;
        }
    }

    fn labels(&mut self, ids: &[usize]) -> Result<Vec<usize>> {
        self.mark(ids);
        labels_of(self.graph, ids)
    }

    /// First-layer input for `ids`.
    fn input(
        &mut self,
        tape: &mut Tape,
        ids: &[usize],
        fusion: Option<(&PeFusion, FusionVars)>,
    ) -> Result<Input> {
        self.mark(ids);
        let dense = |tape: &mut Tape| tape.constant(self.graph.features().gather_rows(ids));
        let Some((fusion, vars)) = fusion else {
            return Ok(match &self.sparse {
                Some(s) => Input::Sparse(Arc::new(s.select_rows(ids))),
                None => Input::Dense(dense(tape)),
            });
        };
        let pe = self
            .pe
            .ok_or_else(|| Error::Contract("PE fusion configured without encodings".into()))?;
        let p = tape.constant(pe.gather_rows(ids));
        let pos = embed_pe(tape, p, vars)?;
        match fusion.mode {
            FusionMode::Concat => {
                let base = match &self.sparse {
                    Some(s) => Input::Sparse(Arc::new(s.select_rows(ids))),
                    None => Input::Dense(dense(tape)),
                };
                Ok(Input::Concat(Box::new(base), pos))
            }
            FusionMode::Mul => {
                let x = dense(tape);
                Ok(Input::Dense(tape.mul(x, pos)?))
            }
        }
    }
}

/// Splits labeled and soft ids into shuffled minibatches of at most
/// `batch_size` nodes, spreading labeled nodes evenly over batches.
fn make_batches(labeled: &[usize], soft: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<usize>, Vec<usize>)> {
    let total = labeled.len() + soft.len();
    let count = total.div_ceil(batch_size).max(1);
    let mut l = labeled.to_vec();
    let mut s = soft.to_vec();
    l.shuffle(rng);
    s.shuffle(rng);
    (0..count)
        .map(|b| {
            let cut = |v: &[usize]| v[b * v.len() / count..(b + 1) * v.len() / count].to_vec();
            (cut(&l), cut(&s))
        })
        .collect()
}

/// Stage II: trains the student MLP. With a teacher the loss is the
/// kernel-matched distillation objective over labeled and soft-target
/// nodes; without one it is plain cross-entropy on labeled nodes.
///
/// `pe` rows are indexed by full-graph id and are required iff
/// `config.pe` is set.
pub fn stage2_distill(
    graph: &Graph,
    split: &SplitSpec,
    teacher: Option<&TeacherOutputs>,
    pe: Option<&Tensor>,
    config: &DistillConfig,
    seed: u64,
) -> Result<DistillRun> {
    config.validate()?;
    split.check_disjoint()?;
    if config.pe.is_some() != pe.is_some() {
        return Err(Error::Config("encodings must be given exactly when PE fusion is enabled".into()));
    }
    let mut init_rng = stream(seed, STREAM_INIT);
    let mut view = StudentView::new(graph, pe);
    let feature_dim = graph.feature_dim();

    let hidden_dim = teacher.map_or(64, |t| t.hidden.first().map_or(64, |h| h.cols()));
    let num_layers = teacher.map_or(2, |t| t.hidden.len() + 1);
    let mut fusion = match (config.pe, pe) {
        (Some(mode), Some(p)) => {
            if p.rows() != graph.num_nodes() {
                return Err(Error::shape("positional encodings", p.shape(), (graph.num_nodes(), 0)));
            }
            Some(PeFusion::init(mode, p.cols(), feature_dim, &mut init_rng))
        }
        _ => None,
    };
    let input_dim = fusion.as_ref().map_or(feature_dim, |f| f.output_dim());
    let mut mlp = ModelParams::init(
        ModelConfig {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            output_dim: graph.num_classes(),
            num_layers,
            dropout: config.dropout,
            norm: config.norm,
        },
        &mut init_rng,
    )?;

    let distilling = teacher.is_some();
    let matching = distilling && config.gamma > 0.0;
    let match_layers: Vec<usize> = match &config.match_layers {
        Some(layers) => layers.clone(),
        None => (0..num_layers - 1).collect(),
    };
    if matching {
        if let Some(&bad) = match_layers.iter().find(|&&l| l + 1 >= num_layers) {
            return Err(Error::Config(format!("layer {bad} is not a shared hidden layer")));
        }
    }
    let mut kernel = if matching {
        Some(KernelSpec::default_for(
            config.kernel,
            hidden_dim,
            feature_dim,
            &mut stream(seed, STREAM_KERNEL),
        )?)
    } else {
        None
    };
    let reverse = matches!(kernel, Some(KernelSpec::Reverse { .. }));
    // reverse-kernel parameters move only in the reconstruction step
    let kernel_in_main_step = kernel.as_ref().is_some_and(|k| !reverse && !k.trainable().is_empty());

    let soft_ids = if distilling { split.soft_target_ids() } else { Vec::new() };
    let theta = if distilling { config.theta } else { 1.0 };
    let validation = split.validation.clone();
    let val_y = view.labels(&validation)?;

    let mut optimizer = Adam::new(config.lr, config.weight_decay);
    let mut kernel_optimizer = Adam::new(config.lr, 0.0);
    let mut batch_rng = stream(seed, STREAM_BATCHES);
    let mut dropout_rng = stream(seed, STREAM_DROPOUT);
    let mut stopper = Stopper::new(config.schedule.patience);
    let mut history = Vec::new();
    let mut epochs = 0;

    for epoch in 0..config.schedule.max_epochs {
        epochs = epoch + 1;
        let mut epoch_loss = 0.0;
        let mut epoch_rec = 0.0;
        let batches = make_batches(&split.train_labeled, &soft_ids, config.batch_size, &mut batch_rng);
        let batch_count = batches.len();
        for (labeled, soft) in batches {
            let ids: Vec<usize> = labeled.iter().chain(&soft).copied().collect();
            let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(dropout_rng.next_u64()));
            let mlp_vars = mlp.bind(&mut tape, true);
            let fusion_vars = fusion.as_ref().map(|f| FusionVars {
                embed: tape.leaf(f.embed.clone()),
                bias: tape.leaf(f.bias.clone()),
            });
            let kernel_vars = kernel.as_ref().map(|k| k.bind(&mut tape, kernel_in_main_step));
            let input = view.input(&mut tape, &ids, fusion.as_ref().zip(fusion_vars))?;
            let out = mlp_forward(&mut tape, &mlp, &mlp_vars, &input)?;

            let n_lab = labeled.len();
            let labeled_part = if n_lab > 0 {
                let y = view.labels(&labeled)?;
                Some((tape.slice_rows(out.logits, 0, n_lab)?, y))
            } else {
                None
            };
            let soft_part = match teacher {
                Some(t) if !soft.is_empty() => {
                    let logits = t.logits_of(&soft)?;
                    Some((tape.slice_rows(out.logits, n_lab, ids.len())?, logits))
                }
                _ => None,
            };
            let l_out = output_loss(
                &mut tape,
                labeled_part.as_ref().map(|(v, y)| (*v, &y[..])),
                soft_part.as_ref().map(|(v, t)| (*v, t)),
                theta,
                config.tau,
            )?;

            let mut distances = Vec::new();
            if let (true, Some(t), Some(k), Some(kv)) = (matching, teacher, kernel.as_ref(), kernel_vars.as_ref()) {
                // isolated nodes carry no neighborhood to match
                let rows: Vec<usize> = (0..ids.len()).filter(|&r| t.degrees[ids[r]] > 0).collect();
                let matched: Vec<usize> = rows.iter().map(|&r| ids[r]).collect();
                if matched.len() >= 2 {
                    for &l in &match_layers {
                        let hs = tape.gather_rows(out.hidden[l], &rows)?;
                        let ht = tape.constant(t.hidden_of(l, &matched)?);
                        let ms = mapping_matrix(&mut tape, k, kv, hs)?;
                        let mt = mapping_matrix(&mut tape, k, kv, ht)?;
                        distances.push(mapping_distance(&mut tape, ms, mt)?);
                    }
                }
            }
            let loss = total_loss(&mut tape, l_out, &distances, config.gamma)?;
            let loss_value = tape.value(loss).item();
            check_finite(epoch, loss_value)?;
            epoch_loss += loss_value;

            let grads = tape.backward(loss)?;
            let mut params: Vec<&mut Tensor> = mlp.tensors_mut();
            let mut vars = mlp_vars.vars.clone();
            if let (Some(f), Some(fv)) = (fusion.as_mut(), fusion_vars) {
                params.push(&mut f.embed);
                params.push(&mut f.bias);
                vars.extend([fv.embed, fv.bias]);
            }
            if kernel_in_main_step {
                if let (Some(k), Some(kv)) = (kernel.as_mut(), kernel_vars.as_ref()) {
                    params.extend(k.trainable_mut());
                    vars.extend(kv.vars.iter().copied());
                }
            }
            let g: Vec<Tensor> = vars
                .iter()
                .zip(params.iter())
                .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
                .collect();
            optimizer.step(&mut params, &g)?;
            mlp.apply_running_stats(&out.batch_stats);

            if reverse {
                let last = *out.hidden.last().expect("student has a hidden layer");
                let h_last = tape.value(last).clone();
                let k = kernel.as_mut().expect("reverse kernel present");
                let mut rtape = Tape::eval();
                let kv = k.bind(&mut rtape, true);
                let h = rtape.constant(h_last);
                let target = rtape.constant(graph.features().gather_rows(&ids));
                let rec = reconstruction_loss(&mut rtape, k, &kv, h, target)?;
                let rec_value = rtape.value(rec).item();
                check_finite(epoch, rec_value)?;
                epoch_rec += rec_value;
                let rgrads = rtape.backward(rec)?;
                let mut kparams = k.trainable_mut();
                let kg: Vec<Tensor> = kv
                    .vars
                    .iter()
                    .zip(kparams.iter())
                    .map(|(&v, p)| rgrads.get_or_zeros(v, p.shape()))
                    .collect();
                kernel_optimizer.step(&mut kparams, &kg)?;
            }
        }

        let student = StudentModel {
            mlp: mlp.clone(),
            fusion: fusion.clone(),
            kernel: None,
        };
        let (val_acc, val_loss) = {
            let mut tape = Tape::eval();
            let logits = student_logits(&mut tape, &student, &mut view, &validation)?;
            let rows: Vec<usize> = (0..validation.len()).collect();
            eval_logits(&logits, &rows, &val_y)
        };
        history.push(EpochStats {
            loss: epoch_loss / batch_count as f64,
            val_acc,
            reconstruction: reverse.then(|| epoch_rec / batch_count as f64),
        });
        if stopper.observe(val_acc, val_loss, || (mlp.clone(), fusion.clone(), kernel.clone())) {
            break;
        }
    }
    let (best_val_acc, _, (mlp, fusion, kernel)) = stopper.into_best();
    Ok(DistillRun {
        student: StudentModel { mlp, fusion, kernel },
        best_val_acc,
        epochs,
        history,
        touched: view.touched,
    })
}

fn student_logits(tape: &mut Tape, student: &StudentModel, view: &mut StudentView, ids: &[usize]) -> Result<Tensor> {
    let bound = student.mlp.bind(tape, false);
    let fusion_vars = student.fusion.as_ref().map(|f| FusionVars {
        embed: tape.constant(f.embed.clone()),
        bias: tape.constant(f.bias.clone()),
    });
    let input = view.input(tape, ids, student.fusion.as_ref().zip(fusion_vars))?;
    let out = mlp_forward(tape, &student.mlp, &bound, &input)?;
    Ok(tape.value(out.logits).clone())
}

/// Stage III output.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub classes: Vec<usize>,
    pub probabilities: Tensor,
}

/// Stage III: graph-free inference from node features (and encodings when
/// the student was trained with them). Rows of the output follow the rows
/// of `features`.
pub fn stage3_infer(student: &StudentModel, features: &Tensor, pe: Option<&Tensor>) -> Result<Predictions> {
    if features.cols() != student.fusion.as_ref().map_or(student.mlp.config.input_dim, |f| f.feature_dim()) {
        return Err(Error::shape(
            "stage3_infer",
            features.shape(),
            (student.mlp.config.input_dim, student.mlp.config.hidden_dim),
        ));
    }
    let x = match (&student.fusion, pe) {
        (None, _) => features.clone(),
        (Some(f), Some(p)) => crate::spectral::fuse_pe(features, p, f)?,
        (Some(_), None) => {
            return Err(Error::Contract("student was trained with encodings; none given".into()));
        }
    };
    let trace = predict(&student.mlp, &x, None)?;
    Ok(Predictions {
        classes: trace.logits.argmax_rows(),
        probabilities: trace.logits.softmax_rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_hand_values() {
        let p = Tensor::from_rows(&[&[1.0, 0.0]]);
        let q = Tensor::from_rows(&[&[0.5, 0.5]]);
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!(kl_divergence(&Tensor::from_rows(&[&[-0.1, 1.1]]), &q).is_err());
    }

    #[test]
    fn soft_target_loss_matches_plain_kl() {
        let teacher = Tensor::from_rows(&[&[0.3, -1.0, 2.0], &[0.0, 0.5, 0.1]]);
        let student = Tensor::from_rows(&[&[1.0, 0.2, -0.4], &[0.3, 0.3, 2.0]]);
        for tau in [0.5, 1.0, 4.0] {
            let mut tape = Tape::eval();
            let s = tape.constant(student.clone());
            let loss = soft_target_loss(&mut tape, s, &teacher, tau).unwrap();
            let want = tau * tau * kl_divergence(&soft_targets(&teacher, tau), &soft_targets(&student, tau)).unwrap();
            assert!((tape.value(loss).item() - want).abs() < 1e-13);
        }
    }

    #[test]
    fn theta_endpoints() {
        let logits = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let teacher = Tensor::from_rows(&[&[0.2, 0.1]]);
        let eval = |theta: f64| {
            let mut tape = Tape::eval();
            let z = tape.constant(logits.clone());
            let a = tape.slice_rows(z, 0, 1).unwrap();
            let b = tape.slice_rows(z, 1, 2).unwrap();
            let l = output_loss(&mut tape, Some((a, &[0])), Some((b, &teacher)), theta, 1.0).unwrap();
            tape.value(l).item()
        };
        let ce = -(1.0f64.exp() / (1.0f64.exp() + 1.0)).ln();
        let kl = kl_divergence(&soft_targets(&teacher, 1.0), &soft_targets(&logits.gather_rows(&[1]), 1.0)).unwrap();
        assert!((eval(1.0) - ce).abs() < 1e-15);
        assert!((eval(0.0) - kl).abs() < 1e-15);
        assert!((eval(0.5) - 0.5 * (ce + kl)).abs() < 1e-15);
    }

    #[test]
    fn total_loss_hand_value() {
        let mut tape = Tape::eval();
        let out = tape.constant(Tensor::scalar(1.0));
        let d1 = tape.constant(Tensor::scalar(0.2));
        let d2 = tape.constant(Tensor::scalar(0.4));
        let t = total_loss(&mut tape, out, &[d1, d2], 1.0).unwrap();
        assert!((tape.value(t).item() - 1.3).abs() < 1e-15);
        let z = total_loss(&mut tape, out, &[d1, d2], 0.0).unwrap();
        assert_eq!(z, out);
    }

    #[test]
    fn batches_cover_pool_once() {
        let labeled: Vec<usize> = (0..140).collect();
        let soft: Vec<usize> = (140..2000).collect();
        let mut rng = stream(0, 0);
        let batches = make_batches(&labeled, &soft, 512, &mut rng);
        assert_eq!(batches.len(), 4);
        let mut all: Vec<usize> = batches.iter().flat_map(|(l, s)| l.iter().chain(s)).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2000).collect::<Vec<_>>());
        assert!(batches.iter().all(|(l, s)| l.len() == 35 && l.len() + s.len() <= 512));
    }

    #[test]
    fn stopper_keeps_best_snapshot() {
        let mut s = Stopper::new(2);
        assert!(!s.observe(0.5, 1.0, || 1));
        assert!(!s.observe(0.6, 1.0, || 2));
        assert!(!s.observe(0.6, 0.9, || 3));
        assert!(!s.observe(0.4, 0.1, || 4));
        assert!(s.observe(0.6, 0.95, || 5));
        assert_eq!(s.into_best().2, 3);
    }
}

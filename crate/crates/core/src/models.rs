//! Teacher GNNs (GCN, mean-aggregator SAGE) and the student MLP.
//!
//! Every model is a stack of `num_layers` linear layers. Hidden layers are
//! followed by optional batch norm and ReLU; their outputs are the hidden
//! representations exposed for kernel matching. Dropout acts on the input
//! of every layer after the first.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Gcn,
    Sage,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Gcn => "gcn",
            ModelKind::Sage => "sage",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn is_graph_model(self) -> bool {
        !matches!(self, ModelKind::Mlp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(ModelKind::Gcn),
            "sage" => Ok(ModelKind::Sage),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::Config(format!("unknown model `{other}` (gcn | sage | mlp)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormKind {
    Batch,
    None,
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub norm: NormKind,
}

impl ModelConfig {
    /// Input and output width of layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let fan_in = if l == 0 { self.input_dim } else { self.hidden_dim };
        let fan_out = if l + 1 == self.num_layers {
            self.output_dim
        } else {
            self.hidden_dim
        };
        (fan_in, fan_out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || (self.num_layers > 1 && self.hidden_dim == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`; the self weight for SAGE.
    pub weight: Tensor,
    /// SAGE only: weight applied to the neighbor mean.
    pub neighbor_weight: Option<Tensor>,
    /// `1 × fan_out`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            scale: Tensor::ones(1, width),
            shift: Tensor::zeros(1, width),
            running_mean: Tensor::zeros(1, width),
            running_var: Tensor::ones(1, width),
        }
    }

    /// Moves running statistics towards a batch's mean and biased variance
    /// (the latter rescaled to the unbiased estimate).
    pub fn update_running(&mut self, stats: &BatchStats) {
        let rows = stats.rows as f64;
        let correction = if stats.rows > 1 { rows / (rows - 1.0) } else { 1.0 };
        let m = BATCH_NORM_MOMENTUM;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(stats.mean.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(stats.var.data()) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }
}

/// Per-layer batch statistics observed during a training forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    /// One per hidden layer when batch norm is enabled, else empty.
    pub norms: Vec<BatchNorm>,
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Tensor::from_fn(fan_in, fan_out, |_, _| dist.sample(rng))
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit batch-norm scale.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let (fan_in, fan_out) = config.layer_dims(l);
            let weight = glorot(fan_in, fan_out, rng);
            let neighbor_weight = (config.kind == ModelKind::Sage).then(|| glorot(fan_in, fan_out, rng));
            layers.push(Layer {
                weight,
                neighbor_weight,
                bias: Tensor::zeros(1, fan_out),
            });
        }
        let norms = match config.norm {
            NormKind::Batch => (0..config.num_layers - 1)
                .map(|_| BatchNorm::new(config.hidden_dim))
                .collect(),
            NormKind::None => Vec::new(),
        };
        Ok(ModelParams { config, layers, norms })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Trainable tensors in a fixed order: per layer weight, neighbor
    /// weight (SAGE), bias; then per norm scale and shift.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weight);
            if let Some(w) = &layer.neighbor_weight {
                out.push(w);
            }
            out.push(&layer.bias);
        }
        for norm in &self.norms {
            out.push(&norm.scale);
            out.push(&norm.shift);
        }
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            if let Some(w) = &mut layer.neighbor_weight {
                out.push(w);
            }
            out.push(&mut layer.bias);
        }
        for norm in &mut self.norms {
            out.push(&mut norm.scale);
            out.push(&mut norm.shift);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    pub fn apply_running_stats(&mut self, stats: &[BatchStats]) {
        for (norm, s) in self.norms.iter_mut().zip(stats) {
            norm.update_running(s);
        }
    }

    /// Order-sensitive checksum of every stored value, for detecting
    /// accidental mutation.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |t: &Tensor| {
            for x in t.data() {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        self.tensors().into_iter().for_each(&mut feed);
        for norm in &self.norms {
            feed(&norm.running_mean);
            feed(&norm.running_var);
        }
        h
    }
}

/// Tape handles for a model's parameters, in [`ModelParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

struct LayerVars {
    weight: Var,
    neighbor_weight: Option<Var>,
    bias: Var,
}

impl BoundParams {
    fn unpack(&self, params: &ModelParams) -> (Vec<LayerVars>, Vec<(Var, Var)>) {
        let mut it = self.vars.iter().copied();
        let mut layers = Vec::new();
        for layer in &params.layers {
            let weight = it.next().expect("bound");
            let neighbor_weight = layer.neighbor_weight.as_ref().map(|_| it.next().expect("bound"));
            let bias = it.next().expect("bound");
            layers.push(LayerVars {
                weight,
                neighbor_weight,
                bias,
            });
        }
        let norms = params
            .norms
            .iter()
            .map(|_| (it.next().expect("bound"), it.next().expect("bound")))
            .collect();
        (layers, norms)
    }
}

/// First-layer input of a model.
#[derive(Clone, Debug)]
pub enum Input {
    Dense(Var),
    Sparse(Arc<CsrMatrix>),
    /// Column concatenation `[features | extra]` without materializing it.
    Concat(Box<Input>, Var),
}

impl Input {
    pub fn rows(&self, tape: &Tape) -> usize {
        match self {
            Input::Dense(v) => tape.shape(*v).0,
            Input::Sparse(s) => s.rows(),
            Input::Concat(a, _) => a.rows(tape),
        }
    }

    pub fn cols(&self, tape: &Tape) -> usize {
        match self {
            Input::Dense(v) => tape.shape(*v).1,
            Input::Sparse(s) => s.cols(),
            Input::Concat(a, b) => a.cols(tape) + tape.shape(*b).1,
        }
    }

    /// Chooses a sparse representation when at most a quarter of the
    /// entries are nonzero.
    pub fn from_features(tape: &mut Tape, features: &Tensor, sparse: Option<&Arc<CsrMatrix>>) -> Input {
        match sparse {
            Some(s) if s.nnz() * 4 <= features.len() => Input::Sparse(Arc::clone(s)),
            _ => Input::Dense(tape.constant(features.clone())),
        }
    }

    /// `input · weight`.
    pub fn project(&self, tape: &mut Tape, weight: Var) -> Result<Var> {
        match self {
            Input::Dense(v) => tape.matmul(*v, weight),
            Input::Sparse(s) => tape.spmm(s, weight),
            Input::Concat(a, extra) => {
                let split = a.cols(tape);
                let total = tape.shape(weight).0;
                if total != split + tape.shape(*extra).1 {
                    return Err(Error::shape("project", (a.rows(tape), total), tape.shape(weight)));
                }
                let top = tape.slice_rows(weight, 0, split)?;
                let bottom = tape.slice_rows(weight, split, total)?;
                let left = a.project(tape, top)?;
                let right = tape.matmul(*extra, bottom)?;
                tape.add(left, right)
            }
        }
    }
}

/// Graph operator a teacher propagates with.
#[derive(Clone, Debug)]
pub enum Propagation {
    /// Symmetric normalized adjacency with self-loops.
    Gcn(Arc<CsrMatrix>),
    /// Neighbor-mean aggregator.
    Sage(Arc<CsrMatrix>),
}

/// Result of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// Post-activation output of each hidden layer.
    pub hidden: Vec<Var>,
    /// Batch statistics of each normalized layer (training mode only).
    pub batch_stats: Vec<BatchStats>,
}

/// Plain-tensor forward outputs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub hidden: Vec<Tensor>,
}

impl ForwardVars {
    pub fn trace(&self, tape: &Tape) -> ForwardTrace {
        ForwardTrace {
            logits: tape.value(self.logits).clone(),
            hidden: self.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
        }
    }
}

/// Forward pass of a GCN or SAGE teacher over all nodes of the operator.
pub fn gnn_forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    input: &Input,
    propagation: &Propagation,
) -> Result<ForwardVars> {
    match (params.kind(), propagation) {
        (ModelKind::Gcn, Propagation::Gcn(_)) | (ModelKind::Sage, Propagation::Sage(_)) => {}
        (kind, _) => {
            return Err(Error::Contract(format!("{kind} model given a mismatched graph operator")));
        }
    }
    forward_layers(tape, params, bound, input, Some(propagation))
}

/// Forward pass of the student MLP. Reads node features only.
pub fn mlp_forward(tape: &mut Tape, params: &ModelParams, bound: &BoundParams, input: &Input) -> Result<ForwardVars> {
    if params.kind() != ModelKind::Mlp {
        return Err(Error::Contract(format!("{} model needs a graph operator", params.kind())));
    }
    forward_layers(tape, params, bound, input, None)
}

fn forward_layers(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    input: &Input,
    propagation: Option<&Propagation>,
) -> Result<ForwardVars> {
    let config = &params.config;
    if input.cols(tape) != config.input_dim {
        return Err(Error::shape(
            "model input",
            (input.rows(tape), input.cols(tape)),
            (config.input_dim, config.hidden_dim),
        ));
    }
    let (layer_vars, norm_vars) = bound.unpack(params);
    let mut hidden = Vec::new();
    let mut batch_stats = Vec::new();
    let mut current = input.clone();
    for (l, lv) in layer_vars.iter().enumerate() {
        if l > 0 {
            if let Input::Dense(h) = current {
                current = Input::Dense(tape.dropout(h, config.dropout)?);
            }
        }
        let mut z = match propagation {
            None => current.project(tape, lv.weight)?,
            Some(Propagation::Gcn(a)) => {
                let xw = current.project(tape, lv.weight)?;
                tape.spmm(a, xw)?
            }
            Some(Propagation::Sage(m)) => {
                let own = current.project(tape, lv.weight)?;
                let nw = lv.neighbor_weight.ok_or_else(|| Error::Contract("SAGE layer without neighbor weight".into()))?;
                let theirs = current.project(tape, nw)?;
                let agg = tape.spmm(m, theirs)?;
                tape.add(own, agg)?
            }
        };
        z = tape.add(z, lv.bias)?;
        if l + 1 == layer_vars.len() {
            return Ok(ForwardVars {
                logits: z,
                hidden,
                batch_stats,
            });
        }
        if let Some(&(scale, shift)) = norm_vars.get(l) {
            let (normed, stats) = batch_norm(tape, z, scale, shift, &params.norms[l])?;
            z = normed;
            batch_stats.extend(stats);
        }
        let h = tape.relu(z);
        hidden.push(h);
        current = Input::Dense(h);
    }
    unreachable!("validated configs have at least one layer")
}

fn batch_norm(tape: &mut Tape, z: Var, scale: Var, shift: Var, norm: &BatchNorm) -> Result<(Var, Option<BatchStats>)> {
    let (normalized, stats) = if tape.is_training() {
        let rows = tape.shape(z).0;
        let mean = tape.mean_rows(z);
        let centered = tape.sub(z, mean)?;
        let sq = tape.square(centered);
        let var = tape.mean_rows(sq);
        let shifted = tape.add_scalar(var, BATCH_NORM_EPS);
        let inv_std = tape.powf(shifted, -0.5);
        let stats = BatchStats {
            mean: tape.value(mean).clone(),
            var: tape.value(var).clone(),
            rows,
        };
        (tape.mul(centered, inv_std)?, Some(stats))
    } else {
        let mean = tape.constant(norm.running_mean.clone());
        let inv = tape.constant(norm.running_var.map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()));
        let centered = tape.sub(z, mean)?;
        (tape.mul(centered, inv)?, None)
    };
    let scaled = tape.mul(normalized, scale)?;
    Ok((tape.add(scaled, shift)?, stats))
}

/// Eval-mode forward of any model on plain tensors.
pub fn predict(params: &ModelParams, input_features: &Tensor, propagation: Option<&Propagation>) -> Result<ForwardTrace> {
    let mut tape = Tape::eval();
    let bound = params.bind(&mut tape, false);
    let sparse = Arc::new(CsrMatrix::from_dense(input_features));
    let input = Input::from_features(&mut tape, input_features, Some(&sparse));
    let out = match propagation {
        Some(p) => gnn_forward(&mut tape, params, &bound, &input, p)?,
        None => mlp_forward(&mut tape, params, &bound, &input)?,
    };
    Ok(out.trace(&tape))
}

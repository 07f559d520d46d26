//! Laplacian positional encodings and their fusion with node features.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::eigen::{eigendecompose, Eigen};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Eigenvalues at or below this are treated as trivial (one per component).
pub const TRIVIAL_EIGENVALUE: f64 = 1e-10;

pub const DEFAULT_PE_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    /// `n × k`, column `j` is the eigenvector for `eigenvalues[j]`.
    pub vectors: Tensor,
    /// Ascending, all above [`TRIVIAL_EIGENVALUE`].
    pub eigenvalues: Vec<f64>,
    /// Whether column `j` was negated by the sign convention.
    pub flipped: Vec<bool>,
}

impl PositionalEncoding {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.vectors.rows()
    }
}

/// The `k` smallest non-trivial eigenvectors, signed so that the entry of
/// largest magnitude in each is positive (first such entry on ties).
pub fn select_pe(eigen: &Eigen, k: usize) -> Result<PositionalEncoding> {
    let chosen: Vec<usize> = (0..eigen.len())
        .filter(|&i| eigen.values[i] > TRIVIAL_EIGENVALUE)
        .take(k)
        .collect();
    if chosen.len() < k {
        return Err(Error::Selection(format!(
            "requested {k} encodings but only {} non-trivial eigenvalues exist",
            chosen.len()
        )));
    }
    let n = eigen.vectors.cols();
    let mut vectors = Tensor::zeros(n, k);
    let mut flipped = Vec::with_capacity(k);
    for (col, &i) in chosen.iter().enumerate() {
        let v = eigen.vector(i);
        let mut pivot = 0;
        for (r, x) in v.iter().enumerate() {
            if x.abs() > v[pivot].abs() {
                pivot = r;
            }
        }
        let flip = v[pivot] < 0.0;
        let sign = if flip { -1.0 } else { 1.0 };
        for (r, &x) in v.iter().enumerate() {
            vectors.set(r, col, sign * x);
        }
        flipped.push(flip);
    }
    Ok(PositionalEncoding {
        vectors,
        eigenvalues: chosen.iter().map(|&i| eigen.values[i]).collect(),
        flipped,
    })
}

/// Positional encoding of `graph`, computed from its normalized Laplacian.
/// Isolated nodes carry a self-loop so each forms its own trivial component.
pub fn laplacian_pe(graph: &Graph, k: usize) -> Result<PositionalEncoding> {
    let lap = graph.normalized_laplacian_with_self_loops();
    select_pe(&eigendecompose(&lap)?, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Concat,
    Mul,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Mul => "mul",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "mul" => Ok(FusionMode::Mul),
            other => Err(Error::Config(format!("unknown PE fusion `{other}` (concat | mul)"))),
        }
    }
}

/// Learned affine embedding of the encoding into feature space plus the
/// rule that combines it with the features.
#[derive(Clone, Debug, PartialEq)]
pub struct PeFusion {
    pub mode: FusionMode,
    /// `k × d`.
    pub embed: Tensor,
    /// `1 × d`.
    pub bias: Tensor,
}

impl PeFusion {
    /// Glorot-uniform embedding. The bias starts at 0 for concat and at 1
    /// for mul, so a freshly initialized mul fusion is close to identity.
    pub fn init(mode: FusionMode, k: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (k + feature_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let embed = Tensor::from_fn(k, feature_dim, |_, _| dist.sample(rng));
        let start = match mode {
            FusionMode::Concat => 0.0,
            FusionMode::Mul => 1.0,
        };
        PeFusion {
            mode,
            embed,
            bias: Tensor::full(1, feature_dim, start),
        }
    }

    pub fn k(&self) -> usize {
        self.embed.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.embed.cols()
    }

    /// Width of the fused features.
    pub fn output_dim(&self) -> usize {
        match self.mode {
            FusionMode::Concat => 2 * self.feature_dim(),
            FusionMode::Mul => self.feature_dim(),
        }
    }
}

/// Tape handles of a fusion's parameters.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub embed: Var,
    pub bias: Var,
}

/// `pe · embed + bias` on the tape.
pub fn embed_pe(tape: &mut Tape, pe: Var, vars: FusionVars) -> Result<Var> {
    let projected = tape.matmul(pe, vars.embed)?;
    tape.add(projected, vars.bias)
}

/// Fuses features with embedded encodings on the tape.
pub fn fuse_pe_var(tape: &mut Tape, features: Var, pe: Var, mode: FusionMode, vars: FusionVars) -> Result<Var> {
    let (fr, fc) = tape.shape(features);
    let (pr, _) = tape.shape(pe);
    let d = tape.shape(vars.embed).1;
    if fr != pr || fc != d {
        return Err(Error::shape("fuse_pe", (fr, fc), (pr, d)));
    }
    let pos = embed_pe(tape, pe, vars)?;
    match mode {
        FusionMode::Concat => tape.concat_cols(&[features, pos]),
        FusionMode::Mul => tape.mul(features, pos),
    }
}

/// Plain-tensor fusion, used at inference and as a reference.
pub fn fuse_pe(features: &Tensor, pe: &Tensor, fusion: &PeFusion) -> Result<Tensor> {
    if features.rows() != pe.rows() || features.cols() != fusion.feature_dim() || pe.cols() != fusion.k() {
        return Err(Error::shape("fuse_pe", features.shape(), pe.shape()));
    }
    let mut tape = Tape::eval();
    let f = tape.constant(features.clone());
    let p = tape.constant(pe.clone());
    let vars = FusionVars {
        embed: tape.constant(fusion.embed.clone()),
        bias: tape.constant(fusion.bias.clone()),
    };
    let out = fuse_pe_var(&mut tape, f, p, fusion.mode, vars)?;
    Ok(tape.value(out).clone())
}

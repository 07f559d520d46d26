//! Heat-kernel functions over hidden representations, the pairwise mapping
//! matrices built from them, and the trainable reverse kernel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GAUSSIAN_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_POLY_OFFSET: f64 = 1.0;
pub const DEFAULT_POLY_DEGREE: u32 = 2;
pub const DEFAULT_RANDOM_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Sigmoid,
    Randomized,
    Polynomial,
    Gaussian,
    Reverse,
}

impl KernelKind {
    /// The fixed-form kernels compared when selecting the best one.
    pub const STANDARD: [KernelKind; 4] = [
        KernelKind::Sigmoid,
        KernelKind::Randomized,
        KernelKind::Polynomial,
        KernelKind::Gaussian,
    ];

    pub const ALL: [KernelKind; 5] = [
        KernelKind::Sigmoid,
        KernelKind::Randomized,
        KernelKind::Polynomial,
        KernelKind::Gaussian,
        KernelKind::Reverse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Sigmoid => "sigmoid",
            KernelKind::Randomized => "randomized",
            KernelKind::Polynomial => "polynomial",
            KernelKind::Gaussian => "gaussian",
            KernelKind::Reverse => "reverse",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(KernelKind::Sigmoid),
            "randomized" | "random" => Ok(KernelKind::Randomized),
            "polynomial" | "poly" => Ok(KernelKind::Polynomial),
            "gaussian" => Ok(KernelKind::Gaussian),
            "reverse" => Ok(KernelKind::Reverse),
            other => Err(Error::Config(format!(
                "unknown kernel `{other}` (sigmoid | randomized | polynomial | gaussian | reverse)"
            ))),
        }
    }
}

/// Elementwise map applied inside the reverse kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// A kernel and its current parameter values.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    /// `σ(a⟨x, y⟩ + b)` with trainable `1 × 1` tensors `a`, `b`.
    Sigmoid { a: Tensor, b: Tensor },
    /// `(1/t) Σ_r e^{ξ_r} σ(M_r x)ᵀ σ(M_r y)` with fixed Gaussian draws.
    Randomized { xi: Vec<f64>, projections: Vec<Tensor> },
    /// `(⟨x, y⟩ + c)^d`.
    Polynomial { offset: f64, degree: u32 },
    /// `exp(-‖x − y‖² / (4T))`.
    Gaussian { temperature: f64 },
    /// `φ(W x)ᵀ φ(W y)` with trainable `W` (`h × h`) and a trainable
    /// linear decoder (`h × d`) used only by the reconstruction loss.
    Reverse {
        weight: Tensor,
        decoder: Tensor,
        activation: Activation,
    },
}

impl KernelSpec {
    pub fn gaussian(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("gaussian temperature must be > 0, got {temperature}")));
        }
        Ok(KernelSpec::Gaussian { temperature })
    }

    pub fn polynomial(offset: f64, degree: u32) -> Result<Self> {
        if degree == 0 || !offset.is_finite() {
            return Err(Error::Config(format!("invalid polynomial kernel (c = {offset}, d = {degree})")));
        }
        Ok(KernelSpec::Polynomial { offset, degree })
    }

    pub fn sigmoid(a: f64, b: f64) -> Self {
        KernelSpec::Sigmoid {
            a: Tensor::scalar(a),
            b: Tensor::scalar(b),
        }
    }

    /// `t` projections of size `h × h` and weights `ξ`, all standard normal.
    pub fn randomized(t: usize, hidden_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if t == 0 {
            return Err(Error::Config("randomized kernel needs t >= 1".into()));
        }
        let xi = (0..t).map(|_| StandardNormal.sample(rng)).collect();
        let projections = (0..t)
            .map(|_| Tensor::from_fn(hidden_dim, hidden_dim, |_, _| StandardNormal.sample(rng)))
            .collect();
        Ok(KernelSpec::Randomized { xi, projections })
    }

    /// Glorot-uniform kernel weight and decoder.
    pub fn reverse(hidden_dim: usize, input_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let uniform = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
        };
        KernelSpec::Reverse {
            weight: uniform(hidden_dim, hidden_dim, rng),
            decoder: uniform(hidden_dim, input_dim, rng),
            activation,
        }
    }

    /// Default-parameter kernel of the given kind.
    pub fn default_for(kind: KernelKind, hidden_dim: usize, input_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        match kind {
            KernelKind::Sigmoid => Ok(Self::sigmoid(1.0, 0.0)),
            KernelKind::Randomized => Self::randomized(DEFAULT_RANDOM_FEATURES, hidden_dim, rng),
            KernelKind::Polynomial => Self::polynomial(DEFAULT_POLY_OFFSET, DEFAULT_POLY_DEGREE),
            KernelKind::Gaussian => Self::gaussian(DEFAULT_GAUSSIAN_TEMPERATURE),
            KernelKind::Reverse => Ok(Self::reverse(hidden_dim, input_dim, Activation::Sigmoid, rng)),
        }
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            KernelSpec::Sigmoid { .. } => KernelKind::Sigmoid,
            KernelSpec::Randomized { .. } => KernelKind::Randomized,
            KernelSpec::Polynomial { .. } => KernelKind::Polynomial,
            KernelSpec::Gaussian { .. } => KernelKind::Gaussian,
            KernelSpec::Reverse { .. } => KernelKind::Reverse,
        }
    }

    /// Trainable tensors: `[a, b]` for sigmoid, `[weight, decoder]` for
    /// reverse, none otherwise.
    pub fn trainable(&self) -> Vec<&Tensor> {
        match self {
            KernelSpec::Sigmoid { a, b } => vec![a, b],
            KernelSpec::Reverse { weight, decoder, .. } => vec![weight, decoder],
            _ => Vec::new(),
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            KernelSpec::Sigmoid { a, b } => vec![a, b],
            KernelSpec::Reverse { weight, decoder, .. } => vec![weight, decoder],
            _ => Vec::new(),
        }
    }

    /// Kernel value for one pair of vectors.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::shape("kernel_eval", (1, x.len()), (1, y.len())));
        }
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        Ok(match self {
            KernelSpec::Sigmoid { a, b } => sigmoid(a.item() * dot(x, y) + b.item()),
            KernelSpec::Randomized { xi, projections } => {
                let t = projections.len() as f64;
                let mut total = 0.0;
                for (w, m) in xi.iter().zip(projections) {
                    let fx = project(m, x, sigmoid)?;
                    let fy = project(m, y, sigmoid)?;
                    total += w.exp() * dot(&fx, &fy);
                }
                total / t
            }
            KernelSpec::Polynomial { offset, degree } => (dot(x, y) + offset).powi(*degree as i32),
            KernelSpec::Gaussian { temperature } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (4.0 * temperature)).exp()
            }
            KernelSpec::Reverse { weight, activation, .. } => {
                let act = activation_fn(*activation);
                dot(&project(weight, x, act)?, &project(weight, y, act)?)
            }
        })
    }

    /// Records the trainable tensors on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> KernelVars {
        let vars = self
            .trainable()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        KernelVars { vars }
    }
}

fn activation_fn(a: Activation) -> fn(f64) -> f64 {
    match a {
        Activation::Sigmoid => sigmoid,
        Activation::Relu => |x: f64| x.max(0.0),
    }
}

/// `act(M v)`.
fn project(m: &Tensor, v: &[f64], act: fn(f64) -> f64) -> Result<Vec<f64>> {
    if m.cols() != v.len() {
        return Err(Error::shape("kernel projection", m.shape(), (v.len(), 1)));
    }
    Ok((0..m.rows())
        .map(|r| act(m.row(r).iter().zip(v).map(|(a, b)| a * b).sum()))
        .collect())
}

/// Tape handles of a kernel's trainable tensors (see [`KernelSpec::trainable`]).
#[derive(Clone, Debug, Default)]
pub struct KernelVars {
    pub vars: Vec<Var>,
}

fn apply_activation(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Relu => tape.relu(x),
    }
}

/// `m × m` matrix of kernel values between all rows of `hidden`.
pub fn mapping_matrix(tape: &mut Tape, spec: &KernelSpec, vars: &KernelVars, hidden: Var) -> Result<Var> {
    let (m, h) = tape.shape(hidden);
    if m < 2 {
        return Err(Error::Contract(format!("mapping matrix needs at least 2 rows, got {m}")));
    }
    match spec {
        KernelSpec::Gaussian { temperature } => {
            let d2 = tape.pairwise_sq_dist(hidden);
            let scaled = tape.scale(d2, -1.0 / (4.0 * temperature));
            Ok(tape.exp(scaled))
        }
        KernelSpec::Polynomial { offset, degree } => {
            let gram = tape.matmul_nt(hidden, hidden)?;
            let shifted = tape.add_scalar(gram, *offset);
            Ok(match degree {
                1 => shifted,
                2 => tape.square(shifted),
                d => tape.powf(shifted, *d as f64),
            })
        }
        KernelSpec::Sigmoid { .. } => {
            let [a, b] = vars.vars[..] else {
                return Err(Error::Contract("sigmoid kernel needs bound (a, b)".into()));
            };
            let gram = tape.matmul_nt(hidden, hidden)?;
            let scaled = tape.mul(gram, a)?;
            let shifted = tape.add(scaled, b)?;
            Ok(tape.sigmoid(shifted))
        }
        KernelSpec::Randomized { xi, projections } => {
            let t = projections.len() as f64;
            let mut features = Vec::with_capacity(projections.len());
            for (w, proj) in xi.iter().zip(projections) {
                if proj.cols() != h {
                    return Err(Error::shape("randomized kernel", proj.shape(), (m, h)));
                }
                let p = tape.constant(proj.clone());
                let z = tape.matmul_nt(hidden, p)?;
                let s = tape.sigmoid(z);
                features.push(tape.scale(s, (w.exp() / t).sqrt()));
            }
            let phi = tape.concat_cols(&features)?;
            tape.matmul_nt(phi, phi)
        }
        KernelSpec::Reverse { activation, .. } => {
            let phi = reverse_features(tape, vars, hidden, *activation)?;
            tape.matmul_nt(phi, phi)
        }
    }
}

/// `φ(H Wᵀ)`, the per-node reverse-kernel features.
fn reverse_features(tape: &mut Tape, vars: &KernelVars, hidden: Var, act: Activation) -> Result<Var> {
    let weight = *vars
        .vars
        .first()
        .ok_or_else(|| Error::Contract("reverse kernel needs a bound weight".into()))?;
    let z = tape.matmul_nt(hidden, weight)?;
    Ok(apply_activation(tape, z, act))
}

/// `‖student − teacher‖²_F / m²`.
pub fn mapping_distance(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    let (m, _) = tape.shape(student);
    let diff = tape.sub(student, teacher)?;
    if tape.shape(diff) != tape.shape(teacher) {
        return Err(Error::shape("mapping_distance", tape.shape(student), tape.shape(teacher)));
    }
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (m * m) as f64))
}

/// `‖φ(H Wᵀ) · Dec − X‖² / (m·d)`.
pub fn reconstruction_loss(tape: &mut Tape, spec: &KernelSpec, vars: &KernelVars, hidden: Var, target: Var) -> Result<Var> {
    let KernelSpec::Reverse { activation, .. } = spec else {
        return Err(Error::Contract("reconstruction loss needs the reverse kernel".into()));
    };
    let [_, decoder] = vars.vars[..] else {
        return Err(Error::Contract("reverse kernel needs bound (weight, decoder)".into()));
    };
    let phi = reverse_features(tape, vars, hidden, *activation)?;
    let decoded = tape.matmul(phi, decoder)?;
    let diff = tape.sub(decoded, target)?;
    if tape.shape(diff) != tape.shape(target) {
        return Err(Error::shape("reconstruction_loss", tape.shape(decoded), tape.shape(target)));
    }
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// One kernel-weighted smoothing step `H'_i = Σ_j Mat_ij H_j / deg_i`.
/// Rows with zero degree are left unchanged.
pub fn nhk_propagate(mat: &Tensor, hidden: &Tensor, degrees: &[usize]) -> Result<Tensor> {
    if mat.rows() != mat.cols() || mat.cols() != hidden.rows() || degrees.len() != hidden.rows() {
        return Err(Error::shape("nhk_propagate", mat.shape(), hidden.shape()));
    }
    let mut out = mat.matmul(hidden)?;
    for (i, &d) in degrees.iter().enumerate() {
        if d == 0 {
            out.row_mut(i).copy_from_slice(hidden.row(i));
        } else {
            out.row_mut(i).iter_mut().for_each(|v| *v /= d as f64);
        }
    }
    Ok(out)
}

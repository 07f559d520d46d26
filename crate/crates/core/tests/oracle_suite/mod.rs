//! Test-side oracles shared by the `oracles` and `acceptance` targets.
//!
//! Every reference computation here is written independently of the
//! library: finite differences for gradients, O(m²) loops for kernel
//! matrices, a cyclic Jacobi solver for eigenvalues, and direct edge
//! filtering for induced subgraphs.

#![allow(dead_code)]

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kmp_core::autodiff::{Tape, Var};
use kmp_core::distill::{
    cross_entropy, kl_divergence, output_loss, soft_target_loss, stage1_pretrain, stage2_distill, total_loss,
    DistillConfig, Schedule, TeacherConfig,
};
use kmp_core::graph::{induced_subgraph, make_split, Graph, Setting, SplitParams};
use kmp_core::io::load_dataset;
use kmp_core::kernels::{mapping_distance, mapping_matrix, reconstruction_loss, Activation, KernelKind, KernelSpec};
use kmp_core::models::{gnn_forward, mlp_forward, Input, ModelConfig, ModelKind, ModelParams, NormKind, Propagation};
use kmp_core::spectral::pe::{fuse_pe_var, FusionVars};
use kmp_core::spectral::{eigendecompose, FusionMode};
use kmp_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;
pub const SUITE_BUDGET_SECS: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleKind {
    FiniteDifference,
    BruteForce,
    HandValue,
    EigenResidual,
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleKind::FiniteDifference => "finite-difference",
            OracleKind::BruteForce => "brute-force",
            OracleKind::HandValue => "hand-value",
            OracleKind::EigenResidual => "eigenresidual",
        })
    }
}

#[derive(Clone, Debug)]
pub struct OracleCase {
    pub description: String,
    pub seed: u64,
    pub tolerance: f64,
    pub kind: OracleKind,
}

/// A case with its measured discrepancy. Cases pass when
/// `measured <= tolerance`.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub case: OracleCase,
    pub measured: f64,
    pub error: Option<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.measured <= self.case.tolerance
    }
}

#[derive(Default)]
pub struct Report {
    pub outcomes: Vec<Outcome>,
}

impl Report {
    pub fn record(&mut self, description: impl Into<String>, seed: u64, tolerance: f64, kind: OracleKind, measured: Result<f64>) {
        let case = OracleCase {
            description: description.into(),
            seed,
            tolerance,
            kind,
        };
        let (measured, error) = match measured {
            Ok(m) if m.is_nan() => (f64::INFINITY, Some("measured NaN".to_string())),
            Ok(m) => (m, None),
            Err(e) => (f64::INFINITY, Some(e.to_string())),
        };
        self.outcomes.push(Outcome { case, measured, error });
    }

    /// Records a yes/no property as 0 (holds) or 1 (violated).
    pub fn check(&mut self, description: impl Into<String>, seed: u64, kind: OracleKind, holds: Result<bool>) {
        self.record(description, seed, 0.0, kind, holds.map(|h| if h { 0.0 } else { 1.0 }));
    }

    pub fn failures(&self) -> Vec<&Outcome> {
        self.outcomes.iter().filter(|o| !o.passed()).collect()
    }

    pub fn extend(&mut self, other: Report) {
        self.outcomes.extend(other.outcomes);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            let status = if o.passed() { "PASS" } else { "FAIL" };
            let note = o.error.as_deref().map(|e| format!("  ({e})")).unwrap_or_default();
            out.push_str(&format!(
                "{status}  {:<17}  seed {:<4}  tol {:<8.1e}  got {:<10.3e}  {}{note}\n",
                o.case.kind.to_string(),
                o.case.seed,
                o.case.tolerance,
                o.measured,
                o.case.description
            ));
        }
        out
    }
}

pub fn fixture_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_simplex(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn(rows, cols, |_, _| rng.random_range(0.01..1.0));
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        t.row_mut(r).iter_mut().for_each(|x| *x /= s);
    }
    t
}

/// Random graph on `n` nodes with edge probability `p`.
pub fn random_graph(n: usize, p: f64, d: usize, classes: usize, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let features = random_tensor(n, d, rng);
    let labels = (0..n).map(|i| Some(i % classes)).collect();
    Graph::build(&edges, features, labels, classes).expect("valid random graph")
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between the tape gradient and
/// central differences of the loss with respect to every entry of
/// `params`. `build` creates its own leaves from the given values and
/// returns the loss plus those leaves in the order of `params`.
pub fn gradient_check<F>(params: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)>,
{
    let mut tape = Tape::eval();
    let (loss, leaves) = build(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = leaves
        .iter()
        .zip(params)
        .flat_map(|(&v, p)| grads.get_or_zeros(v, p.shape()).into_data())
        .collect();

    let value = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::eval();
        let (loss, _) = build(&mut tape, values)?;
        Ok(tape.value(loss).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = params.to_vec();
    for k in 0..params.len() {
        for i in 0..params[k].len() {
            let orig = params[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = value(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = value(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b)).max(1e-12);
    norm(&diff) / scale
}

/// Same-shape training tape: dropout masks repeat exactly because the
/// stream is re-seeded for every evaluation.
fn training_tape() -> Tape {
    Tape::training(ChaCha8Rng::seed_from_u64(99))
}

fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

// ---------------------------------------------------------------------------
// Gradient suite

pub fn run_gradient_suite(seed: u64) -> Report {
    let mut report = Report::default();
    let fd = OracleKind::FiniteDifference;
    let mut r = rng(seed);

    // soft-target KL at several temperatures
    let teacher = random_tensor(6, 4, &mut r);
    let logits = random_tensor(6, 4, &mut r);
    for tau in [1.0, 2.5] {
        let measured = gradient_check(std::slice::from_ref(&logits), |tape, p| {
            let z = tape.leaf(p[0].clone());
            Ok((soft_target_loss(tape, z, &teacher, tau)?, vec![z]))
        });
        report.record(format!("soft-target KL loss, tau = {tau}"), seed, GRAD_TOLERANCE, fd, measured);
    }

    let labels = [0usize, 3, 1];
    let measured = gradient_check(std::slice::from_ref(&logits), |tape, p| {
        let z = tape.leaf(p[0].clone());
        let head = tape.slice_rows(z, 0, 3)?;
        Ok((cross_entropy(tape, head, &labels)?, vec![z]))
    });
    report.record("cross-entropy on labeled rows", seed, GRAD_TOLERANCE, fd, measured);

    let soft_teacher = teacher.gather_rows(&[3, 4, 5]);
    for theta in [0.0, 0.4, 1.0] {
        let measured = gradient_check(std::slice::from_ref(&logits), |tape, p| {
            let z = tape.leaf(p[0].clone());
            let a = tape.slice_rows(z, 0, 3)?;
            let b = tape.slice_rows(z, 3, 6)?;
            let loss = output_loss(tape, Some((a, &labels)), Some((b, &soft_teacher)), theta, 2.0)?;
            Ok((loss, vec![z]))
        });
        report.record(format!("output loss, theta = {theta}, tau = 2"), seed, GRAD_TOLERANCE, fd, measured);
    }

    // mapping distance per kernel, w.r.t. student hidden and trainable kernel params
    let student_h = random_tensor(6, 4, &mut r).map(|x| 0.8 * x);
    let teacher_h = random_tensor(6, 4, &mut r).map(|x| 0.8 * x);
    for kind in KernelKind::ALL {
        let spec = match kind {
            KernelKind::Sigmoid => KernelSpec::sigmoid(0.7, -0.2),
            other => KernelSpec::default_for(other, 4, 5, &mut rng(seed + 1)).expect("kernel"),
        };
        let mut params = vec![student_h.clone()];
        params.extend(spec.trainable().into_iter().cloned());
        let measured = gradient_check(&params, |tape, p| {
            let mut k = spec.clone();
            for (dst, src) in k.trainable_mut().into_iter().zip(&p[1..]) {
                *dst = src.clone();
            }
            let kv = k.bind(tape, true);
            let hs = tape.leaf(p[0].clone());
            let ht = tape.constant(teacher_h.clone());
            let ms = mapping_matrix(tape, &k, &kv, hs)?;
            let mt = mapping_matrix(tape, &k, &kv, ht)?;
            let d = mapping_distance(tape, ms, mt)?;
            let mut leaves = vec![hs];
            leaves.extend(kv.vars.iter().copied());
            Ok((d, leaves))
        });
        report.record(format!("mapping distance, {kind} kernel"), seed, GRAD_TOLERANCE, fd, measured);
    }

    // composite objective through a small MLP, several γ
    let x = random_tensor(6, 5, &mut r);
    let teacher_logits = random_tensor(4, 3, &mut r);
    let teacher_hidden = random_tensor(6, 4, &mut r).map(|v| v.abs());
    let template = ModelParams::init(
        ModelConfig {
            kind: ModelKind::Mlp,
            input_dim: 5,
            hidden_dim: 4,
            output_dim: 3,
            num_layers: 2,
            dropout: 0.0,
            norm: NormKind::None,
        },
        &mut r,
    )
    .expect("mlp");
    let mlp_values: Vec<Tensor> = template.tensors().into_iter().cloned().collect();
    for gamma in [0.0, 0.5, 3.0] {
        let measured = gradient_check(&mlp_values, |tape, p| {
            let mut model = template.clone();
            for (dst, src) in model.tensors_mut().into_iter().zip(p) {
                *dst = src.clone();
            }
            let bound = model.bind(tape, true);
            let input = Input::Dense(tape.constant(x.clone()));
            let out = mlp_forward(tape, &model, &bound, &input)?;
            let a = tape.slice_rows(out.logits, 0, 2)?;
            let b = tape.slice_rows(out.logits, 2, 6)?;
            let l_out = output_loss(tape, Some((a, &[1, 2])), Some((b, &teacher_logits)), 0.4, 1.0)?;
            let spec = KernelSpec::gaussian(1.0)?;
            let kv = spec.bind(tape, false);
            let ms = mapping_matrix(tape, &spec, &kv, out.hidden[0])?;
            let ht = tape.constant(teacher_hidden.clone());
            let mt = mapping_matrix(tape, &spec, &kv, ht)?;
            let d = mapping_distance(tape, ms, mt)?;
            Ok((total_loss(tape, l_out, &[d], gamma)?, bound.vars.clone()))
        });
        report.record(format!("total loss through MLP, gamma = {gamma}"), seed, GRAD_TOLERANCE, fd, measured);
    }

    // reverse-kernel reconstruction with both activations
    let target = random_tensor(6, 5, &mut r);
    for act in [Activation::Sigmoid, Activation::Relu] {
        let spec = KernelSpec::reverse(4, 5, act, &mut rng(seed + 2));
        let mut params = vec![student_h.clone()];
        params.extend(spec.trainable().into_iter().cloned());
        let measured = gradient_check(&params, |tape, p| {
            let mut k = spec.clone();
            for (dst, src) in k.trainable_mut().into_iter().zip(&p[1..]) {
                *dst = src.clone();
            }
            let kv = k.bind(tape, true);
            let h = tape.leaf(p[0].clone());
            let t = tape.constant(target.clone());
            let loss = reconstruction_loss(tape, &k, &kv, h, t)?;
            let mut leaves = vec![h];
            leaves.extend(kv.vars.iter().copied());
            Ok((loss, leaves))
        });
        report.record(format!("reconstruction loss, {act:?} activation"), seed, GRAD_TOLERANCE, fd, measured);
    }

    // encoding embedding K0 and b0 in both fusion modes
    let pe = random_tensor(6, 3, &mut r);
    let weights = random_tensor(6, 10, &mut r);
    for mode in [FusionMode::Concat, FusionMode::Mul] {
        let embed = random_tensor(3, 5, &mut r);
        let bias = random_tensor(1, 5, &mut r);
        let w = match mode {
            FusionMode::Concat => weights.clone(),
            FusionMode::Mul => Tensor::from_fn(6, 5, |i, j| weights.get(i, j)),
        };
        let measured = gradient_check(&[embed, bias], |tape, p| {
            let vars = FusionVars {
                embed: tape.leaf(p[0].clone()),
                bias: tape.leaf(p[1].clone()),
            };
            let f = tape.constant(x.clone());
            let pv = tape.constant(pe.clone());
            let fused = fuse_pe_var(tape, f, pv, mode, vars)?;
            Ok((weighted_sum(tape, fused, &w)?, vec![vars.embed, vars.bias]))
        });
        report.record(format!("encoding embedding, {} fusion", mode.as_str()), seed, GRAD_TOLERANCE, fd, measured);
    }

    // teacher forward passes with batch norm and dropout
    let g = random_graph(6, 0.5, 5, 3, &mut r);
    let labels_all: Vec<usize> = (0..6).map(|i| i % 3).collect();
    for kind in [ModelKind::Gcn, ModelKind::Sage] {
        for norm in [NormKind::None, NormKind::Batch] {
            let model = ModelParams::init(
                ModelConfig {
                    kind,
                    input_dim: 5,
                    hidden_dim: 4,
                    output_dim: 3,
                    num_layers: 2,
                    dropout: 0.3,
                    norm,
                },
                &mut r,
            )
            .expect("teacher");
            let prop = match kind {
                ModelKind::Gcn => Propagation::Gcn(std::sync::Arc::new(g.gcn_norm())),
                _ => Propagation::Sage(std::sync::Arc::new(g.mean_aggregator())),
            };
            let values: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
            let measured = gradient_check(&values, |tape, p| {
                *tape = training_tape();
                let mut m = model.clone();
                for (dst, src) in m.tensors_mut().into_iter().zip(p) {
                    *dst = src.clone();
                }
                let bound = m.bind(tape, true);
                let input = Input::Dense(tape.constant(g.features().clone()));
                let out = gnn_forward(tape, &m, &bound, &input, &prop)?;
                Ok((cross_entropy(tape, out.logits, &labels_all)?, bound.vars.clone()))
            });
            let norm_name = if norm == NormKind::Batch { "batch norm" } else { "no norm" };
            report.record(format!("{kind} forward, dropout 0.3, {norm_name}"), seed, GRAD_TOLERANCE, fd, measured);
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Test-side reference formulas

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|r| dot(m.row(r), v)).collect()
}

/// Kernel value from the closed-form definitions, one pair at a time.
pub fn reference_kernel(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    match spec {
        KernelSpec::Gaussian { temperature } => {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
            (-d2 / (4.0 * temperature)).exp()
        }
        KernelSpec::Polynomial { offset, degree } => (dot(x, y) + offset).powi(*degree as i32),
        KernelSpec::Sigmoid { a, b } => logistic(a.item() * dot(x, y) + b.item()),
        KernelSpec::Randomized { xi, projections } => {
            let mut total = 0.0;
            for (w, m) in xi.iter().zip(projections) {
                let fx: Vec<f64> = mat_vec(m, x).into_iter().map(logistic).collect();
                let fy: Vec<f64> = mat_vec(m, y).into_iter().map(logistic).collect();
                total += w.exp() * dot(&fx, &fy);
            }
            total / projections.len() as f64
        }
        KernelSpec::Reverse { weight, activation, .. } => {
            let act = |v: f64| match activation {
                Activation::Sigmoid => logistic(v),
                Activation::Relu => v.max(0.0),
            };
            let fx: Vec<f64> = mat_vec(weight, x).into_iter().map(act).collect();
            let fy: Vec<f64> = mat_vec(weight, y).into_iter().map(act).collect();
            dot(&fx, &fy)
        }
    }
}

/// `I − D^{-1/2} A D^{-1/2}` from the edge list, assuming no isolated node.
pub fn reference_laplacian(n: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut deg = vec![0.0; n];
    for &(u, v) in edges {
        deg[u] += 1.0;
        deg[v] += 1.0;
    }
    let mut l = Tensor::identity(n);
    for &(u, v) in edges {
        let w = -1.0 / (deg[u] as f64 * deg[v] as f64).sqrt();
        l.set(u, v, w);
        l.set(v, u, w);
    }
    l
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(a: &Tensor) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    values.sort_by(|a, b| a.total_cmp(b));
    values
}

// ---------------------------------------------------------------------------
// Equivalence suite

pub const TRIALS: u64 = 100;

pub fn run_equivalence_suite(seed: u64) -> Report {
    let mut report = Report::default();
    let bf = OracleKind::BruteForce;

    // mapping matrices against pairwise loops
    for kind in KernelKind::ALL {
        let measured = (|| -> Result<f64> {
            let mut worst: f64 = 0.0;
            for t in 0..TRIALS {
                let mut r = rng(seed * 1000 + t);
                let h = random_tensor(6, 4, &mut r);
                let spec = match kind {
                    KernelKind::Sigmoid => KernelSpec::sigmoid(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)),
                    KernelKind::Reverse => KernelSpec::reverse(4, 3, Activation::Relu, &mut r),
                    other => KernelSpec::default_for(other, 4, 3, &mut r)?,
                };
                let mut tape = Tape::eval();
                let kv = spec.bind(&mut tape, false);
                let hv = tape.constant(h.clone());
                let mat = mapping_matrix(&mut tape, &spec, &kv, hv)?;
                let mat = tape.value(mat);
                for i in 0..6 {
                    for j in 0..6 {
                        let want = reference_kernel(&spec, h.row(i), h.row(j));
                        worst = worst.max((mat.get(i, j) - want).abs() / want.abs().max(1.0));
                    }
                }
            }
            Ok(worst)
        })();
        report.record(format!("{kind} mapping matrix vs pairwise loop, {TRIALS} trials"), seed, 1e-12, bf, measured);
    }

    let diag = (|| -> Result<bool> {
        let mut r = rng(seed);
        let h = random_tensor(9, 5, &mut r).map(|x| 10.0 * x);
        let spec = KernelSpec::gaussian(0.3)?;
        let mut tape = Tape::eval();
        let kv = spec.bind(&mut tape, false);
        let hv = tape.constant(h);
        let m = mapping_matrix(&mut tape, &spec, &kv, hv)?;
        let m = tape.value(m);
        Ok((0..9).all(|i| m.get(i, i) == 1.0))
    })();
    report.check("gaussian mapping diagonal is exactly 1", seed, OracleKind::HandValue, diag);

    // induced subgraph against direct edge filtering
    let measured = (|| -> Result<bool> {
        for t in 0..TRIALS {
            let mut r = rng(seed * 7 + t);
            let g = random_graph(6, 0.5, 2, 2, &mut r);
            let observed: Vec<usize> = (0..6).filter(|_| r.random::<f64>() < 0.6).collect();
            if observed.is_empty() {
                continue;
            }
            let sub = induced_subgraph(&g, &observed)?;
            let mut want: Vec<(usize, usize)> = g
                .edges()
                .into_iter()
                .filter(|(u, v)| observed.contains(u) && observed.contains(v))
                .collect();
            want.sort_unstable();
            let mut got: Vec<(usize, usize)> = sub
                .graph
                .edges()
                .into_iter()
                .map(|(u, v)| {
                    let (a, b) = (sub.origin[u], sub.origin[v]);
                    (a.min(b), a.max(b))
                })
                .collect();
            got.sort_unstable();
            if got != want || sub.origin != observed {
                return Ok(false);
            }
            for (local, &orig) in sub.origin.iter().enumerate() {
                if sub.graph.features().row(local) != g.features().row(orig) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    })();
    report.check(format!("induced subgraph vs edge filter, {TRIALS} trials"), seed, bf, measured);

    // Laplacian eigenpairs on random connected 6-node graphs
    let mut residual: f64 = 0.0;
    let mut reconstruction: f64 = 0.0;
    let mut jacobi: f64 = 0.0;
    let mut laplacian: f64 = 0.0;
    let mut failure = None;
    let mut done = 0;
    let mut t = 0;
    while done < TRIALS && t < 20 * TRIALS {
        t += 1;
        let mut r = rng(seed * 13 + t);
        let g = random_graph(6, 0.5, 1, 1, &mut r);
        if !g.isolated_nodes().is_empty() {
            continue;
        }
        done += 1;
        let outcome = (|| -> Result<()> {
            let l = g.normalized_laplacian()?;
            laplacian = laplacian.max(l.max_abs_diff(&reference_laplacian(6, &g.edges())));
            let e = eigendecompose(&l)?;
            residual = residual.max(e.max_residual(&l));
            let mut rebuilt = Tensor::zeros(6, 6);
            for (k, &lambda) in e.values.iter().enumerate() {
                let v = e.vector(k);
                for i in 0..6 {
                    for j in 0..6 {
                        rebuilt.set(i, j, rebuilt.get(i, j) + lambda * v[i] * v[j]);
                    }
                }
            }
            reconstruction = reconstruction.max(rebuilt.max_abs_diff(&l));
            let want = jacobi_eigenvalues(&l);
            for (a, b) in e.values.iter().zip(&want) {
                jacobi = jacobi.max((a - b).abs());
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            failure = Some(e);
            break;
        }
    }
    let wrap = |v: f64| match &failure {
        Some(e) => Err(kmp_core::Error::Contract(e.to_string())),
        None => Ok(v),
    };
    report.record("normalized Laplacian vs edge-list formula", seed, 1e-15, bf, wrap(laplacian));
    report.record(
        format!("eigenresidual on {TRIALS} connected 6-node graphs (< 1e-8 n)"),
        seed,
        1e-8 * 6.0,
        OracleKind::EigenResidual,
        wrap(residual),
    );
    report.record("eigenpairs rebuild the Laplacian", seed, 1e-10, OracleKind::EigenResidual, wrap(reconstruction));
    report.record("eigenvalues vs cyclic Jacobi oracle", seed, 1e-10, bf, wrap(jacobi));

    let path = (|| -> Result<f64> {
        let g = Graph::build(&[(0, 1)], Tensor::zeros(2, 1), vec![Some(0), Some(0)], 1)?;
        let e = eigendecompose(&g.normalized_laplacian()?)?;
        Ok((e.values[0] - 0.0).abs().max((e.values[1] - 2.0).abs()))
    })();
    report.record("2-node path Laplacian eigenvalues are (0, 2)", seed, 1e-14, OracleKind::HandValue, path);

    let fixture = (|| -> Result<f64> {
        let bundle = load_dataset(&fixture_dir("karate12"))?;
        let l = bundle.graph.normalized_laplacian()?;
        Ok(eigendecompose(&l)?.max_residual(&l))
    })();
    report.record(
        "eigenresidual on the 12-node fixture (< 1e-8 n)",
        seed,
        1e-8 * 12.0,
        OracleKind::EigenResidual,
        fixture,
    );

    // KL divergence sign and equality
    let kl = (|| -> Result<bool> {
        let mut r = rng(seed);
        for _ in 0..TRIALS {
            let p = random_simplex(3, 5, &mut r);
            let q = random_simplex(3, 5, &mut r);
            if kl_divergence(&p, &p)?.abs() > 1e-12 {
                return Ok(false);
            }
            if kl_divergence(&p, &q)? <= 1e-12 {
                return Ok(false);
            }
        }
        Ok(true)
    })();
    report.check(format!("KL >= 0 with equality iff p = q, {TRIALS} trials"), seed, bf, kl);

    report.extend(glnn_reduction(seed));
    report.extend(degenerate_inputs(seed));
    report.extend(reverse_kernel_descent(seed));
    report
}

/// γ = 0 with PE off reduces to soft-target-only distillation, bit for bit.
fn glnn_reduction(seed: u64) -> Report {
    let mut report = Report::default();
    let fixed = (|| -> Result<bool> {
        let mut r = rng(seed);
        let logits = random_tensor(8, 3, &mut r);
        let teacher = random_tensor(5, 3, &mut r);
        let hidden = random_tensor(8, 4, &mut r);
        let teacher_hidden = random_tensor(8, 4, &mut r);
        let mut tape = Tape::eval();
        let z = tape.leaf(logits);
        let a = tape.slice_rows(z, 0, 3)?;
        let b = tape.slice_rows(z, 3, 8)?;
        let out = output_loss(&mut tape, Some((a, &[0, 1, 2])), Some((b, &teacher)), 0.4, 1.0)?;
        let spec = KernelSpec::gaussian(1.0)?;
        let kv = spec.bind(&mut tape, false);
        let hs = tape.constant(hidden);
        let ht = tape.constant(teacher_hidden);
        let ms = mapping_matrix(&mut tape, &spec, &kv, hs)?;
        let mt = mapping_matrix(&mut tape, &spec, &kv, ht)?;
        let d = mapping_distance(&mut tape, ms, mt)?;
        let reduced = total_loss(&mut tape, out, &[d], 0.0)?;
        let g_full = tape.backward(reduced)?;
        let g_out = tape.backward(out)?;
        Ok(tape.value(reduced).item().to_bits() == tape.value(out).item().to_bits()
            && g_full.get(z).map(|t| t.data().to_vec()) == g_out.get(z).map(|t| t.data().to_vec()))
    })();
    report.check("gamma = 0 total loss equals output loss bitwise on a fixed batch", seed, OracleKind::HandValue, fixed);

    let run = (|| -> Result<bool> {
        let bundle = load_dataset(&fixture_dir("karate12"))?;
        let split = small_split(&bundle.graph, seed)?;
        let teacher = small_teacher(&bundle.graph, &split, seed)?;
        let kmp = DistillConfig {
            gamma: 0.0,
            kernel: KernelKind::Polynomial,
            schedule: Schedule {
                max_epochs: 30,
                patience: 30,
            },
            ..DistillConfig::default()
        };
        let a = stage2_distill(&bundle.graph, &split, Some(&teacher.outputs), None, &kmp, seed)?;
        let glnn = DistillConfig {
            schedule: kmp.schedule,
            ..DistillConfig::glnn()
        };
        let b = stage2_distill(&bundle.graph, &split, Some(&teacher.outputs), None, &glnn, seed)?;
        Ok(a.student.mlp == b.student.mlp && a.best_val_acc.to_bits() == b.best_val_acc.to_bits())
    })();
    report.check("gamma = 0 distillation run equals the soft-target-only run bitwise", seed, OracleKind::BruteForce, run);
    report
}

pub fn small_split(graph: &Graph, seed: u64) -> Result<kmp_core::graph::SplitSpec> {
    make_split(
        graph,
        Setting::Transductive,
        SplitParams {
            labeled_per_class: 2,
            validation_count: 2,
            holdout_fraction: 0.2,
        },
        seed,
    )
}

pub fn small_teacher(graph: &Graph, split: &kmp_core::graph::SplitSpec, seed: u64) -> Result<kmp_core::distill::TeacherRun> {
    let mut config = TeacherConfig::defaults(ModelKind::Gcn)?;
    config.hidden_dim = 8;
    config.schedule = Schedule {
        max_epochs: 60,
        patience: 60,
    };
    stage1_pretrain(graph, split, &config, seed)
}

fn degenerate_inputs(seed: u64) -> Report {
    let mut report = Report::default();
    let single = (|| -> Result<bool> {
        let mut r = rng(seed);
        let mut g = random_graph(10, 0.4, 3, 1, &mut r);
        if !g.isolated_nodes().is_empty() {
            let mut edges = g.edges();
            edges.extend((0..9).map(|i| (i, i + 1)));
            g = Graph::build(&edges, g.features().clone(), g.labels().to_vec(), 1)?;
        }
        let split = small_split(&g, seed)?;
        let teacher = small_teacher(&g, &split, seed)?;
        let config = DistillConfig {
            schedule: Schedule {
                max_epochs: 10,
                patience: 10,
            },
            ..DistillConfig::default()
        };
        let run = stage2_distill(&g, &split, Some(&teacher.outputs), None, &config, seed)?;
        Ok(teacher.outputs.logits.is_finite() && run.history.iter().all(|h| h.loss.is_finite()))
    })();
    report.check("single-class dataset trains without NaN", seed, OracleKind::HandValue, single);
    report
}

/// Reverse-kernel reconstruction loss over 100 alternating steps on the
/// 12-node fixture (one minibatch per epoch). Measured value is the ratio
/// of the mean loss over the last ten steps to the first ten.
pub fn reverse_kernel_descent(seed: u64) -> Report {
    let mut report = Report::default();
    let ratio = (|| -> Result<f64> {
        let bundle = load_dataset(&fixture_dir("karate12"))?;
        let split = small_split(&bundle.graph, seed)?;
        let teacher = small_teacher(&bundle.graph, &split, seed)?;
        let config = DistillConfig {
            kernel: KernelKind::Reverse,
            schedule: Schedule {
                max_epochs: 100,
                patience: 100,
            },
            ..DistillConfig::default()
        };
        let run = stage2_distill(&bundle.graph, &split, Some(&teacher.outputs), None, &config, seed)?;
        let rec: Vec<f64> = run.history.iter().filter_map(|h| h.reconstruction).collect();
        if rec.len() != 100 {
            return Err(kmp_core::Error::Contract(format!("expected 100 steps, got {}", rec.len())));
        }
        let head: f64 = rec[..10].iter().sum();
        let tail: f64 = rec[90..].iter().sum();
        Ok(tail / head)
    })();
    report.record(
        "reverse-kernel reconstruction loss decreases over 100 steps (tail/head mean ratio)",
        seed,
        0.999,
        OracleKind::BruteForce,
        ratio,
    );
    report
}

/// Both suites plus determinism and the runtime budget.
pub fn run_all(seed: u64) -> Report {
    let start = Instant::now();
    let mut report = run_gradient_suite(seed);
    let again = run_gradient_suite(seed);
    let same = report
        .outcomes
        .iter()
        .zip(&again.outcomes)
        .all(|(a, b)| a.measured.to_bits() == b.measured.to_bits());
    report.check("gradient suite is deterministic per seed", seed, OracleKind::HandValue, Ok(same));
    report.extend(run_equivalence_suite(seed));
    let elapsed = start.elapsed().as_secs_f64();
    report.record(
        format!("suite runtime in seconds (budget {SUITE_BUDGET_SECS})"),
        seed,
        SUITE_BUDGET_SECS,
        OracleKind::HandValue,
        Ok(elapsed),
    );
    report
}

//! Dense symmetric eigensolver: Householder tridiagonalization followed by
//! the implicit QL algorithm with Wilkinson-style shifts.
//!
//! The working matrix is kept with eigenvectors as *rows* so that every
//! inner loop (reflector updates and Givens rotations) walks contiguous
//! memory.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum allowed `|a_ij - a_ji|` for input accepted as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// QL sweeps allowed per eigenvalue before giving up.
const MAX_SWEEPS: usize = 64;

#[derive(Clone, Debug)]
pub struct Eigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Row `i` is the unit eigenvector paired with `values[i]`.
    pub vectors: Tensor,
}

impl Eigen {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// Largest `‖A v − λ v‖₂` over all pairs.
    pub fn max_residual(&self, a: &Tensor) -> f64 {
        let n = a.rows();
        let mut worst: f64 = 0.0;
        for (i, &lambda) in self.values.iter().enumerate() {
            let v = self.vector(i);
            let mut norm_sq = 0.0;
            for r in 0..n {
                let av: f64 = a.row(r).iter().zip(v).map(|(x, y)| x * y).sum();
                let diff = av - lambda * v[r];
                norm_sq += diff * diff;
            }
            worst = worst.max(norm_sq.sqrt());
        }
        worst
    }
}

/// Full eigendecomposition of a symmetric matrix.
pub fn eigendecompose(a: &Tensor) -> Result<Eigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("eigendecompose", a.shape(), (n, n)));
    }
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::Contract(format!(
            "eigendecompose needs a symmetric matrix (max asymmetry {asym:e})"
        )));
    }
    if n == 0 {
        return Ok(Eigen {
            values: Vec::new(),
            vectors: Tensor::zeros(0, 0),
        });
    }
    // symmetrize exactly so the reduction sees one triangle consistently
    let mut z = Tensor::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut z, &mut d, &mut e);
    ql_implicit(&mut z, &mut d, &mut e, a)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].total_cmp(&d[j]));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = z.gather_rows(&order);
    Ok(Eigen { values, vectors })
}

fn max_asymmetry(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    worst
}

/// Reduces the symmetric matrix in `z` to tridiagonal form. On return `d`
/// holds the diagonal, `e[1..]` the subdiagonal, and row `j` of `z` holds
/// column `j` of the accumulated orthogonal transform.
fn tridiagonalize(z: &mut Tensor, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    // `z` is symmetric on entry, so row and column views coincide.
    for j in 0..n {
        d[j] = z.get(j, n - 1);
    }
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = z.get(j, i - 1);
                z.set(j, i, 0.0);
                z.set(i, j, 0.0);
            }
        } else {
            for x in d[..i].iter_mut() {
                *x /= scale;
                h += *x * *x;
            }
            let f = d[i - 1];
            let g = if f > 0.0 { -h.sqrt() } else { h.sqrt() };
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].fill(0.0);

            for j in 0..i {
                let f = d[j];
                z.set(i, j, f);
                let zj = z.row(j);
                let mut g = e[j] + zj[j] * f;
                for k in (j + 1)..i {
                    g += zj[k] * d[k];
                    e[k] += zj[k] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                let zj = z.row_mut(j);
                for k in j..i {
                    zj[k] -= f * e[k] + g * d[k];
                }
                d[j] = zj[i - 1];
                zj[i] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n.saturating_sub(1) {
        let zii = z.get(i, i);
        z.set(i, n - 1, zii);
        z.set(i, i, 1.0);
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = z.get(i + 1, k) / h;
            }
            for j in 0..=i {
                let g: f64 = {
                    let (zi1, zj) = (z.row(i + 1), z.row(j));
                    zi1[..=i].iter().zip(&zj[..=i]).map(|(a, b)| a * b).sum()
                };
                let zj = z.row_mut(j);
                for k in 0..=i {
                    zj[k] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            z.set(i + 1, k, 0.0);
        }
    }
    for j in 0..n {
        d[j] = z.get(j, n - 1);
        z.set(j, n - 1, 0.0);
    }
    z.set(n - 1, n - 1, 1.0);
    e[0] = 0.0;
}

/// Diagonalizes the tridiagonal `(d, e)` in place, rotating the rows of `z`.
fn ql_implicit(z: &mut Tensor, d: &mut [f64], e: &mut [f64], original: &Tensor) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                if sweeps > MAX_SWEEPS {
                    let partial = Eigen {
                        values: d.to_vec(),
                        vectors: z.clone(),
                    };
                    return Err(Error::NoConvergence {
                        what: "QL iteration",
                        residual: partial.max_residual(original),
                    });
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for x in d[(l + 2)..].iter_mut() {
                    *x -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    rotate_rows(z, i, s, c);
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Applies the Givens rotation to rows `i` and `i + 1` of `z`.
fn rotate_rows(z: &mut Tensor, i: usize, s: f64, c: f64) {
    let cols = z.cols();
    let (head, tail) = z.data_mut().split_at_mut((i + 1) * cols);
    let ri = &mut head[i * cols..];
    let rn = &mut tail[..cols];
    for (a, b) in ri.iter_mut().zip(rn.iter_mut()) {
        let h = *b;
        *b = s * *a + c * h;
        *a = c * *a - s * h;
    }
}

use rand::Rng;
use rand_distr::StandardNormal;

use super::SemanticStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Above this input dimension the covariance is not diagonalized in full.
const JACOBI_MAX_DIM: usize = 256;
const SUBSPACE_MAX_ITERS: usize = 1000;
const SUBSPACE_TOL: f64 = 1e-12;

/// Mean and top principal directions of a semantic store.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `d_llm × d`, orthonormal columns in decreasing variance order.
    pub components: Tensor,
    /// Variance captured by each component.
    pub variances: Vec<f64>,
}

impl PcaBasis {
    pub fn d_llm(&self) -> usize {
        self.mean.len()
    }

    pub fn d(&self) -> usize {
        self.components.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcaSolver {
    /// Full cyclic Jacobi diagonalization of the covariance.
    Jacobi,
    /// Block power iteration with Rayleigh-Ritz on the centered data.
    Subspace,
}

/// Fits `d` principal directions, choosing the solver by input dimension.
pub fn fit_pca(store: &SemanticStore, d: usize) -> Result<PcaBasis> {
    let solver = if store.d_llm() <= JACOBI_MAX_DIM {
        PcaSolver::Jacobi
    } else {
        PcaSolver::Subspace
    };
    fit_pca_with(store, d, solver)
}

pub fn fit_pca_with(store: &SemanticStore, d: usize, solver: PcaSolver) -> Result<PcaBasis> {
    let (n, p) = (store.n_items(), store.d_llm());
    if d == 0 || d > n.min(p) {
        return Err(Error::shape("fit_pca", &[n, p], &[d]));
    }
    let x = store.vectors().data();
    let mut mean = vec![0.0; p];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(&x[r * p..(r + 1) * p]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = x.to_vec();
    for r in 0..n {
        for (c, m) in centered[r * p..(r + 1) * p].iter_mut().zip(&mean) {
            *c -= m;
        }
    }

    let (mut vectors, variances) = match solver {
        PcaSolver::Jacobi => {
            let cov = covariance(&centered, n, p);
            let (vals, vecs) = jacobi_eigen(cov, p);
            top_columns(&vals, &vecs, p, d)
        }
        PcaSolver::Subspace => subspace_iteration(&centered, n, p, d),
    };
    fix_signs(&mut vectors, p, d);
    Ok(PcaBasis {
        mean,
        components: Tensor::matrix(p, d, vectors),
        variances,
    })
}

/// `(vectors − mean) · components`.
pub fn pca_project(basis: &PcaBasis, store: &SemanticStore) -> Result<Tensor> {
    if basis.d_llm() != store.d_llm() {
        return Err(Error::shape(
            "pca_project",
            &[basis.d_llm()],
            &[store.n_items(), store.d_llm()],
        ));
    }
    let (n, p, d) = (store.n_items(), store.d_llm(), basis.d());
    let mut centered = store.vectors().clone();
    for r in 0..n {
        for (c, m) in centered.data_mut()[r * p..(r + 1) * p].iter_mut().zip(&basis.mean) {
            *c -= m;
        }
    }
    let out = centered.matmul(&basis.components)?;
    debug_assert_eq!(out.shape(), &[n, d]);
    Ok(out)
}

fn covariance(centered: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut cov = crate::autodiff::matmul_tn(centered, centered, n, p, p);
    cov.iter_mut().for_each(|v| *v /= n as f64);
    cov
}

/// Eigenvalues and column eigenvectors (`p × p`, row-major) of a symmetric
/// matrix by cyclic Jacobi rotations.
fn jacobi_eigen(mut a: Vec<f64>, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; p * p];
    for i in 0..p {
        v[i * p + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..p)
            .flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * p + j] * a[i * p + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total.max(1e-300) {
            break;
        }
        for k in 0..p {
            for l in k + 1..p {
                let akl = a[k * p + l];
                if akl.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[l * p + l] - a[k * p + k]) / (2.0 * akl);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..p {
                    let (aik, ail) = (a[i * p + k], a[i * p + l]);
                    a[i * p + k] = c * aik - s * ail;
                    a[i * p + l] = s * aik + c * ail;
                }
                for j in 0..p {
                    let (akj, alj) = (a[k * p + j], a[l * p + j]);
                    a[k * p + j] = c * akj - s * alj;
                    a[l * p + j] = s * akj + c * alj;
                }
                for i in 0..p {
                    let (vik, vil) = (v[i * p + k], v[i * p + l]);
                    v[i * p + k] = c * vik - s * vil;
                    v[i * p + l] = s * vik + c * vil;
                }
            }
        }
    }
    let vals = (0..p).map(|i| a[i * p + i]).collect();
    (vals, v)
}

/// Picks the `d` columns with the largest eigenvalues, returning a
/// row-major `rows × d` matrix and the eigenvalues.
fn top_columns(vals: &[f64], vecs: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let cols = vals.len();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; rows * d];
    for (j, &src) in order.iter().take(d).enumerate() {
        for i in 0..rows {
            out[i * d + j] = vecs[i * cols + src];
        }
    }
    let variances = order.iter().take(d).map(|&i| vals[i].max(0.0)).collect();
    (out, variances)
}

/// Top-`d` eigenvectors of `XᵀX / n` without forming the covariance.
fn subspace_iteration(x: &[f64], n: usize, p: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let b = (d + 8).min(p);
    let mut rng = seeded(0x05ee_d9ca);
    let mut v: Vec<f64> = (0..p * b).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    orthonormalize(&mut v, p, b);
    let apply = |v: &[f64]| {
        let xv = crate::autodiff::matmul_raw(x, v, n, p, b);
        let mut w = crate::autodiff::matmul_tn(x, &xv, n, p, b);
        w.iter_mut().for_each(|e| *e /= n as f64);
        w
    };
    let mut prev = vec![f64::INFINITY; d];
    let mut ritz_vals = vec![0.0; b];
    for _ in 0..SUBSPACE_MAX_ITERS {
        let mut w = apply(&v);
        orthonormalize(&mut w, p, b);
        // Rayleigh-Ritz on span(w)
        let cw = apply(&w);
        let h = crate::autodiff::matmul_tn(&w, &cw, p, b, b);
        let (vals, u) = jacobi_eigen(h, b);
        let (rotated, sorted_vals) = {
            let (u_sorted, vals_sorted) = top_columns(&vals, &u, b, b);
            (crate::autodiff::matmul_raw(&w, &u_sorted, p, b, b), vals_sorted)
        };
        v = rotated;
        ritz_vals = sorted_vals;
        let scale = ritz_vals[0].abs().max(1e-300);
        let delta = ritz_vals[..d]
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prev.copy_from_slice(&ritz_vals[..d]);
        if delta <= SUBSPACE_TOL * scale {
            break;
        }
    }
    let mut out = vec![0.0; p * d];
    for i in 0..p {
        out[i * d..(i + 1) * d].copy_from_slice(&v[i * b..i * b + d]);
    }
    (out, ritz_vals[..d].iter().map(|v| v.max(0.0)).collect())
}

/// Modified Gram-Schmidt on the columns of a row-major `rows × cols` matrix.
fn orthonormalize(m: &mut [f64], rows: usize, cols: usize) {
    for j in 0..cols {
        for k in 0..j {
            let dot: f64 = (0..rows).map(|i| m[i * cols + j] * m[i * cols + k]).sum();
            for i in 0..rows {
                m[i * cols + j] -= dot * m[i * cols + k];
            }
        }
        let norm: f64 = (0..rows).map(|i| m[i * cols + j].powi(2)).sum::<f64>().sqrt();
        if norm > 1e-300 {
            for i in 0..rows {
                m[i * cols + j] /= norm;
            }
        }
    }
}

/// Flips each column so its largest-magnitude entry is positive.
fn fix_signs(m: &mut [f64], rows: usize, cols: usize) {
    for j in 0..cols {
        let mut best = 0;
        for i in 1..rows {
            if m[i * cols + j].abs() > m[best * cols + j].abs() {
                best = i;
            }
        }
        if m[best * cols + j] < 0.0 {
            for i in 0..rows {
                m[i * cols + j] = -m[i * cols + j];
            }
        }
    }
}

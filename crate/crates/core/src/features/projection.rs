use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use super::provider::orthonormalize_rows;
use crate::error::{invalid, Error, Result};
use crate::nn::models::{params_from_bytes, params_to_bytes, sha256_hex};
use crate::nn::tensor::gemm;
use crate::rng::{rng_from, stream};

/// Linear map `x -> P (x - mean)` with orthonormal rows in `P` (`d x D`).
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub out_dim: usize,
    pub in_dim: usize,
    pub components: Vec<f64>,
    pub mean: Vec<f64>,
    /// Variance along each retained direction, decreasing. Empty for fixed maps.
    pub explained_variance: Vec<f64>,
}

impl Projection {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.components[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|i| self.row(i).iter().zip(x).zip(&self.mean).map(|((p, x), m)| p * (x - m)).sum())
            .collect()
    }

    /// Applies the map to every row of an `n x D` matrix.
    pub fn apply_rows(&self, rows: &[f64], n: usize) -> Vec<f64> {
        let centered: Vec<f64> = rows
            .chunks_exact(self.in_dim)
            .flat_map(|r| r.iter().zip(&self.mean).map(|(x, m)| x - m))
            .collect();
        let mut out = vec![0.0; n * self.out_dim];
        gemm(n, self.in_dim, self.out_dim, 1.0, &centered, false, &self.components, true, 0.0, &mut out);
        out
    }

    /// `mean + P^T y`.
    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (i, yi) in y.iter().enumerate() {
            x.iter_mut().zip(self.row(i)).for_each(|(x, p)| *x += yi * p);
        }
        x
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.out_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.in_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.explained_variance.len() as u64).to_le_bytes());
        out.extend(params_to_bytes(&self.components));
        out.extend(params_to_bytes(&self.mean));
        out.extend(params_to_bytes(&self.explained_variance));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::Format("projection file is truncated".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes")) as usize;
        let (out_dim, in_dim, nvar) = (word(0), word(1), word(2));
        let body = params_from_bytes(&bytes[24..])?;
        let expected = out_dim
            .checked_mul(in_dim)
            .and_then(|v| v.checked_add(in_dim + nvar))
            .ok_or_else(|| Error::Format("projection header overflows".into()))?;
        if body.len() != expected {
            return Err(Error::Format(format!(
                "projection file holds {} values, header implies {expected}",
                body.len()
            )));
        }
        let (components, rest) = body.split_at(out_dim * in_dim);
        let (mean, var) = rest.split_at(in_dim);
        Ok(Self {
            out_dim,
            in_dim,
            components: components.to_vec(),
            mean: mean.to_vec(),
            explained_variance: var.to_vec(),
        })
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Principal-component projection of an `n x D` row-major matrix to `d` dims.
///
/// Directions are sign-normalized so their largest-magnitude coordinate is
/// positive, which makes the result independent of eigen-solver sign choices.
pub fn fit_projection(raw: &[f64], n: usize, in_dim: usize, d: usize) -> Result<Projection> {
    if raw.len() != n * in_dim {
        return invalid(format!("raw feature matrix has {} values, expected {n}x{in_dim}", raw.len()));
    }
    if d == 0 {
        return invalid("projection dimension must be positive");
    }
    if d > in_dim {
        return Err(Error::ReducedRank {
            requested: d,
            achievable: in_dim,
        });
    }
    if n < 2 {
        return Err(Error::ReducedRank { requested: d, achievable: 0 });
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return invalid(format!("raw features contain non-finite value {v}"));
    }
    let mut mean = vec![0.0; in_dim];
    for row in raw.chunks_exact(in_dim) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = raw
        .chunks_exact(in_dim)
        .flat_map(|r| r.iter().zip(&mean).map(|(x, m)| x - m))
        .collect();
    let mut cov = vec![0.0; in_dim * in_dim];
    gemm(in_dim, n, in_dim, 1.0 / (n - 1) as f64, &centered, true, &centered, false, 0.0, &mut cov);
    // Exact symmetry for the eigensolver.
    for i in 0..in_dim {
        for j in 0..i {
            let v = 0.5 * (cov[i * in_dim + j] + cov[j * in_dim + i]);
            cov[i * in_dim + j] = v;
            cov[j * in_dim + i] = v;
        }
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(in_dim, in_dim, &cov));
    let mut order: Vec<usize> = (0..in_dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 * in_dim as f64;
    let achievable = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count().min(n - 1);
    if top <= 0.0 || achievable < d {
        return Err(Error::ReducedRank {
            requested: d,
            achievable: if top <= 0.0 { 0 } else { achievable },
        });
    }
    let mut components = Vec::with_capacity(d * in_dim);
    let mut explained_variance = Vec::with_capacity(d);
    for &i in &order[..d] {
        let col = eig.eigenvectors.column(i);
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let norm = col.norm();
        components.extend(col.iter().map(|v| sign * v / norm));
        explained_variance.push(eig.eigenvalues[i]);
    }
    Ok(Projection {
        out_dim: d,
        in_dim,
        components,
        mean,
        explained_variance,
    })
}

/// Fixed seeded map from text-encoder width to `d` dims, rows orthonormal.
pub fn text_projection(text_dim: usize, d: usize, seed: u64) -> Result<Projection> {
    if d == 0 || d > text_dim {
        return Err(Error::ReducedRank {
            requested: d,
            achievable: text_dim,
        });
    }
    let mut rng = rng_from(seed, &[stream::TEXT_PROJ]);
    let mut rows: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..text_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    orthonormalize_rows(&mut rows).ok_or_else(|| Error::State("text projection rows collapsed".into()))?;
    Ok(Projection {
        out_dim: d,
        in_dim: text_dim,
        components: rows.concat(),
        mean: vec![0.0; text_dim],
        explained_variance: Vec::new(),
    })
}

//! 2-D PCA projection of instruction features for cluster plots.
//!
//! Deterministic throughout: power iteration with a fixed start vector, a
//! fixed iteration budget, and a sign convention, so the same features
//! always land on the same plot coordinates.

use crate::error::{Error, Result};

const POWER_ITERATIONS: usize = 300;
const ZERO_VARIANCE_EPS: f64 = 1e-12;

/// Project labeled feature vectors onto their top two principal components.
///
/// The output order matches the input order. Directions with (numerically)
/// zero variance contribute zero coordinates, so a set of identical vectors
/// maps entirely to the origin.
pub fn project_features(features: &[(usize, Vec<f64>)]) -> Result<Vec<(usize, [f64; 2])>> {
    if features.len() < 2 {
        return Err(Error::Config(format!(
            "projection needs at least 2 feature vectors, got {}",
            features.len()
        )));
    }
    let dim = features[0].1.len();
    for (i, (_, v)) in features.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "feature {i} has dimension {}, expected {dim}",
                v.len()
            )));
        }
    }

    let n = features.len();
    let mut mean = vec![0.0; dim];
    for (_, v) in features {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|(_, v)| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    // Covariance (up to the 1/n factor, irrelevant for directions).
    let mut cov = vec![0.0; dim * dim];
    for row in &centered {
        for i in 0..dim {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for (c, x) in cov[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                *c += ri * x;
            }
        }
    }

    let mut components = Vec::with_capacity(2);
    for _ in 0..2 {
        let comp = dominant_eigenvector(&cov, dim);
        if let Some((vec_, lambda)) = comp {
            // Deflate: cov -= lambda * v v^T.
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] -= lambda * vec_[i] * vec_[j];
                }
            }
            components.push(vec_);
        } else {
            components.push(vec![0.0; dim]);
        }
    }

    Ok(features
        .iter()
        .zip(&centered)
        .map(|((label, _), row)| {
            let x = dot(row, &components[0]);
            let y = dot(row, &components[1]);
            (*label, [x, y])
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Power iteration from a deterministic start; returns the unit eigenvector
/// and its eigenvalue, or None when the matrix is numerically zero along
/// every probed direction.
fn dominant_eigenvector(cov: &[f64], dim: usize) -> Option<(Vec<f64>, f64)> {
    // Deterministic, not-axis-aligned start vector.
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + ((i % 7) as f64) * 0.1).collect();
    normalize(&mut v)?;
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let mut next = vec![0.0; dim];
        for i in 0..dim {
            next[i] = dot(&cov[i * dim..(i + 1) * dim], &v);
        }
        lambda = dot(&next, &v);
        if normalize(&mut next).is_none() {
            return None;
        }
        v = next;
    }
    if lambda.abs() < ZERO_VARIANCE_EPS {
        return None;
    }
    // Sign convention: the largest-magnitude coordinate is positive (first
    // such index on ties), so reruns and mirrored inputs agree.
    let pivot = v
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| {
            a.abs()
                .partial_cmp(&b.abs())
                .unwrap()
                .then(j.cmp(i))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    if v[pivot] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }
    Some((v, lambda))
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < ZERO_VARIANCE_EPS {
        return None;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Some(())
}

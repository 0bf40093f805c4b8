//! Least-squares Normal Transform.
//!
//! Regression targets are quantile-binned into pseudo-classes, a one-hot
//! indicator matrix is built, and the normal equations are solved for the
//! projection that maps (mean-centered) features onto the indicator rows.
//! Applying the projection to a feature vector yields a compact secondary
//! feature vector whose components act as soft superclass memberships.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A fitted least-squares projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LntTransform {
    /// Row-major `m x n` projection matrix.
    pub a_matrix: Vec<f64>,
    /// Output dimension (superclass count).
    pub out_dim: usize,
    /// Input dimension.
    pub in_dim: usize,
    /// Bias `E[T] - A E[X]`, kept for bookkeeping; projection output is
    /// computed in centered coordinates without it.
    pub b_bias: Vec<f64>,
    /// Per-feature training means used for centering.
    pub x_mean: Vec<f64>,
    /// `m + 1` ascending target cut points from the indicator construction.
    pub bin_edges: Vec<f64>,
}

/// One-hot superclass indicator from quantile-binned targets, returned as a
/// row-major `m x len` matrix.
///
/// Bin edges are target order statistics; samples tied with an edge fall in
/// the lower bin. Errors if the target carries too few distinct values to
/// cut `m` strictly increasing edges.
pub fn build_indicator(target: &[f64], m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let len = target.len();
    if m < 2 {
        return Err(Error::invalid("indicator needs at least 2 bins"));
    }
    if len < m {
        return Err(Error::InsufficientData(format!(
            "indicator with {m} bins needs at least {m} samples, got {len}"
        )));
    }
    let mut sorted = target.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = 1;
    for i in 1..len {
        if sorted[i] != sorted[i - 1] {
            distinct += 1;
        }
    }
    if distinct < m {
        return Err(Error::Degenerate(format!(
            "indicator with {m} bins over {distinct} distinct target values"
        )));
    }
    // inner edge k sits at the last rank belonging to bin k-1
    let mut edges = Vec::with_capacity(m + 1);
    edges.push(sorted[0]);
    for k in 1..m {
        let rank = (k * len).div_ceil(m) - 1;
        edges.push(sorted[rank]);
    }
    edges.push(sorted[len - 1]);
    for w in edges.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Degenerate(
                "indicator bin edges collapsed; target values too concentrated".into(),
            ));
        }
    }
    let mut indicator = vec![0.0; m * len];
    for (col, &v) in target.iter().enumerate() {
        let bin = edges[1..m].iter().filter(|&&e| v > e).count();
        indicator[bin * len + col] = 1.0;
    }
    Ok((indicator, edges))
}

/// Solves `A = T Xc^T (Xc Xc^T + ridge I)^(-1)` on mean-centered features.
///
/// `features` is row-major `n x len` (one feature dimension per row),
/// `indicator` row-major `m x len`.
pub fn fit_lnt(
    features: &[f64],
    in_dim: usize,
    indicator: &[f64],
    out_dim: usize,
    len: usize,
    ridge: f64,
    bin_edges: Vec<f64>,
) -> Result<LntTransform> {
    if features.len() != in_dim * len {
        return Err(Error::shape("lnt feature matrix", features.len(), in_dim * len));
    }
    if indicator.len() != out_dim * len {
        return Err(Error::shape("lnt indicator matrix", indicator.len(), out_dim * len));
    }
    if ridge < 0.0 {
        return Err(Error::invalid("lnt ridge must be >= 0"));
    }
    let x_mean: Vec<f64> = (0..in_dim)
        .map(|i| features[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let xc = DMatrix::from_fn(in_dim, len, |i, j| features[i * len + j] - x_mean[i]);
    let t = DMatrix::from_fn(out_dim, len, |i, j| indicator[i * len + j]);

    let mut gram = &xc * xc.transpose();
    for i in 0..in_dim {
        gram[(i, i)] += ridge;
    }
    // A^T = gram^(-1) (Xc T^T)
    let rhs = &xc * t.transpose();
    let a_t = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Degenerate("rank-deficient feature gram matrix; supply a positive ridge".into()))?,
    };

    let mut a_matrix = vec![0.0; out_dim * in_dim];
    for r in 0..out_dim {
        for c in 0..in_dim {
            a_matrix[r * in_dim + c] = a_t[(c, r)];
        }
    }
    // B = E[T] - A E[X]; with centered X the projection of the mean is zero,
    // so B reduces to the indicator row means.
    let b_bias: Vec<f64> = (0..out_dim)
        .map(|i| indicator[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    Ok(LntTransform {
        a_matrix,
        out_dim,
        in_dim,
        b_bias,
        x_mean,
        bin_edges,
    })
}

/// `d = A (x - x_mean)`.
pub fn apply_lnt(xform: &LntTransform, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != xform.in_dim {
        return Err(Error::shape("lnt input", x.len(), xform.in_dim));
    }
    let mut out = Vec::with_capacity(xform.out_dim);
    for r in 0..xform.out_dim {
        let row = &xform.a_matrix[r * xform.in_dim..(r + 1) * xform.in_dim];
        let mut acc = 0.0;
        for ((a, v), m) in row.iter().zip(x).zip(&xform.x_mean) {
            acc += a * (v - m);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Row-by-row application over a row-major `len x n` sample matrix; returns
/// a row-major `len x m` matrix.
pub fn apply_lnt_batch(xform: &LntTransform, samples: &[f64], len: usize) -> Result<Vec<f64>> {
    if samples.len() != len * xform.in_dim {
        return Err(Error::shape("lnt batch", samples.len(), len * xform.in_dim));
    }
    let mut out = Vec::with_capacity(len * xform.out_dim);
    for i in 0..len {
        out.extend(apply_lnt(xform, &samples[i * xform.in_dim..(i + 1) * xform.in_dim])?);
    }
    Ok(out)
}

/// Builds the indicator from the target, fits the transform on Level-1
/// features (row-major `len x n`), and returns the transform together with
/// the generated Level-2 features as a row-major `len x m` matrix.
pub fn make_level2(
    level1: &[f64],
    len: usize,
    in_dim: usize,
    target: &[f64],
    m: usize,
    ridge: f64,
) -> Result<(LntTransform, Vec<f64>)> {
    if level1.len() != len * in_dim {
        return Err(Error::shape("level1 matrix", level1.len(), len * in_dim));
    }
    if target.len() != len {
        return Err(Error::shape("level2 target", target.len(), len));
    }
    let (indicator, edges) = build_indicator(target, m)?;
    // transpose samples-major into feature-major for the solver
    let mut feat_major = vec![0.0; in_dim * len];
    for i in 0..len {
        for j in 0..in_dim {
            feat_major[j * len + i] = level1[i * in_dim + j];
        }
    }
    let xform = fit_lnt(&feat_major, in_dim, &indicator, m, len, ridge, edges)?;
    let level2 = apply_lnt_batch(&xform, level1, len)?;
    Ok((xform, level2))
}

/// Default ridge scaling: `1e-6 * trace(X X^T) / n` on centered features.
pub fn default_ridge(features_row_major: &[f64], len: usize, in_dim: usize) -> f64 {
    if len == 0 || in_dim == 0 {
        return 1e-6;
    }
    let mut trace = 0.0;
    for j in 0..in_dim {
        let mean = (0..len).map(|i| features_row_major[i * in_dim + j]).sum::<f64>() / len as f64;
        trace += (0..len)
            .map(|i| {
                let v = features_row_major[i * in_dim + j] - mean;
                v * v
            })
            .sum::<f64>();
    }
    1e-6 * trace / in_dim as f64
}

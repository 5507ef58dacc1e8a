//! Discrete forward differences, the isotropic TV norm, and the analytic
//! shrinkage operator for the TV splitting variable.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Per-pixel 2-vectors `(vertical, horizontal)` of difference components,
/// stored as `(2, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitField {
    data: Array3<f64>,
}

impl SplitField {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().0 != 2 {
            return Err(Error::validation("split field must have 2 components"));
        }
        Ok(SplitField { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        SplitField {
            data: Array3::zeros((2, h, w)),
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Euclidean norm of the 2-vector at one pixel.
    pub fn norm_at(&self, i: usize, j: usize) -> f64 {
        self.data[[0, i, j]].hypot(self.data[[1, i, j]])
    }
}

/// Forward differences `(v[i,j]-v[i-1,j], v[i,j]-v[i,j-1])` with replicate
/// boundaries: the first row's vertical component and the first column's
/// horizontal component are zero.
pub fn forward_grad(field: &Array2<f64>) -> Result<SplitField> {
    let (h, w) = field.dim();
    if h < 2 || w < 2 {
        return Err(Error::validation(format!(
            "forward differences need at least 2x2, got {h}x{w}"
        )));
    }
    Ok(SplitField {
        data: forward_grad_raw(field),
    })
}

pub(crate) fn forward_grad_raw(field: &Array2<f64>) -> Array3<f64> {
    let (h, w) = field.dim();
    let mut out = Array3::zeros((2, h, w));
    for i in 1..h {
        for j in 0..w {
            out[[0, i, j]] = field[[i, j]] - field[[i - 1, j]];
        }
    }
    for i in 0..h {
        for j in 1..w {
            out[[1, i, j]] = field[[i, j]] - field[[i, j - 1]];
        }
    }
    out
}

/// Adjoint of [`forward_grad_raw`]: maps a `(2, H, W)` cotangent back to an
/// `(H, W)` field (a negative divergence with matching boundary handling).
pub(crate) fn forward_grad_adjoint(p: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = p.dim();
    let mut out = Array2::zeros((h, w));
    for i in 1..h {
        for j in 0..w {
            let a = p[[0, i, j]];
            out[[i, j]] += a;
            out[[i - 1, j]] -= a;
        }
    }
    for i in 0..h {
        for j in 1..w {
            let b = p[[1, i, j]];
            out[[i, j]] += b;
            out[[i, j - 1]] -= b;
        }
    }
    out
}

/// Sum over pixels of the Euclidean norms of the 2-vectors.
pub fn tv_norm(g: &SplitField) -> f64 {
    let (_, h, w) = g.data.dim();
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            acc += g.norm_at(i, j);
        }
    }
    acc
}

/// Per-pixel minimizer of `nu*||w||_2 + (lambda/2)*||w - g||_2^2`:
/// `w = max(||g|| - nu/lambda, 0) * g / ||g||`, with the zero vector at
/// `||g|| = 0`.
pub fn shrinkage(g: &SplitField, nu: f64, lambda: f64) -> Result<SplitField> {
    if nu <= 0.0 || !nu.is_finite() {
        return Err(Error::validation("nu must be positive"));
    }
    if lambda <= 0.0 || !lambda.is_finite() {
        return Err(Error::validation("lambda must be positive"));
    }
    Ok(shrinkage_ratio(g, nu / lambda))
}

/// Shrinkage parameterized by the ratio `nu/lambda` the operator actually
/// depends on.
pub fn shrinkage_ratio(g: &SplitField, ratio: f64) -> SplitField {
    let (_, h, w) = g.data.dim();
    let mut out = Array3::zeros((2, h, w));
    for i in 0..h {
        for j in 0..w {
            let norm = g.norm_at(i, j);
            if norm > ratio {
                let scale = (norm - ratio) / norm;
                out[[0, i, j]] = scale * g.data[[0, i, j]];
                out[[1, i, j]] = scale * g.data[[1, i, j]];
            }
        }
    }
    SplitField { data: out }
}

/// Value of the splitting objective `nu*||w||_{1,2} + (lambda/2)*||w - g||^2`.
pub fn split_objective(w: &SplitField, g: &SplitField, nu: f64, lambda: f64) -> f64 {
    let mut acc = nu * tv_norm(w);
    for (a, b) in w.data.iter().zip(g.data.iter()) {
        acc += 0.5 * lambda * (a - b) * (a - b);
    }
    acc
}

//! Three-point first-derivative stencils on nonuniform grids.
//!
//! Interior samples use the centered stencil built from the two neighboring
//! gaps; the first and last samples use one-sided stencils. All weights are
//! closed-form rational functions of the gaps, so differentiating a series of
//! `N` samples costs `O(N)`.

use crate::error::{Error, Result};

/// Weights for a three-point first-derivative approximation.
///
/// `offsets` are sample positions relative to the evaluation point, in
/// ascending order; `weights` multiply the samples at those positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilWeights {
    pub offsets: [f64; 3],
    pub weights: [f64; 3],
}

impl StencilWeights {
    /// Residuals of the zeroth, first and second moment conditions
    /// (`Σw`, `Σw·o − 1`, `Σw·o²`).
    pub fn moment_residuals(&self) -> [f64; 3] {
        let mut m = [0.0, -1.0, 0.0];
        for (w, o) in self.weights.iter().zip(&self.offsets) {
            m[0] += w;
            m[1] += w * o;
            m[2] += w * o * o;
        }
        m
    }

    pub fn apply(&self, samples: [f64; 3]) -> f64 {
        self.weights[0] * samples[0] + self.weights[1] * samples[1] + self.weights[2] * samples[2]
    }
}

/// Which end of a series a one-sided stencil serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Samples at or before the evaluation point (used at the last sample).
    Left,
    /// Samples at or after the evaluation point (used at the first sample).
    Right,
}

fn check_gaps(a: f64, b: f64) -> Result<()> {
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!(
            "stencil gaps must be positive and finite, got a = {a}, b = {b}"
        )));
    }
    Ok(())
}

/// Centered stencil with samples at `t - a`, `t`, `t + b`.
pub fn central_weights(a: f64, b: f64) -> Result<StencilWeights> {
    check_gaps(a, b)?;
    Ok(StencilWeights {
        offsets: [-a, 0.0, b],
        weights: [-b / (a * (a + b)), (b - a) / (a * b), a / (b * (a + b))],
    })
}

/// One-sided stencil.
///
/// `Right` uses samples at `t`, `t + a`, `t + a + b`; `Left` mirrors it with
/// samples at `t - a - b`, `t - a`, `t`, where `a` is always the gap adjacent
/// to the evaluation point.
pub fn onesided_weights(side: Side, a: f64, b: f64) -> Result<StencilWeights> {
    check_gaps(a, b)?;
    let right = [
        -(2.0 * a + b) / (a * (a + b)),
        (a + b) / (a * b),
        -a / (b * (a + b)),
    ];
    Ok(match side {
        Side::Right => StencilWeights {
            offsets: [0.0, a, a + b],
            weights: right,
        },
        Side::Left => StencilWeights {
            offsets: [-(a + b), -a, 0.0],
            weights: [-right[2], -right[1], -right[0]],
        },
    })
}

/// Solves the 3×3 moment system for arbitrary distinct offsets.
///
/// This is a direct linear solve with partial pivoting; the closed forms
/// above are what the series differentiator uses.
#[allow(clippy::needless_range_loop)]
pub fn stencil_weights_general(offsets: [f64; 3]) -> Result<StencilWeights> {
    let mut sorted = offsets;
    sorted.sort_by(|x, y| x.total_cmp(y));
    if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.iter().any(|o| !o.is_finite()) {
        return Err(Error::Singular(format!(
            "stencil offsets must be distinct and finite, got {offsets:?}"
        )));
    }
    // Rows: moments 0, 1, 2. Augmented column: [0, 1, 0].
    let mut m = [[0.0f64; 4]; 3];
    for (c, &o) in offsets.iter().enumerate() {
        m[0][c] = 1.0;
        m[1][c] = o;
        m[2][c] = o * o;
    }
    m[1][3] = 1.0;
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot][col].abs() < f64::EPSILON * 1e-3 {
            return Err(Error::Singular("moment system is singular".into()));
        }
        m.swap(col, pivot);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let weights = [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]];
    Ok(StencilWeights { offsets, weights })
}

/// Per-sample stencils for one time grid, reusable across many value series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesStencil {
    indices: Vec<[usize; 3]>,
    weights: Vec<[f64; 3]>,
}

impl SeriesStencil {
    pub fn new(times: &[f64]) -> Result<Self> {
        let n = times.len();
        if n < 3 {
            return Err(Error::Domain(format!(
                "need at least 3 samples to differentiate, got {n}"
            )));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Domain(format!(
                "times must be strictly increasing (violated at index {})",
                i + 1
            )));
        }
        let mut indices = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);

        let first = onesided_weights(Side::Right, times[1] - times[0], times[2] - times[1])?;
        indices.push([0, 1, 2]);
        weights.push(first.weights);
        for j in 1..n - 1 {
            let w = central_weights(times[j] - times[j - 1], times[j + 1] - times[j])?;
            indices.push([j - 1, j, j + 1]);
            weights.push(w.weights);
        }
        let last = onesided_weights(
            Side::Left,
            times[n - 1] - times[n - 2],
            times[n - 2] - times[n - 3],
        )?;
        indices.push([n - 3, n - 2, n - 1]);
        weights.push(last.weights);

        Ok(Self { indices, weights })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Sample indices and weights of the stencil for sample `j`.
    pub fn row(&self, j: usize) -> ([usize; 3], [f64; 3]) {
        (self.indices[j], self.weights[j])
    }

    /// Differentiates `values` laid out as `N` rows of `d` components.
    pub fn apply_rows(&self, values: &[f64], d: usize) -> Result<Vec<f64>> {
        let n = self.len();
        if values.len() != n * d {
            return Err(Error::Dimension(format!(
                "expected {n}x{d} values, got {}",
                values.len()
            )));
        }
        let mut out = vec![0.0; n * d];
        for (j, (idx, w)) in self.indices.iter().zip(&self.weights).enumerate() {
            let dst = &mut out[j * d..(j + 1) * d];
            for k in 0..3 {
                let src = &values[idx[k] * d..(idx[k] + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w[k] * s;
                }
            }
        }
        Ok(out)
    }

    /// Differentiates along the columns of a row-major `d × N` matrix, i.e.
    /// each column is one sample.
    pub fn apply_columns(&self, values: &[f64], d: usize, out: &mut [f64]) {
        let n = self.len();
        debug_assert_eq!(values.len(), d * n);
        debug_assert_eq!(out.len(), d * n);
        for r in 0..d {
            let src = &values[r * n..(r + 1) * n];
            let dst = &mut out[r * n..(r + 1) * n];
            for (j, (idx, w)) in self.indices.iter().zip(&self.weights).enumerate() {
                dst[j] = w[0] * src[idx[0]] + w[1] * src[idx[1]] + w[2] * src[idx[2]];
            }
        }
    }

    /// Adjoint of [`apply_columns`](Self::apply_columns): accumulates
    /// `grad_out` back onto `grad_in`.
    pub fn apply_columns_adjoint(&self, grad_out: &[f64], d: usize, grad_in: &mut [f64]) {
        let n = self.len();
        for r in 0..d {
            let g = &grad_out[r * n..(r + 1) * n];
            let dst = &mut grad_in[r * n..(r + 1) * n];
            for (j, (idx, w)) in self.indices.iter().zip(&self.weights).enumerate() {
                for k in 0..3 {
                    dst[idx[k]] += w[k] * g[j];
                }
            }
        }
    }
}

/// Derivative of an `N × d` row-major series sampled at `times`.
pub fn differentiate_series(times: &[f64], values: &[f64], d: usize) -> Result<Vec<f64>> {
    SeriesStencil::new(times)?.apply_rows(values, d)
}

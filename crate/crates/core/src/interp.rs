//! Componentwise natural cubic splines through trajectory frames.

use crate::error::{Error, Result};

/// Piecewise cubic interpolant of an `N × D` series.
///
/// Segment `i` of component `c` is `a + b·s + c·s² + d·s³` with
/// `s = t − knots[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    knots: Vec<f64>,
    dim: usize,
    /// Knot values, `N × D` row-major.
    values: Vec<f64>,
    /// `(N − 1) × D × 4` polynomial coefficients.
    coeffs: Vec<f64>,
}

impl CubicSpline {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Local coefficients `[a, b, c, d]` of one segment and component.
    pub fn segment_polynomial(&self, segment: usize, component: usize) -> [f64; 4] {
        let o = (segment * self.dim + component) * 4;
        [
            self.coeffs[o],
            self.coeffs[o + 1],
            self.coeffs[o + 2],
            self.coeffs[o + 3],
        ]
    }

    pub fn range(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// Evaluates all components at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let (lo, hi) = self.range();
        if !(t >= lo && t <= hi) {
            return Err(Error::Extrapolation { t, lo, hi });
        }
        debug_assert_eq!(out.len(), self.dim);
        let d = self.dim;
        // first knot strictly greater than t
        let k = self.knots.partition_point(|&x| x <= t);
        if self.knots[k - 1] == t {
            out.copy_from_slice(&self.values[(k - 1) * d..k * d]);
            return Ok(());
        }
        let seg = k - 1;
        let s = t - self.knots[seg];
        let block = &self.coeffs[seg * d * 4..(seg + 1) * d * 4];
        for (o, p) in out.iter_mut().zip(block.chunks_exact(4)) {
            *o = p[0] + s * (p[1] + s * (p[2] + s * p[3]));
        }
        Ok(())
    }
}

/// Fits a natural cubic spline to each of the `D` components of `values`
/// (`N × D`, row-major).
///
/// Two knots give the linear interpolant and three give the interpolating
/// quadratic.
pub fn fit_spline(times: &[f64], values: &[f64], dim: usize) -> Result<CubicSpline> {
    let n = times.len();
    if n < 2 {
        return Err(Error::Domain(format!("spline needs at least 2 knots, got {n}")));
    }
    if dim == 0 || values.len() != n * dim {
        return Err(Error::Dimension(format!(
            "expected {n}x{dim} values, got {}",
            values.len()
        )));
    }
    if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::Domain(format!(
            "spline knots must be strictly increasing (violated at index {})",
            i + 1
        )));
    }

    let row = |j: usize| &values[j * dim..(j + 1) * dim];
    let mut coeffs = vec![0.0; (n - 1) * dim * 4];

    if n == 3 {
        let (t0, t1, t2) = (times[0], times[1], times[2]);
        for c in 0..dim {
            let (y0, y1, y2) = (row(0)[c], row(1)[c], row(2)[c]);
            let f01 = (y1 - y0) / (t1 - t0);
            let f12 = (y2 - y1) / (t2 - t1);
            let f012 = (f12 - f01) / (t2 - t0);
            let seg0 = [y0, f01 + f012 * (t0 - t1), f012, 0.0];
            let seg1 = [y1, f01 + f012 * (t1 - t0), f012, 0.0];
            coeffs[c * 4..c * 4 + 4].copy_from_slice(&seg0);
            coeffs[(dim + c) * 4..(dim + c) * 4 + 4].copy_from_slice(&seg1);
        }
    } else {
        let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        // Second derivatives M (N × D); natural ends M_0 = M_{N-1} = 0.
        let mut m = vec![0.0; n * dim];
        if n > 2 {
            // Thomas algorithm on the interior rows; the matrix is shared by
            // all components, only the right-hand side differs.
            let k = n - 2;
            let mut cprime = vec![0.0; k];
            let mut rhs = vec![0.0; k * dim];
            for i in 0..k {
                let (hl, hr) = (h[i], h[i + 1]);
                let diag = 2.0 * (hl + hr);
                let lower = if i > 0 { hl } else { 0.0 };
                let den = diag - lower * if i > 0 { cprime[i - 1] } else { 0.0 };
                cprime[i] = hr / den;
                for c in 0..dim {
                    let r = 6.0
                        * ((row(i + 2)[c] - row(i + 1)[c]) / hr
                            - (row(i + 1)[c] - row(i)[c]) / hl);
                    let prev = if i > 0 { rhs[(i - 1) * dim + c] } else { 0.0 };
                    rhs[i * dim + c] = (r - lower * prev) / den;
                }
            }
            for i in (0..k).rev() {
                for c in 0..dim {
                    let next = if i + 1 < k { m[(i + 2) * dim + c] } else { 0.0 };
                    m[(i + 1) * dim + c] = rhs[i * dim + c] - cprime[i] * next;
                }
            }
        }
        for i in 0..n - 1 {
            let hi = h[i];
            for c in 0..dim {
                let (y0, y1) = (row(i)[c], row(i + 1)[c]);
                let (m0, m1) = (m[i * dim + c], m[(i + 1) * dim + c]);
                let o = (i * dim + c) * 4;
                coeffs[o] = y0;
                coeffs[o + 1] = (y1 - y0) / hi - hi * (2.0 * m0 + m1) / 6.0;
                coeffs[o + 2] = m0 / 2.0;
                coeffs[o + 3] = (m1 - m0) / (6.0 * hi);
            }
        }
    }

    Ok(CubicSpline {
        knots: times.to_vec(),
        dim,
        values: values.to_vec(),
        coeffs,
    })
}

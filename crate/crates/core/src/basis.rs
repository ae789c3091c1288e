//! Functional bases over the domain `[h1, h2]`.
//!
//! Fourier bases are ordered `[1, sin(wh), cos(wh), sin(2wh), cos(2wh), ...]`
//! with `w = 2 pi / (h2 - h1)` and `h` measured from `h1`; they are left
//! unnormalized. B-splines are clamped: both endpoint knots are repeated up
//! to the spline order, so the endpoint rows are canonical unit vectors. The
//! last knot interval is closed on the right.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum BasisSpec {
    Fourier {
        range: (f64, f64),
        p: usize,
    },
    /// `order` is the spline order (degree + 1). `knots` includes both
    /// endpoints of the range.
    Bspline {
        range: (f64, f64),
        order: usize,
        knots: Vec<f64>,
    },
    /// The single function `1`, for components constant in `h`.
    Constant {
        range: (f64, f64),
    },
}

fn check_range(range: (f64, f64)) -> Result<()> {
    if !(range.0.is_finite() && range.1.is_finite() && range.0 < range.1) {
        return Err(Error::Basis(format!(
            "range [{}, {}] is not a finite non-empty interval",
            range.0, range.1
        )));
    }
    Ok(())
}

impl BasisSpec {
    /// A Fourier basis with `p` functions; `p` must be a positive odd number.
    pub fn fourier(range: (f64, f64), p: usize) -> Result<Self> {
        check_range(range)?;
        if p == 0 || p % 2 == 0 {
            return Err(Error::Basis(format!(
                "Fourier basis size must be a positive odd number, got {p}"
            )));
        }
        Ok(BasisSpec::Fourier { range, p })
    }

    pub fn bspline(range: (f64, f64), order: usize, knots: Vec<f64>) -> Result<Self> {
        check_range(range)?;
        if order == 0 {
            return Err(Error::Basis("spline order must be at least 1".into()));
        }
        if knots.len() < 2 {
            return Err(Error::Basis(
                "at least the two endpoint knots are required".into(),
            ));
        }
        if knots[0] != range.0 || knots[knots.len() - 1] != range.1 {
            return Err(Error::Basis(
                "first and last knots must equal the range endpoints".into(),
            ));
        }
        if knots.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::Basis("knots must be non-decreasing".into()));
        }
        let interior = &knots[1..knots.len() - 1];
        if interior.iter().any(|&k| !(k > range.0 && k < range.1)) {
            return Err(Error::Basis(
                "interior knots must lie strictly inside the range".into(),
            ));
        }
        let mut i = 0;
        while i < interior.len() {
            let run = interior[i..]
                .iter()
                .take_while(|&&k| k == interior[i])
                .count();
            if run > order {
                return Err(Error::Basis(format!(
                    "knot {} repeated {run} times exceeds order {order}",
                    interior[i]
                )));
            }
            i += run;
        }
        Ok(BasisSpec::Bspline {
            range,
            order,
            knots,
        })
    }

    /// B-spline with `n_knots` equally spaced knots including both endpoints.
    pub fn bspline_equispaced(range: (f64, f64), order: usize, n_knots: usize) -> Result<Self> {
        check_range(range)?;
        if n_knots < 2 {
            return Err(Error::Basis("at least two knots are required".into()));
        }
        let step = (range.1 - range.0) / (n_knots - 1) as f64;
        let knots = (0..n_knots)
            .map(|i| {
                if i == n_knots - 1 {
                    range.1
                } else {
                    range.0 + step * i as f64
                }
            })
            .collect();
        Self::bspline(range, order, knots)
    }

    pub fn constant(range: (f64, f64)) -> Result<Self> {
        check_range(range)?;
        Ok(BasisSpec::Constant { range })
    }

    pub fn range(&self) -> (f64, f64) {
        match self {
            BasisSpec::Fourier { range, .. }
            | BasisSpec::Bspline { range, .. }
            | BasisSpec::Constant { range } => *range,
        }
    }

    /// Number of basis functions.
    pub fn count(&self) -> usize {
        match self {
            BasisSpec::Fourier { p, .. } => *p,
            BasisSpec::Bspline { order, knots, .. } => order + knots.len() - 2,
            BasisSpec::Constant { .. } => 1,
        }
    }

    /// Evaluates every basis function at `h`, writing into `out`.
    pub fn eval_into(&self, h: f64, out: &mut [f64]) -> Result<()> {
        let (lo, hi) = self.range();
        if !(h >= lo && h <= hi) {
            return Err(Error::Domain { h, lo, hi });
        }
        debug_assert_eq!(out.len(), self.count());
        match self {
            BasisSpec::Constant { .. } => out[0] = 1.0,
            BasisSpec::Fourier { p, .. } => {
                let w = 2.0 * PI / (hi - lo);
                let x = h - lo;
                out[0] = 1.0;
                for k in 1..=(p - 1) / 2 {
                    let a = k as f64 * w * x;
                    out[2 * k - 1] = a.sin();
                    out[2 * k] = a.cos();
                }
            }
            BasisSpec::Bspline { order, knots, .. } => bspline_eval(*order, knots, h, out),
        }
        Ok(())
    }

    pub fn eval(&self, h: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.count()];
        self.eval_into(h, &mut out)?;
        Ok(out)
    }

    pub fn matrix(&self, h_points: &[f64]) -> Result<BasisMatrix> {
        let p = self.count();
        let mut values = DMatrix::zeros(h_points.len(), p);
        let mut row = vec![0.0; p];
        for (i, &h) in h_points.iter().enumerate() {
            self.eval_into(h, &mut row)?;
            for (j, v) in row.iter().enumerate() {
                values[(i, j)] = *v;
            }
        }
        Ok(BasisMatrix { values })
    }
}

/// Clamped knot vector: endpoints repeated `order` times.
fn full_knots(order: usize, knots: &[f64]) -> Vec<f64> {
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let mut t = vec![lo; order];
    t.extend_from_slice(&knots[1..knots.len() - 1]);
    t.extend(std::iter::repeat_n(hi, order));
    t
}

fn bspline_eval(order: usize, knots: &[f64], h: f64, out: &mut [f64]) {
    let t = full_knots(order, knots);
    let p = out.len();
    let degree = order - 1;
    out.iter_mut().for_each(|v| *v = 0.0);
    // Span mu with t[mu] <= h < t[mu + 1]; h = h2 falls in the last span.
    let mut mu = degree;
    for k in degree..p {
        if t[k] <= h && t[k] < t[k + 1] {
            mu = k;
        }
    }
    let mut n = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = h - t[mu + 1 - j];
        right[j] = t[mu + j] - h;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    for (r, v) in n.iter().enumerate() {
        out[mu - degree + r] = *v;
    }
}

/// Row `i` holds the basis evaluated at the `i`-th point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
}

pub fn eval_basis(spec: &BasisSpec, h: f64) -> Result<Vec<f64>> {
    spec.eval(h)
}

pub fn basis_matrix(spec: &BasisSpec, h_points: &[f64]) -> Result<BasisMatrix> {
    spec.matrix(h_points)
}

pub fn basis_count(spec: &BasisSpec) -> usize {
    spec.count()
}

/// Bases for the latent field, the covariate coefficients and the
/// log measurement variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisTriple {
    pub z: BasisSpec,
    pub beta: BasisSpec,
    pub sigma: BasisSpec,
}

impl BasisTriple {
    pub fn new(z: BasisSpec, beta: BasisSpec, sigma: BasisSpec) -> Result<Self> {
        if z.range() != beta.range() || z.range() != sigma.range() {
            return Err(Error::Basis(
                "all three bases must share the same range".into(),
            ));
        }
        Ok(BasisTriple { z, beta, sigma })
    }

    pub fn range(&self) -> (f64, f64) {
        self.z.range()
    }
}

#![allow(dead_code)]

use fhdgm::basis::{BasisSpec, BasisTriple};
use fhdgm::estimation::{Layout, ModelParams};
use fhdgm::ingest::{Coordinate, Unit};
use fhdgm::spatial::SpatialParams;
use fhdgm::statespace::{StateSpaceSystem, TimeStep};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

/// A random system with `n` blocks of size `p`, `T` steps and up to `q`
/// rows per block and step, each row missing with probability `miss`.
pub fn random_system(
    seed: u64,
    n: usize,
    p: usize,
    t_len: usize,
    q: usize,
    miss: f64,
) -> StateSpaceSystem {
    let mut r = rng(seed);
    let s = n * p;
    let transition = DVector::from_fn(s, |_, _| r.random_range(-0.95..0.95));
    let innovation_cov = random_spd(&mut r, s);
    let init_cov = random_spd(&mut r, s);
    let init_mean = DVector::from_fn(s, |_, _| r.random_range(-1.0..1.0));
    let steps = (0..t_len)
        .map(|_| {
            let mut y = Vec::new();
            let mut blocks = Vec::new();
            let mut phis = Vec::new();
            let mut offset = Vec::new();
            let mut variance = Vec::new();
            for b in 0..n {
                let rows = r.random_range(0..=q);
                for _ in 0..rows {
                    let v = if r.random_bool(miss) {
                        f64::NAN
                    } else {
                        r.random_range(-3.0..3.0)
                    };
                    y.push(v);
                    blocks.push(b);
                    phis.extend((0..p).map(|_| r.random_range(-1.0..1.0)));
                    offset.push(r.random_range(-1.0..1.0));
                    variance.push(r.random_range(0.2..2.0));
                }
            }
            let rows = y.len();
            TimeStep {
                y,
                blocks,
                phi: DMatrix::from_row_slice(rows, p, &phis),
                offset,
                variance,
            }
        })
        .collect();
    StateSpaceSystem {
        n_blocks: n,
        block_dim: p,
        transition,
        innovation_cov,
        init_mean,
        init_cov,
        steps,
    }
}

pub struct JointGaussian {
    pub loglik: f64,
    /// `E[z_t | Y]`, `t = 0..=T`.
    pub mean: Vec<DVector<f64>>,
    /// Full joint posterior covariance of `(z_0, ..., z_T)`.
    pub cov: DMatrix<f64>,
    pub state_dim: usize,
}

impl JointGaussian {
    pub fn block(&self, t: usize, u: usize) -> DMatrix<f64> {
        let s = self.state_dim;
        self.cov.view((t * s, u * s), (s, s)).into_owned()
    }
}

/// Conditions the stacked states on every observed row at once.
pub fn brute_force(sys: &StateSpaceSystem) -> JointGaussian {
    let s = sys.state_dim();
    let tl = sys.t_len();
    let dim = s * (tl + 1);
    let g = DMatrix::from_diagonal(&sys.transition);
    // Prior moments of the stacked state.
    let mut mean = DVector::zeros(dim);
    let mut marg = vec![sys.init_cov.clone()];
    mean.rows_mut(0, s).copy_from(&sys.init_mean);
    for t in 1..=tl {
        let m = &g * mean.rows((t - 1) * s, s).into_owned();
        mean.rows_mut(t * s, s).copy_from(&m);
        marg.push(&g * &marg[t - 1] * g.transpose() + &sys.innovation_cov);
    }
    let mut prior = DMatrix::zeros(dim, dim);
    for a in 0..=tl {
        let mut c = marg[a].clone();
        for b in a..=tl {
            if b > a {
                c = &g * c;
            }
            prior.view_mut((b * s, a * s), (s, s)).copy_from(&c);
            prior
                .view_mut((a * s, b * s), (s, s))
                .copy_from(&c.transpose());
        }
    }
    let mut rows = Vec::new();
    for (ti, st) in sys.steps.iter().enumerate() {
        for r in 0..st.rows() {
            if !st.y[r].is_nan() {
                rows.push((ti + 1, r));
            }
        }
    }
    let m = rows.len();
    let mut h = DMatrix::zeros(m, dim);
    let mut y = DVector::zeros(m);
    let mut off = DVector::zeros(m);
    let mut noise = DVector::zeros(m);
    for (k, &(t, r)) in rows.iter().enumerate() {
        let st = &sys.steps[t - 1];
        let base = t * s + st.blocks[r] * sys.block_dim;
        for a in 0..sys.block_dim {
            h[(k, base + a)] = st.phi[(r, a)];
        }
        y[k] = st.y[r];
        off[k] = st.offset[r];
        noise[k] = st.variance[r];
    }
    if m == 0 {
        return JointGaussian {
            loglik: 0.0,
            mean: (0..=tl).map(|t| mean.rows(t * s, s).into_owned()).collect(),
            cov: prior,
            state_dim: s,
        };
    }
    let mut sy = &h * &prior * h.transpose();
    for k in 0..m {
        sy[(k, k)] += noise[k];
    }
    let e = &y - (&off + &h * &mean);
    let ch = Cholesky::new(sy.clone()).expect("observation covariance");
    let alpha = ch.solve(&e);
    let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let loglik = -0.5 * (m as f64 * LN_2PI + logdet + e.dot(&alpha));
    let cross = &prior * h.transpose();
    let post_mean = &mean + &cross * alpha;
    let post_cov = &prior - &cross * ch.solve(&cross.transpose());
    JointGaussian {
        loglik,
        mean: (0..=tl)
            .map(|t| post_mean.rows(t * s, s).into_owned())
            .collect(),
        cov: post_cov,
        state_dim: s,
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Two-function B-spline bases on `[0, 1]` for the latent and covariate
/// parts and a constant measurement variance.
pub fn spline_bases() -> BasisTriple {
    let r = (0.0, 1.0);
    BasisTriple::new(
        BasisSpec::bspline_equispaced(r, 2, 2).unwrap(),
        BasisSpec::bspline_equispaced(r, 2, 2).unwrap(),
        BasisSpec::constant(r).unwrap(),
    )
    .unwrap()
}

pub fn layout(n_sites: usize, t_len: usize, extent: f64) -> Layout {
    Layout {
        n_sites,
        t_len,
        h_points: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        domain: (0.0, 1.0),
        n_covariates: 1,
        unit: Unit::Km,
        extent,
    }
}

/// Parameters for [`spline_bases`] with one intercept covariate.
pub fn spline_truth(g: [f64; 2], v: [f64; 2], theta: [f64; 2], sigma2: f64) -> ModelParams {
    ModelParams::new(
        DVector::from_vec(vec![sigma2.ln()]),
        DVector::from_vec(vec![2.0, -1.0]),
        DVector::from_vec(g.to_vec()),
        SpatialParams::new(v.to_vec(), theta.to_vec()).unwrap(),
    )
    .unwrap()
}

/// Gamma(k / 2) for integer `k` from factorials.
pub fn half_gamma(k: usize) -> f64 {
    let fact = |m: usize| (1..=m).map(|i| i as f64).product::<f64>();
    if k % 2 == 0 {
        fact(k / 2 - 1)
    } else {
        let n = (k - 1) / 2;
        fact(2 * n) * std::f64::consts::PI.sqrt() / (4f64.powi(n as i32) * fact(n))
    }
}

pub fn chi2_density(t: f64, k: usize) -> f64 {
    let a = k as f64 / 2.0;
    t.powf(a - 1.0) * (-t / 2.0).exp() / (2f64.powf(a) * half_gamma(k))
}

pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(
        f,
        a,
        b,
        fa,
        fm,
        fb,
        (b - a) / 6.0 * (fa + 4.0 * fm + fb),
        tol,
        depth,
    )
}

/// Upper tail by integrating the density from `x` over a range long enough
/// for the remainder to vanish, in unit pieces.
pub fn chi2_tail_oracle(x: f64, k: usize) -> f64 {
    let f = |t: f64| chi2_density(t, k);
    let end = x + 250.0;
    let mut s = 0.0;
    let mut a = x;
    while a < end {
        let b = (a + 1.0).min(end);
        s += adaptive_simpson(&f, a, b, 1e-16, 40);
        a = b;
    }
    s
}

pub fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

pub fn mean(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    )
}

/// Objective of an assignment with each centroid at its cluster mean.
pub fn mean_objective(
    pts: &[(f64, f64)],
    assignment: &[usize],
    k: usize,
    lambda: f64,
) -> Option<f64> {
    let target = pts.len() as f64 / k as f64;
    let mut total = 0.0;
    for j in 0..k {
        let members: Vec<(f64, f64)> = pts
            .iter()
            .zip(assignment)
            .filter(|(_, &a)| a == j)
            .map(|(p, _)| *p)
            .collect();
        if members.is_empty() {
            return None;
        }
        let c = mean(&members);
        total += members.iter().map(|p| euclid(*p, c)).sum::<f64>();
        total += lambda * (members.len() as f64 - target).powi(2);
    }
    Some(total)
}

pub fn enumerate_two(pts: &[(f64, f64)], lambda: f64) -> f64 {
    let n = pts.len();
    (0..1u32 << n)
        .filter_map(|mask| {
            let a: Vec<usize> = (0..n).map(|i| (mask >> i & 1) as usize).collect();
            mean_objective(pts, &a, 2, lambda)
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn coords(pts: &[(f64, f64)]) -> Vec<Coordinate> {
    pts.iter()
        .map(|&(y, x)| Coordinate::planar(y, x, Unit::Km))
        .collect()
}

pub fn random_points(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| (r.random_range(0.0..scale), r.random_range(0.0..scale)))
        .collect()
}

/// Lloyd's algorithm with the same initialization and tie-breaking as a
/// trial; `None` if a cluster empties.
pub fn classic_kmeans(pts: &[(f64, f64)], k: usize, seed: u64) -> Option<f64> {
    let n = pts.len();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut cents: Vec<(f64, f64)> = sample(&mut r, n, k).into_iter().map(|i| pts[i]).collect();
    let nearest = |p: (f64, f64), cents: &[(f64, f64)]| {
        let mut best = 0;
        for j in 1..cents.len() {
            if euclid(p, cents[j]) < euclid(p, cents[best]) {
                best = j;
            }
        }
        best
    };
    let mut a: Vec<usize> = pts.iter().map(|&p| nearest(p, &cents)).collect();
    for _ in 0..100 {
        let mut sizes = vec![0; k];
        a.iter().for_each(|&j| sizes[j] += 1);
        if sizes.contains(&0) {
            return None;
        }
        let new: Vec<(f64, f64)> = (0..k)
            .map(|j| {
                let m: Vec<(f64, f64)> = pts
                    .iter()
                    .zip(&a)
                    .filter(|(_, &x)| x == j)
                    .map(|(p, _)| *p)
                    .collect();
                mean(&m)
            })
            .collect();
        let b: Vec<usize> = pts.iter().map(|&p| nearest(p, &new)).collect();
        let done = new == cents && b == a;
        cents = new;
        a = b;
        if done {
            break;
        }
    }
    mean_objective(pts, &a, k, 0.0)
}

//! Parameter covariance from the observed information, Wald tests for
//! covariates and pointwise confidence bands.
//!
//! The information is accumulated over time from per-time contributions
//! `i_t` of the innovations log-likelihood. Contributions come from
//! finite differences: perturbed filters are stepped forward together, so
//! the truncated estimate stops filtering once the running covariance has
//! settled.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma_ur;

use crate::basis::BasisTriple;
use crate::error::{Error, Result};
use crate::estimation::{Model, ModelParams};
use crate::exec::Executor;
use crate::ingest::ProfileDataset;
use crate::statespace::FilterRun;

/// Number of time steps accumulated before the stopping rule is checked.
pub const T_MIN: usize = 10;

/// How each `i_t` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InformationKind {
    /// Outer product of the time-`t` score.
    #[default]
    OuterProduct,
    /// Negative second derivative of the time-`t` loglik term. Costs
    /// `P^2 + P + 1` filter runs instead of `2P + 1`, but its increments are
    /// far less noisy, which lets the stopping rule fire on moderate `T`.
    Hessian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoOptions {
    pub kind: InformationKind,
    /// Finite-difference step relative to `max(|psi_l|, 1)` for location
    /// parameters and to `|psi_l|` for `v` and `theta`.
    pub rel_step: f64,
    pub workers: usize,
}

impl Default for InfoOptions {
    fn default() -> Self {
        InfoOptions {
            kind: InformationKind::OuterProduct,
            rel_step: 1e-5,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Point {
    Base,
    Axial(usize, f64),
    Pair(usize, usize, f64),
}

struct Run {
    point: Point,
    params: ModelParams,
    dynamics: Vec<(DVector<f64>, DMatrix<f64>)>,
    filters: Vec<FilterRun>,
    last: Option<Result<f64>>,
}

/// Per-time scores and information contributions, produced in time order.
pub struct InfoStream<'a> {
    model: &'a Model,
    runs: Vec<Run>,
    steps: Vec<f64>,
    labels: Vec<String>,
    kind: InformationKind,
    exec: Executor,
    t: usize,
}

/// Contribution of one time step.
#[derive(Debug, Clone)]
pub struct Increment {
    pub t: usize,
    pub score: DVector<f64>,
    pub info: DMatrix<f64>,
}

fn fd_steps(params: &ModelParams, rel: f64) -> Vec<f64> {
    let x = params.to_vec();
    let positive_from = x.len() - 2 * params.p();
    x.iter()
        .enumerate()
        .map(|(l, v)| {
            if l >= positive_from {
                rel * v.abs()
            } else {
                rel * v.abs().max(1.0)
            }
        })
        .collect()
}

impl<'a> InfoStream<'a> {
    pub fn new(
        model: &'a Model,
        params: &ModelParams,
        covariate_names: &[String],
        opts: &InfoOptions,
    ) -> Result<Self> {
        if !(opts.rel_step > 0.0) {
            return Err(Error::Argument(
                "finite-difference step must be positive".into(),
            ));
        }
        let n = params.len();
        let x = params.to_vec();
        let steps = fd_steps(params, opts.rel_step);
        let mut points = Vec::new();
        if opts.kind == InformationKind::Hessian {
            points.push(Point::Base);
        }
        for l in 0..n {
            points.push(Point::Axial(l, 1.0));
            points.push(Point::Axial(l, -1.0));
        }
        if opts.kind == InformationKind::Hessian {
            for l in 0..n {
                for m in l + 1..n {
                    points.push(Point::Pair(l, m, 1.0));
                    points.push(Point::Pair(l, m, -1.0));
                }
            }
        }
        let runs = points
            .into_iter()
            .map(|point| {
                let mut y = x.clone();
                match point {
                    Point::Base => {}
                    Point::Axial(l, s) => y[l] += s * steps[l],
                    Point::Pair(l, m, s) => {
                        y[l] += s * steps[l];
                        y[m] += s * steps[m];
                    }
                }
                let params = params.with_values(&y)?;
                let dynamics = model
                    .designs
                    .iter()
                    .map(|d| d.dynamics(&params))
                    .collect::<Result<Vec<_>>>()?;
                let filters = dynamics
                    .iter()
                    .map(|(g, gamma)| FilterRun::from_prior(DVector::zeros(g.len()), gamma.clone()))
                    .collect();
                Ok(Run {
                    point,
                    params,
                    dynamics,
                    filters,
                    last: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(InfoStream {
            model,
            runs,
            steps,
            labels: params
                .labels(covariate_names)
                .iter()
                .map(|l| l.to_string())
                .collect(),
            kind: opts.kind,
            exec: Executor::new(opts.workers),
            t: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.steps.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Advances every perturbed filter by one step; `None` after the last
    /// time.
    pub fn next_increment(&mut self) -> Option<Result<Increment>> {
        if self.t >= self.model.t_len {
            return None;
        }
        self.t += 1;
        let t = self.t;
        let model = self.model;
        self.exec.for_each_mut(&mut self.runs, |run| {
            let mut total = 0.0;
            for (k, design) in model.designs.iter().enumerate() {
                let step = design.step(t, &run.params);
                let (g, gamma) = &run.dynamics[k];
                match run.filters[k].advance_with(g, gamma, design.p_z, &step) {
                    Ok(v) => total += v,
                    Err(e) => {
                        run.last = Some(Err(e));
                        return;
                    }
                }
            }
            run.last = Some(Ok(total));
        });
        let n = self.dim();
        let mut base = 0.0;
        let mut axial = vec![[0.0; 2]; n];
        let mut pair = DMatrix::<[f64; 2]>::from_element(n, n, [0.0; 2]);
        for run in &mut self.runs {
            let v = match run.last.take().expect("every run advanced") {
                Ok(v) => v,
                Err(e) => return Some(Err(e)),
            };
            let side = |s: f64| usize::from(s < 0.0);
            match run.point {
                Point::Base => base = v,
                Point::Axial(l, s) => axial[l][side(s)] = v,
                Point::Pair(l, m, s) => pair[(l, m)][side(s)] = v,
            }
        }
        let h = &self.steps;
        let score = DVector::from_fn(n, |l, _| (axial[l][0] - axial[l][1]) / (2.0 * h[l]));
        if let Some(l) = (0..n).find(|&l| !score[l].is_finite()) {
            return Some(Err(Error::NonFiniteScore(self.labels[l].clone())));
        }
        let info = match self.kind {
            InformationKind::OuterProduct => &score * score.transpose(),
            InformationKind::Hessian => {
                let mut hess = DMatrix::zeros(n, n);
                for l in 0..n {
                    hess[(l, l)] = (axial[l][0] - 2.0 * base + axial[l][1]) / (h[l] * h[l]);
                    for m in l + 1..n {
                        let v = (pair[(l, m)][0] - axial[l][0] - axial[m][0] + 2.0 * base
                            - axial[l][1]
                            - axial[m][1]
                            + pair[(l, m)][1])
                            / (2.0 * h[l] * h[m]);
                        hess[(l, m)] = v;
                        hess[(m, l)] = v;
                    }
                }
                if let Some(l) = (0..n).find(|&l| !hess.row(l).iter().all(|v| v.is_finite())) {
                    return Some(Err(Error::NonFiniteScore(self.labels[l].clone())));
                }
                -hess
            }
        };
        Some(Ok(Increment { t, score, info }))
    }
}

/// `sum_{t <= t_max} i_t`.
pub fn observed_information(
    model: &Model,
    params: &ModelParams,
    covariate_names: &[String],
    t_max: usize,
    opts: &InfoOptions,
) -> Result<DMatrix<f64>> {
    let n = params.len();
    let mut acc = DMatrix::zeros(n, n);
    if t_max == 0 {
        return Ok(acc);
    }
    let mut stream = InfoStream::new(model, params, covariate_names, opts)?;
    while let Some(inc) = stream.next_increment() {
        let inc = inc?;
        acc += inc.info;
        if inc.t >= t_max {
            break;
        }
    }
    Ok(acc)
}

/// Per-time scores `u_t` for `t = 1..=T`.
pub fn scores(
    model: &Model,
    params: &ModelParams,
    covariate_names: &[String],
    opts: &InfoOptions,
) -> Result<Vec<DVector<f64>>> {
    let opts = InfoOptions {
        kind: InformationKind::OuterProduct,
        ..*opts
    };
    let mut stream = InfoStream::new(model, params, covariate_names, &opts)?;
    let mut out = Vec::with_capacity(model.t_len);
    while let Some(inc) = stream.next_increment() {
        out.push(inc?.score);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct VarCov {
    pub matrix: DMatrix<f64>,
    pub t_star: usize,
    pub delta_used: f64,
    /// True when the rule fired before the last time step.
    pub truncated: bool,
    pub labels: Vec<String>,
}

impl VarCov {
    /// The matrix with negative eigenvalues set to zero.
    pub fn projected(&self) -> DMatrix<f64> {
        let eig = self.matrix.clone().symmetric_eigen();
        let d = eig.eigenvalues.map(|x| x.max(0.0));
        &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        self.projected()
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }

    /// Square sub-block starting at `start`.
    pub fn block(&self, start: usize, len: usize) -> DMatrix<f64> {
        self.matrix.view((start, start), (len, len)).into_owned()
    }
}

fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let ch: Cholesky<f64, Dyn> = Cholesky::new(m.clone())?;
    let mut inv = ch.inverse();
    let n = inv.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Covariance `((T / t*) I_{t*})^{-1}` where `t*` is the first `t >= T_MIN`
/// at which the relative Frobenius change of the running estimate is at
/// most `delta`; the full-sample inverse when no such `t` exists.
pub fn varcov_truncated(
    model: &Model,
    params: &ModelParams,
    covariate_names: &[String],
    delta: f64,
    opts: &InfoOptions,
) -> Result<VarCov> {
    if !(delta >= 0.0) {
        return Err(Error::Argument("delta must be non-negative".into()));
    }
    let tl = model.t_len as f64;
    let mut stream = InfoStream::new(model, params, covariate_names, opts)?;
    let labels = stream.labels().to_vec();
    let n = stream.dim();
    let mut acc = DMatrix::zeros(n, n);
    let mut prev: Option<DMatrix<f64>> = None;
    while let Some(inc) = stream.next_increment() {
        let inc = inc?;
        acc += inc.info;
        let t = inc.t;
        if t + 1 < T_MIN {
            continue;
        }
        let cur = spd_inverse(&(&acc * (tl / t as f64)));
        if t >= T_MIN {
            if let (Some(c), Some(p)) = (&cur, &prev) {
                let rel = (c - p).norm() / c.norm();
                if rel <= delta {
                    return Ok(VarCov {
                        matrix: c.clone(),
                        t_star: t,
                        delta_used: delta,
                        truncated: t < model.t_len,
                        labels,
                    });
                }
            }
        }
        prev = cur;
    }
    match spd_inverse(&acc) {
        Some(m) => Ok(VarCov {
            matrix: m,
            t_star: model.t_len,
            delta_used: delta,
            truncated: false,
            labels,
        }),
        None => Err(Error::Conditioning {
            min_eigenvalue: acc.symmetric_eigen().eigenvalues.min(),
        }),
    }
}

/// A warning when missing data concentrate at the end of the series, where
/// the truncated estimate is least reliable.
pub fn missing_data_warning(ds: &ProfileDataset) -> Option<String> {
    let rates = ds.missing_rate_by_time();
    if rates.is_empty() {
        return None;
    }
    let avg = rates.iter().sum::<f64>() / rates.len() as f64;
    let tail_len = rates.len().div_ceil(10);
    let tail = &rates[rates.len() - tail_len..];
    let tail_avg = tail.iter().sum::<f64>() / tail.len() as f64;
    (tail_avg > 2.0 * avg).then(|| {
        format!(
            "missing rate over the last {tail_len} time steps ({tail_avg:.3}) exceeds twice the average ({avg:.3}); the truncated covariance may be inflated"
        )
    })
}

/// Upper tail probability of the chi-square distribution.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0)
}

/// `c' S^{-1} c`.
pub fn wald_statistic(c: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let ch = Cholesky::new(cov.clone())?;
    let w = c.dot(&ch.solve(c));
    w.is_finite().then_some(w.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chi2Row {
    pub covariate: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

#[derive(Debug)]
pub struct Chi2Report {
    /// One entry per covariate, in declaration order.
    pub rows: Vec<Result<Chi2Row>>,
}

/// Wald test that all coefficients of each covariate are zero.
pub fn beta_chi2_test(
    vc: &VarCov,
    params: &ModelParams,
    covariate_names: &[String],
) -> Result<Chi2Report> {
    let b = covariate_names.len();
    if b == 0 {
        return Ok(Chi2Report { rows: Vec::new() });
    }
    let pb = params.c_beta.len() / b;
    let start = params.c_eps.len();
    if vc.matrix.nrows() < start + b * pb {
        return Err(Error::Argument(
            "covariance does not cover the c_beta block".into(),
        ));
    }
    let rows = covariate_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let c = params.beta_block(j, pb);
            let cov = vc.block(start + j * pb, pb);
            let w = wald_statistic(&c, &cov).ok_or_else(|| Error::Test(name.clone()))?;
            Ok(Chi2Row {
                covariate: name.clone(),
                statistic: w,
                df: pb,
                p_value: chi2_sf(w, pb),
            })
        })
        .collect();
    Ok(Chi2Report { rows })
}

/// Standard normal quantile.
pub fn normal_quantile(q: f64) -> f64 {
    Normal::standard().inverse_cdf(q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub level: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub h: f64,
    /// Covariate name, or `sigma2_eps` for the measurement variance.
    pub component: String,
    pub estimate: f64,
    pub se: f64,
    pub bands: Vec<Band>,
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if let Some(l) = levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(Error::Argument(format!(
            "confidence level {l} is not in (0, 1)"
        )));
    }
    Ok(())
}

fn quad_form(phi: &[f64], cov: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for (a, pa) in phi.iter().enumerate() {
        for (c, pc) in phi.iter().enumerate() {
            s += pa * cov[(a, c)] * pc;
        }
    }
    s.max(0.0)
}

/// Pointwise bands for every `beta_j(h)` over `h_grid`, covariate by
/// covariate.
pub fn beta_confidence_bands(
    vc: &VarCov,
    params: &ModelParams,
    bt: &BasisTriple,
    covariate_names: &[String],
    h_grid: &[f64],
    levels: &[f64],
) -> Result<Vec<BandRow>> {
    check_levels(levels)?;
    let pb = bt.beta.count();
    let start = params.c_eps.len();
    let cov = vc.projected();
    let z: Vec<f64> = levels
        .iter()
        .map(|l| normal_quantile((1.0 + l) / 2.0))
        .collect();
    let mut out = Vec::new();
    for (j, name) in covariate_names.iter().enumerate() {
        let c = params.beta_block(j, pb);
        let block = cov
            .view((start + j * pb, start + j * pb), (pb, pb))
            .into_owned();
        for &h in h_grid {
            let phi = bt.beta.eval(h)?;
            let est: f64 = phi.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
            let se = quad_form(&phi, &block).sqrt();
            out.push(BandRow {
                h,
                component: name.clone(),
                estimate: est,
                se,
                bands: levels
                    .iter()
                    .zip(&z)
                    .map(|(&level, &q)| Band {
                        level,
                        lo: est - q * se,
                        hi: est + q * se,
                    })
                    .collect(),
            });
        }
    }
    Ok(out)
}

/// Bands for `sigma2_eps(h)`, built on the log scale and exponentiated;
/// `se` is the standard error of the log variance.
pub fn sigma_confidence_bands(
    vc: &VarCov,
    params: &ModelParams,
    bt: &BasisTriple,
    h_grid: &[f64],
    levels: &[f64],
) -> Result<Vec<BandRow>> {
    check_levels(levels)?;
    let ps = params.c_eps.len();
    let cov = vc.projected();
    let block = cov.view((0, 0), (ps, ps)).into_owned();
    let z: Vec<f64> = levels
        .iter()
        .map(|l| normal_quantile((1.0 + l) / 2.0))
        .collect();
    h_grid
        .iter()
        .map(|&h| {
            let phi = bt.sigma.eval(h)?;
            let log_est: f64 = phi
                .iter()
                .zip(params.c_eps.iter())
                .map(|(a, b)| a * b)
                .sum();
            let se = quad_form(&phi, &block).sqrt();
            Ok(BandRow {
                h,
                component: "sigma2_eps".into(),
                estimate: log_est.exp(),
                se,
                bands: levels
                    .iter()
                    .zip(&z)
                    .map(|(&level, &q)| Band {
                        level,
                        lo: (log_est - q * se).exp(),
                        hi: (log_est + q * se).exp(),
                    })
                    .collect(),
            })
        })
        .collect()
}

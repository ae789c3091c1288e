//! Model assembly, EM estimation, initialization and simulation.
//!
//! The parameter vector is `psi = (c_eps, c_beta, g, v, theta)`: log
//! measurement-variance coefficients, covariate coefficients (covariate
//! major, `p_beta` per covariate), and per latent basis function the AR(1)
//! coefficient, innovation variance and spatial range.
//!
//! The EM is a generalized EM. Given the smoothed moments, `c_beta` is the
//! exact weighted least-squares maximizer, `c_eps` takes one safeguarded
//! scoring step, and each latent triple `(g_j, v_j, theta_j)` is maximized
//! jointly: `g_j` and `v_j` have closed forms given `theta_j`, and
//! `theta_j` is found by golden-section search on the profiled objective.
//! Since `z_0 ~ N(0, Sigma_eta)`, the initial state enters the latent
//! objective as one more innovation.

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::basis::BasisTriple;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::ingest::{Coordinate, ProfileDataset, ProfileRecord, Unit};
use crate::partition::Partitioning;
use crate::spatial::{
    correlation_matrix, distance_matrix, innovation_covariance, max_distance, site_major,
    SpatialParams,
};
use crate::statespace::{
    expected_sufficient_stats, kalman_smoother, loglik_terms, SmootherOutput, StateSpaceSystem,
    SufficientStats, TimeStep,
};

/// Bound on `|g_j|` applied by the M-step.
pub const G_BOUND: f64 = 0.999;
/// Floor added to squared residuals before taking logs at initialization.
pub const LOG_FLOOR: f64 = 1e-6;
/// Search bracket for `theta`, as multiples of the largest site distance.
pub const THETA_BRACKET: (f64, f64) = (1e-3, 3.0);
/// Width of the final golden-section bracket on `ln theta`.
pub const THETA_TOL: f64 = 1e-4;
/// Loglik decrease (absolute) treated as an implementation fault.
pub const DECREASE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub c_eps: DVector<f64>,
    /// Covariate major: entry `j * p_beta + a` is coefficient `a` of covariate `j`.
    pub c_beta: DVector<f64>,
    g: DVector<f64>,
    pub sp: SpatialParams,
}

/// One entry of the parameter vector, e.g. `theta[1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLabel {
    pub name: String,
    pub index: usize,
}

impl fmt::Display for ParamLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.name, self.index)
    }
}

fn check_g(g: &DVector<f64>) -> Result<()> {
    if let Some(x) = g.iter().find(|x| !(x.abs() < 1.0)) {
        return Err(Error::Argument(format!(
            "transition coefficient {x} violates |g| < 1"
        )));
    }
    Ok(())
}

impl ModelParams {
    pub fn new(
        c_eps: DVector<f64>,
        c_beta: DVector<f64>,
        g: DVector<f64>,
        sp: SpatialParams,
    ) -> Result<Self> {
        check_g(&g)?;
        if g.len() != sp.p() {
            return Err(Error::Argument(format!(
                "g has {} entries but v/theta have {}",
                g.len(),
                sp.p()
            )));
        }
        if c_eps.is_empty() {
            return Err(Error::Argument("c_eps must not be empty".into()));
        }
        if c_eps.iter().chain(c_beta.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Argument("coefficients must be finite".into()));
        }
        Ok(ModelParams {
            c_eps,
            c_beta,
            g,
            sp,
        })
    }

    pub fn g(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn set_g(&mut self, g: DVector<f64>) -> Result<()> {
        check_g(&g)?;
        if g.len() != self.g.len() {
            return Err(Error::Argument("g length cannot change".into()));
        }
        self.g = g;
        Ok(())
    }

    /// Number of latent basis functions.
    pub fn p(&self) -> usize {
        self.g.len()
    }

    pub fn len(&self) -> usize {
        self.c_eps.len() + self.c_beta.len() + 3 * self.p()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.c_eps.iter());
        out.extend(self.c_beta.iter());
        out.extend(self.g.iter());
        out.extend(self.sp.v.iter());
        out.extend(self.sp.theta.iter());
        out
    }

    /// Parameters of the same shape as `self` taken from `x`.
    pub fn with_values(&self, x: &[f64]) -> Result<Self> {
        if x.len() != self.len() {
            return Err(Error::Argument(format!(
                "expected {} values, got {}",
                self.len(),
                x.len()
            )));
        }
        let (ne, nb, p) = (self.c_eps.len(), self.c_beta.len(), self.p());
        let mut at = 0;
        let mut take = |k: usize| {
            let s = &x[at..at + k];
            at += k;
            s.to_vec()
        };
        let c_eps = DVector::from_vec(take(ne));
        let c_beta = DVector::from_vec(take(nb));
        let g = DVector::from_vec(take(p));
        let v = take(p);
        let theta = take(p);
        ModelParams::new(c_eps, c_beta, g, SpatialParams::new(v, theta)?)
    }

    pub fn labels(&self, covariate_names: &[String]) -> Vec<ParamLabel> {
        let label = |name: &str, index| ParamLabel {
            name: name.to_string(),
            index,
        };
        let mut out: Vec<ParamLabel> = (0..self.c_eps.len()).map(|i| label("c_eps", i)).collect();
        let b = covariate_names.len();
        if b > 0 {
            let pb = self.c_beta.len() / b;
            for name in covariate_names {
                out.extend((0..pb).map(|i| label(&format!("c_beta:{name}"), i)));
            }
        }
        for name in ["g", "v", "theta"] {
            out.extend((0..self.p()).map(|j| label(name, j)));
        }
        out
    }

    /// Coefficients of covariate `j`.
    pub fn beta_block(&self, j: usize, p_beta: usize) -> DVector<f64> {
        self.c_beta.rows(j * p_beta, p_beta).into_owned()
    }

    pub fn sigma2(&self, bt: &BasisTriple, h: f64) -> Result<f64> {
        let phi = bt.sigma.eval(h)?;
        Ok(dot(&phi, self.c_eps.as_slice()).exp())
    }

    pub fn beta(&self, bt: &BasisTriple, j: usize, h: f64) -> Result<f64> {
        let phi = bt.beta.eval(h)?;
        let pb = phi.len();
        Ok(dot(&phi, &self.c_beta.as_slice()[j * pb..(j + 1) * pb]))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Basis evaluations for one dataset, independent of the parameters.
#[derive(Debug, Clone)]
pub struct Design {
    pub n_sites: usize,
    pub p_z: usize,
    pub p_beta: usize,
    pub p_sigma: usize,
    pub n_covariates: usize,
    pub dist: DMatrix<f64>,
    steps: Vec<DesignStep>,
    /// `sum phi_sigma phi_sigma'` over observed rows.
    sigma_gram: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct DesignStep {
    y: Vec<f64>,
    blocks: Vec<usize>,
    phi_z: DMatrix<f64>,
    x_tilde: DMatrix<f64>,
    phi_sigma: DMatrix<f64>,
}

impl Design {
    pub fn new(ds: &ProfileDataset, bt: &BasisTriple) -> Result<Self> {
        if bt.range() != ds.domain {
            return Err(Error::Build(format!(
                "basis range {:?} differs from the dataset domain {:?}",
                bt.range(),
                ds.domain
            )));
        }
        let (p_z, p_beta, p_sigma) = (bt.z.count(), bt.beta.count(), bt.sigma.count());
        let b = ds.n_covariates();
        let mut phi_z_row = vec![0.0; p_z];
        let mut phi_b_row = vec![0.0; p_beta];
        let mut phi_s_row = vec![0.0; p_sigma];
        let mut sigma_gram = DMatrix::zeros(p_sigma, p_sigma);
        let mut steps = Vec::with_capacity(ds.t_len);
        for recs in ds.by_time() {
            let rows: usize = recs.iter().map(|&i| ds.records[i].len()).sum();
            let mut st = DesignStep {
                y: Vec::with_capacity(rows),
                blocks: Vec::with_capacity(rows),
                phi_z: DMatrix::zeros(rows, p_z),
                x_tilde: DMatrix::zeros(rows, p_beta * b),
                phi_sigma: DMatrix::zeros(rows, p_sigma),
            };
            let mut r = 0;
            for &i in &recs {
                let rec = &ds.records[i];
                for (k, &h) in rec.h.iter().enumerate() {
                    bt.z.eval_into(h, &mut phi_z_row)?;
                    bt.beta.eval_into(h, &mut phi_b_row)?;
                    bt.sigma.eval_into(h, &mut phi_s_row)?;
                    st.y.push(rec.y[k]);
                    st.blocks.push(rec.site);
                    for (a, v) in phi_z_row.iter().enumerate() {
                        st.phi_z[(r, a)] = *v;
                    }
                    for (j, x) in rec.covariates.iter().enumerate() {
                        for (a, v) in phi_b_row.iter().enumerate() {
                            st.x_tilde[(r, j * p_beta + a)] = x[k] * v;
                        }
                    }
                    for (a, v) in phi_s_row.iter().enumerate() {
                        st.phi_sigma[(r, a)] = *v;
                    }
                    if !rec.y[k].is_nan() {
                        for a in 0..p_sigma {
                            for c in 0..p_sigma {
                                sigma_gram[(a, c)] += phi_s_row[a] * phi_s_row[c];
                            }
                        }
                    }
                    r += 1;
                }
            }
            steps.push(st);
        }
        Ok(Design {
            n_sites: ds.n_sites(),
            p_z,
            p_beta,
            p_sigma,
            n_covariates: b,
            dist: distance_matrix(&ds.sites)?,
            steps,
            sigma_gram,
        })
    }

    pub fn t_len(&self) -> usize {
        self.steps.len()
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        if params.c_eps.len() != self.p_sigma {
            return Err(Error::Build(format!(
                "c_eps has {} entries, the sigma basis has {}",
                params.c_eps.len(),
                self.p_sigma
            )));
        }
        if params.c_beta.len() != self.p_beta * self.n_covariates {
            return Err(Error::Build(format!(
                "c_beta has {} entries, expected {} covariates x {} basis functions",
                params.c_beta.len(),
                self.n_covariates,
                self.p_beta
            )));
        }
        if params.p() != self.p_z {
            return Err(Error::Build(format!(
                "latent parameters cover {} basis functions, the z basis has {}",
                params.p(),
                self.p_z
            )));
        }
        Ok(())
    }

    /// Transition diagonal and innovation covariance, site-major.
    pub fn dynamics(&self, params: &ModelParams) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check(params)?;
        let p = self.p_z;
        let gamma = site_major(&innovation_covariance(&self.dist, &params.sp)?);
        let transition = DVector::from_fn(self.n_sites * p, |i, _| params.g[i % p]);
        Ok((transition, gamma))
    }

    /// Observations at time `t` (1-based) under `params`.
    pub fn step(&self, t: usize, params: &ModelParams) -> TimeStep {
        let st = &self.steps[t - 1];
        let offset = &st.x_tilde * &params.c_beta;
        let variance = (&st.phi_sigma * &params.c_eps).map(f64::exp);
        TimeStep {
            y: st.y.clone(),
            blocks: st.blocks.clone(),
            phi: st.phi_z.clone(),
            offset: offset.as_slice().to_vec(),
            variance: variance.as_slice().to_vec(),
        }
    }

    pub fn system(&self, params: &ModelParams) -> Result<StateSpaceSystem> {
        let (transition, gamma) = self.dynamics(params)?;
        let n = self.n_sites * self.p_z;
        Ok(StateSpaceSystem {
            n_blocks: self.n_sites,
            block_dim: self.p_z,
            transition,
            init_mean: DVector::zeros(n),
            init_cov: gamma.clone(),
            innovation_cov: gamma,
            steps: (1..=self.t_len()).map(|t| self.step(t, params)).collect(),
        })
    }
}

/// Assembles the state-space form of the model for `ds`.
pub fn build_system(
    ds: &ProfileDataset,
    bt: &BasisTriple,
    params: &ModelParams,
) -> Result<StateSpaceSystem> {
    Design::new(ds, bt)?.system(params)
}

fn spd_solve(m: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    Cholesky::new(m).map(|c| c.solve(rhs))
}

fn well_conditioned(m: &DMatrix<f64>) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let ev = m.clone().symmetric_eigen().eigenvalues;
    let max = ev.max();
    let min = ev.min();
    max > 0.0 && min > 1e-10 * max
}

/// Starting values: pooled least squares for `c_beta`, least squares of
/// log squared residuals for `c_eps`, `g = 0.5`, `v` the residual
/// variance and `theta` a quarter of the largest site distance.
pub fn initialize(ds: &ProfileDataset, bt: &BasisTriple) -> Result<ModelParams> {
    if ds.n_observations() == 0 {
        return Err(Error::Initialization("dataset has no observations".into()));
    }
    let design = Design::new(ds, bt)?;
    let nb = design.p_beta * design.n_covariates;
    let ps = design.p_sigma;
    let mut xtx = DMatrix::zeros(nb, nb);
    let mut xty = DVector::zeros(nb);
    for st in &design.steps {
        for r in (0..st.y.len()).filter(|&r| !st.y[r].is_nan()) {
            let x = st.x_tilde.row(r);
            for a in 0..nb {
                xty[a] += x[a] * st.y[r];
                for c in 0..nb {
                    xtx[(a, c)] += x[a] * x[c];
                }
            }
        }
    }
    if !well_conditioned(&xtx) {
        return Err(Error::Initialization(
            "covariate design is rank deficient; try fewer beta basis functions".into(),
        ));
    }
    let c_beta = if nb == 0 {
        DVector::zeros(0)
    } else {
        spd_solve(xtx, &xty).ok_or_else(|| {
            Error::Initialization(
                "covariate design is rank deficient; try fewer beta basis functions".into(),
            )
        })?
    };

    let mut res = Vec::new();
    let mut sty = DVector::zeros(ps);
    for st in &design.steps {
        for r in (0..st.y.len()).filter(|&r| !st.y[r].is_nan()) {
            let e = st.y[r] - st.x_tilde.row(r).dot(&c_beta.transpose());
            res.push(e);
            let target = (e * e + LOG_FLOOR).ln();
            for a in 0..ps {
                sty[a] += st.phi_sigma[(r, a)] * target;
            }
        }
    }
    if !well_conditioned(&design.sigma_gram) {
        return Err(Error::Initialization(
            "sigma basis is rank deficient on the observed points".into(),
        ));
    }
    let c_eps = spd_solve(design.sigma_gram.clone(), &sty)
        .ok_or_else(|| Error::Initialization("sigma basis is rank deficient".into()))?;

    let m = res.len() as f64;
    let mean = res.iter().sum::<f64>() / m;
    let var = if res.len() > 1 {
        res.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let v = if var > 0.0 { var } else { 1.0 };
    let dmax = max_distance(&design.dist);
    let theta = if dmax > 0.0 { 0.25 * dmax } else { 1.0 };
    let p = design.p_z;
    ModelParams::new(
        c_eps,
        c_beta,
        DVector::from_element(p, 0.5),
        SpatialParams::new(vec![v; p], vec![theta; p])?,
    )
}

#[derive(Debug, Clone)]
pub struct EmOptions {
    /// Relative parameter change below which iteration stops.
    pub exit_toll_par: f64,
    /// Relative loglik change below which iteration stops.
    pub exit_toll_loglike: f64,
    pub max_iterations: usize,
    pub partitions: Option<Partitioning>,
    pub workers: usize,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            exit_toll_par: 1e-4,
            exit_toll_loglike: 1e-4,
            max_iterations: 100,
            partitions: None,
            workers: 1,
            seed: 0,
        }
    }
}

impl EmOptions {
    fn validate(&self) -> Result<()> {
        if !(self.exit_toll_par > 0.0 && self.exit_toll_loglike > 0.0) {
            return Err(Error::Argument("EM tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Argument("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitReason {
    ParToll,
    LoglikToll,
    MaxIter,
}

impl fmt::Display for ExitReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExitReason::ParToll => "par_toll",
            ExitReason::LoglikToll => "loglik_toll",
            ExitReason::MaxIter => "max_iter",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Loglik at the starting values, then after every iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub exit_reason: ExitReason,
    /// Smoothed moments at `params`, site-major over all sites. Moments
    /// across different partitions are zero.
    pub smoother: SmootherOutput,
    /// Site indices of each partition; a single entry when unpartitioned.
    pub blocks: Vec<Vec<usize>>,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

/// A dataset split into independent sub-models, ready for repeated
/// likelihood evaluation.
#[derive(Debug, Clone)]
pub struct Model {
    pub blocks: Vec<Vec<usize>>,
    pub designs: Vec<Design>,
    pub n_sites: usize,
    pub t_len: usize,
    /// Largest distance between any two sites of the whole dataset.
    pub dmax: f64,
}

/// Smoothed moments and sufficient statistics of each sub-model.
#[derive(Debug, Clone)]
pub struct EStep {
    pub parts: Vec<(SmootherOutput, SufficientStats)>,
    pub loglik: f64,
}

impl Model {
    pub fn new(
        ds: &ProfileDataset,
        bt: &BasisTriple,
        partitions: Option<&Partitioning>,
    ) -> Result<Self> {
        let blocks = match partitions {
            None => vec![(0..ds.n_sites()).collect()],
            Some(part) => part
                .members()
                .into_iter()
                .filter(|m| !m.is_empty())
                .collect(),
        };
        Self::with_blocks(ds, bt, blocks)
    }

    /// A model whose sub-models are the given site groups, which must
    /// cover every site exactly once.
    pub fn with_blocks(
        ds: &ProfileDataset,
        bt: &BasisTriple,
        blocks: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let mut seen = vec![false; ds.n_sites()];
        for &i in blocks.iter().flatten() {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Argument(format!(
                    "site {i} is out of range or repeated"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Argument(
                "site groups do not cover every site".into(),
            ));
        }
        let dmax = max_distance(&distance_matrix(&ds.sites)?);
        let designs = if blocks.len() == 1 && blocks[0].iter().enumerate().all(|(a, &b)| a == b) {
            vec![Design::new(ds, bt)?]
        } else {
            blocks
                .iter()
                .map(|b| Design::new(&ds.subset_sites(b), bt))
                .collect::<Result<_>>()?
        };
        Ok(Model {
            blocks,
            designs,
            n_sites: ds.n_sites(),
            t_len: ds.t_len,
            dmax,
        })
    }

    pub fn systems(&self, params: &ModelParams) -> Result<Vec<StateSpaceSystem>> {
        self.designs.iter().map(|d| d.system(params)).collect()
    }

    /// Per-time loglik contributions summed over sub-models in block order.
    pub fn loglik_terms(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let mut total = vec![0.0; self.t_len];
        for d in &self.designs {
            for (acc, x) in total.iter_mut().zip(loglik_terms(&d.system(params)?)?) {
                *acc += x;
            }
        }
        Ok(total)
    }

    pub fn loglik(&self, params: &ModelParams) -> Result<f64> {
        Ok(self.loglik_terms(params)?.iter().sum())
    }

    pub fn estep(&self, params: &ModelParams, exec: &Executor) -> Result<EStep> {
        let parts = exec
            .map(&self.designs, |d| {
                let sys = d.system(params)?;
                let out = kalman_smoother(&sys)?;
                let stats = expected_sufficient_stats(&sys, &out);
                Ok((out, stats))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let loglik = parts.iter().map(|(o, _)| o.loglik).sum();
        Ok(EStep { parts, loglik })
    }

    pub fn mstep(&self, params: &ModelParams, e: &EStep) -> Result<ModelParams> {
        let d0 = &self.designs[0];
        let (p_sigma, nb) = (d0.p_sigma, d0.p_beta * d0.n_covariates);

        // Covariate coefficients: weighted least squares of y - phi' E[z].
        let mut c_beta = params.c_beta.clone();
        if nb > 0 {
            let mut a = DMatrix::zeros(nb, nb);
            let mut rhs = DVector::zeros(nb);
            for (d, (_, stats)) in self.designs.iter().zip(&e.parts) {
                for (st, res) in d.steps.iter().zip(&stats.residuals) {
                    let var = (&st.phi_sigma * &params.c_eps).map(f64::exp);
                    for (r, m) in res.iter().enumerate() {
                        let Some(m) = m else { continue };
                        let x = st.x_tilde.row(r);
                        let target = m.mean + x.dot(&params.c_beta.transpose());
                        let w = 1.0 / var[r];
                        for i in 0..nb {
                            rhs[i] += w * x[i] * target;
                            for j in 0..nb {
                                a[(i, j)] += w * x[i] * x[j];
                            }
                        }
                    }
                }
            }
            if let Some(sol) = spd_solve(a, &rhs) {
                c_beta = sol;
            }
        }
        let shift = &c_beta - &params.c_beta;

        // Log-variance coefficients: one scoring step, halved until the
        // objective does not decrease.
        let mut phis: Vec<(DVector<f64>, f64)> = Vec::new();
        for (d, (_, stats)) in self.designs.iter().zip(&e.parts) {
            for (st, res) in d.steps.iter().zip(&stats.residuals) {
                for (r, m) in res.iter().enumerate() {
                    let Some(m) = m else { continue };
                    let e = m.mean - st.x_tilde.row(r).dot(&shift.transpose());
                    phis.push((st.phi_sigma.row(r).transpose(), e * e + m.var));
                }
            }
        }
        let q_sigma = |c: &DVector<f64>| -> f64 {
            phis.iter()
                .map(|(phi, m)| {
                    let u = phi.dot(c);
                    -0.5 * (u + m * (-u).exp())
                })
                .sum()
        };
        let mut grad = DVector::zeros(p_sigma);
        let mut gram = DMatrix::zeros(p_sigma, p_sigma);
        for d in &self.designs {
            gram += &d.sigma_gram;
        }
        for (phi, m) in &phis {
            let u = phi.dot(&params.c_eps);
            grad += phi * (m * (-u).exp() - 1.0);
        }
        let mut c_eps = params.c_eps.clone();
        if let Some(step) = spd_solve(gram, &grad) {
            let q0 = q_sigma(&params.c_eps);
            let mut alpha = 1.0;
            for _ in 0..40 {
                let cand = &params.c_eps + &step * alpha;
                let q = q_sigma(&cand);
                if q.is_finite() && q >= q0 {
                    c_eps = cand;
                    break;
                }
                alpha *= 0.5;
            }
        }

        // Latent dynamics, one basis function at a time.
        let p = params.p();
        let mut g = params.g.clone();
        let mut v = params.sp.v.clone();
        let mut theta = params.sp.theta.clone();
        let lo = (THETA_BRACKET.0 * self.dmax).ln();
        let hi = (THETA_BRACKET.1 * self.dmax).ln();
        let searchable = self.blocks.iter().any(|b| b.len() > 1) && self.dmax > 0.0;
        for j in 0..p {
            let lat = LatentBlock::new(self, e, j);
            let current = lat.profile(params.sp.theta[j]);
            let mut best = (params.sp.theta[j], current);
            if searchable {
                let cand_theta =
                    golden_section(|x| lat.profile(x.exp()).0, lo, hi, THETA_TOL).exp();
                let cand = lat.profile(cand_theta);
                if cand.0 > best.1 .0 {
                    best = (cand_theta, cand);
                }
            }
            let (th, (q, gj, vj)) = best;
            if !q.is_finite() {
                return Err(Error::Numerical {
                    t: 0,
                    msg: format!("latent objective for basis {j} is not finite"),
                });
            }
            theta[j] = th;
            g[j] = gj;
            v[j] = vj;
        }
        ModelParams::new(c_eps, c_beta, g, SpatialParams::new(v, theta)?)
    }

    /// Places per-block smoother output into site-major full-size arrays.
    pub fn reassemble(&self, e: &EStep) -> SmootherOutput {
        if self.blocks.len() == 1 {
            return e.parts[0].0.clone();
        }
        let p = self.designs[0].p_z;
        let s = self.n_sites * p;
        let idx: Vec<Vec<usize>> = self
            .blocks
            .iter()
            .map(|b| {
                b.iter()
                    .flat_map(|&i| (0..p).map(move |j| i * p + j))
                    .collect()
            })
            .collect();
        let vecs = |get: &dyn Fn(&SmootherOutput) -> &Vec<DVector<f64>>, len: usize| {
            (0..len)
                .map(|t| {
                    let mut out = DVector::zeros(s);
                    for (k, (o, _)) in e.parts.iter().enumerate() {
                        for (a, &ia) in idx[k].iter().enumerate() {
                            out[ia] = get(o)[t][a];
                        }
                    }
                    out
                })
                .collect::<Vec<_>>()
        };
        let mats = |get: &dyn Fn(&SmootherOutput) -> &Vec<DMatrix<f64>>, len: usize| {
            (0..len)
                .map(|t| {
                    let mut out = DMatrix::zeros(s, s);
                    for (k, (o, _)) in e.parts.iter().enumerate() {
                        let m = &get(o)[t];
                        for (a, &ia) in idx[k].iter().enumerate() {
                            for (c, &ic) in idx[k].iter().enumerate() {
                                out[(ia, ic)] = m[(a, c)];
                            }
                        }
                    }
                    out
                })
                .collect::<Vec<_>>()
        };
        let tl = self.t_len;
        let mut terms = vec![0.0; tl];
        for (o, _) in &e.parts {
            for (acc, x) in terms.iter_mut().zip(&o.loglik_terms) {
                *acc += x;
            }
        }
        SmootherOutput {
            z_smooth: vecs(&|o| &o.z_smooth, tl + 1),
            p_smooth: mats(&|o| &o.p_smooth, tl + 1),
            p_lag: mats(&|o| &o.p_lag, tl),
            loglik_terms: terms,
            loglik: e.loglik,
        }
    }
}

/// Per-block statistics of one latent basis function.
struct LatentBlock<'a> {
    dists: Vec<&'a DMatrix<f64>>,
    s11: Vec<DMatrix<f64>>,
    s10: Vec<DMatrix<f64>>,
    s00: Vec<DMatrix<f64>>,
    z0: Vec<DMatrix<f64>>,
    n: usize,
    count: f64,
}

fn basis_slice(m: &DMatrix<f64>, p: usize, j: usize) -> DMatrix<f64> {
    let n = m.nrows() / p;
    DMatrix::from_fn(n, n, |a, b| m[(a * p + j, b * p + j)])
}

fn trace_solve(ch: &Cholesky<f64, Dyn>, m: &DMatrix<f64>) -> f64 {
    ch.solve(m).trace()
}

impl<'a> LatentBlock<'a> {
    fn new(model: &'a Model, e: &EStep, j: usize) -> Self {
        let p = model.designs[0].p_z;
        let mut lb = LatentBlock {
            dists: model.designs.iter().map(|d| &d.dist).collect(),
            s11: Vec::new(),
            s10: Vec::new(),
            s00: Vec::new(),
            z0: Vec::new(),
            n: model.n_sites,
            count: (model.t_len + 1) as f64,
        };
        for (_, st) in &e.parts {
            lb.s11.push(basis_slice(&st.s11, p, j));
            lb.s10.push(basis_slice(&st.s10, p, j));
            lb.s00.push(basis_slice(&st.s00, p, j));
            lb.z0.push(basis_slice(&st.z0, p, j));
        }
        lb
    }

    /// Objective with `g` and `v` maximized out at this `theta`, with the
    /// maximizing `g` and `v`.
    fn profile(&self, theta: f64) -> (f64, f64, f64) {
        let fail = (f64::NEG_INFINITY, 0.0, 1.0);
        let mut chols = Vec::with_capacity(self.dists.len());
        let mut log_det = 0.0;
        for d in &self.dists {
            let Some(ch) = Cholesky::new(correlation_matrix(d, theta)) else {
                return fail;
            };
            log_det += 2.0 * ch.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            chols.push(ch);
        }
        let (mut a, mut b) = (0.0, 0.0);
        for (k, ch) in chols.iter().enumerate() {
            a += trace_solve(ch, &self.s10[k]);
            b += trace_solve(ch, &self.s00[k]);
        }
        let g = if b > 0.0 {
            (a / b).clamp(-G_BOUND, G_BOUND)
        } else {
            0.0
        };
        let mut tr = 0.0;
        for (k, ch) in chols.iter().enumerate() {
            let s10 = &self.s10[k];
            let m =
                &self.s11[k] - (s10 + s10.transpose()) * g + &self.s00[k] * (g * g) + &self.z0[k];
            tr += trace_solve(ch, &m);
        }
        let n = self.n as f64;
        let v = tr / (n * self.count);
        if !(v > 0.0 && v.is_finite()) {
            return fail;
        }
        let q = -0.5 * self.count * (n * v.ln() + log_det) - 0.5 * n * self.count;
        (q, g, v)
    }
}

/// Maximizer of `f` on `[lo, hi]` by golden-section search.
fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        c
    } else {
        d
    }
}

fn max_relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(o, n)| (n - o).abs() / n.abs().max(1e-12))
        .fold(0.0, f64::max)
}

/// Runs EM from `init` until one of the exit rules holds.
pub fn em_fit(
    ds: &ProfileDataset,
    bt: &BasisTriple,
    init: &ModelParams,
    opts: &EmOptions,
) -> Result<FitResult> {
    opts.validate()?;
    if let Some(part) = &opts.partitions {
        if part.assignment.len() != ds.n_sites() {
            return Err(Error::Argument(format!(
                "partitioning covers {} sites, dataset has {}",
                part.assignment.len(),
                ds.n_sites()
            )));
        }
    }
    let model = Model::new(ds, bt, opts.partitions.as_ref())?;
    em_fit_model(
        &model,
        init,
        opts.exit_toll_par,
        opts.exit_toll_loglike,
        opts.max_iterations,
        &Executor::new(opts.workers),
    )
}

/// EM on a prepared model.
pub fn em_fit_model(
    model: &Model,
    init: &ModelParams,
    toll_par: f64,
    toll_loglik: f64,
    max_iterations: usize,
    exec: &Executor,
) -> Result<FitResult> {
    let mut params = init.clone();
    let mut e = model.estep(&params, exec)?;
    let mut trace = vec![e.loglik];
    let mut iterations = 0;
    let exit_reason = loop {
        iterations += 1;
        let next = model.mstep(&params, &e).map_err(|err| Error::EmFailure {
            iteration: iterations,
            msg: err.to_string(),
            trace: trace.clone(),
        })?;
        if next.to_vec().iter().any(|x| !x.is_finite()) {
            return Err(Error::EmFailure {
                iteration: iterations,
                msg: "non-finite parameter".into(),
                trace,
            });
        }
        let par_change = max_relative_change(&params.to_vec(), &next.to_vec());
        params = next;
        e = model.estep(&params, exec).map_err(|err| Error::EmFailure {
            iteration: iterations,
            msg: err.to_string(),
            trace: trace.clone(),
        })?;
        let prev = *trace.last().expect("non-empty");
        trace.push(e.loglik);
        if e.loglik < prev - DECREASE_TOL {
            return Err(Error::EmFailure {
                iteration: iterations,
                msg: format!("loglik decreased from {prev} to {}", e.loglik),
                trace,
            });
        }
        log::debug!("EM iteration {iterations}: loglik {}", e.loglik);
        if par_change < toll_par {
            break ExitReason::ParToll;
        }
        if (e.loglik - prev).abs() / e.loglik.abs().max(f64::MIN_POSITIVE) < toll_loglik {
            break ExitReason::LoglikToll;
        }
        if iterations >= max_iterations {
            break ExitReason::MaxIter;
        }
    };
    Ok(FitResult {
        smoother: model.reassemble(&e),
        params,
        loglik_trace: trace,
        iterations,
        exit_reason,
        blocks: model.blocks.clone(),
    })
}

/// Draws a dataset with the layout of `template` (sites, times, `h`
/// points, covariates and missing pattern) from the model at `params`.
pub fn simulate(
    template: &ProfileDataset,
    bt: &BasisTriple,
    params: &ModelParams,
    seed: u64,
) -> Result<ProfileDataset> {
    let design = Design::new(template, bt)?;
    design.check(params)?;
    let (n, p) = (design.n_sites, design.p_z);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chols: Vec<DMatrix<f64>> = innovation_covariance(&design.dist, &params.sp)?
        .into_iter()
        .map(|m| {
            Cholesky::new(m).map(|c| c.l()).ok_or_else(|| {
                Error::Degenerate("innovation covariance is not positive definite".into())
            })
        })
        .collect::<Result<_>>()?;
    let draw = |rng: &mut ChaCha8Rng| -> DMatrix<f64> {
        // n x p, column j drawn with covariance v_j R_j.
        let mut out = DMatrix::zeros(n, p);
        for (j, l) in chols.iter().enumerate() {
            let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
            out.set_column(j, &(l * xi));
        }
        out
    };
    let mut z = draw(&mut rng);
    let mut states = Vec::with_capacity(template.t_len);
    for _ in 0..template.t_len {
        let eta = draw(&mut rng);
        let mut next = eta;
        for j in 0..p {
            for i in 0..n {
                next[(i, j)] += params.g[j] * z[(i, j)];
            }
        }
        states.push(next.clone());
        z = next;
    }
    let mut records = template.records.clone();
    for rec in &mut records {
        let zt = &states[rec.time - 1];
        for k in 0..rec.h.len() {
            if rec.y[k].is_nan() {
                continue;
            }
            let h = rec.h[k];
            let phi_z = bt.z.eval(h)?;
            let mut y = 0.0;
            for (j, x) in rec.covariates.iter().enumerate() {
                y += x[k] * params.beta(bt, j, h)?;
            }
            for (j, f) in phi_z.iter().enumerate() {
                y += f * zt[(rec.site, j)];
            }
            let sd = params.sigma2(bt, h)?.sqrt();
            let e: f64 = StandardNormal.sample(&mut rng);
            rec.y[k] = y + sd * e;
        }
    }
    let mut out = template.clone();
    out.records = records;
    Ok(out)
}

/// A synthetic layout: sites drawn uniformly in a square, every site
/// observed at every time on a common set of `h` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n_sites: usize,
    pub t_len: usize,
    pub h_points: Vec<f64>,
    pub domain: (f64, f64),
    /// Covariate 0 is the constant 1; the rest are standard normal draws.
    pub n_covariates: usize,
    pub unit: Unit,
    /// Side of the square holding the sites (degrees for `Unit::Deg`,
    /// centred on the origin).
    pub extent: f64,
}

impl Layout {
    pub fn generate(&self, seed: u64) -> Result<ProfileDataset> {
        if self.n_sites == 0 || self.t_len == 0 || self.h_points.is_empty() {
            return Err(Error::Argument(
                "layout needs sites, times and h points".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = Uniform::new(0.0, self.extent)
            .map_err(|e| Error::Argument(format!("invalid extent: {e}")))?;
        let sites: Vec<Coordinate> = (0..self.n_sites)
            .map(|_| {
                let (a, b) = (side.sample(&mut rng), side.sample(&mut rng));
                match self.unit {
                    Unit::Deg => Coordinate::deg(a - self.extent / 2.0, b - self.extent / 2.0),
                    u => Coordinate::planar(a, b, u),
                }
            })
            .collect();
        let names: Vec<String> = (0..self.n_covariates)
            .map(|j| {
                if j == 0 {
                    "const".to_string()
                } else {
                    format!("x{j}")
                }
            })
            .collect();
        let q = self.h_points.len();
        let mut records = Vec::with_capacity(self.n_sites * self.t_len);
        for site in 0..self.n_sites {
            for time in 1..=self.t_len {
                let covariates = (0..self.n_covariates)
                    .map(|j| {
                        if j == 0 {
                            vec![1.0; q]
                        } else {
                            (0..q).map(|_| StandardNormal.sample(&mut rng)).collect()
                        }
                    })
                    .collect();
                records.push(ProfileRecord {
                    site,
                    time,
                    h: self.h_points.clone(),
                    y: vec![0.0; q],
                    covariates,
                });
            }
        }
        let (ds, _) =
            ProfileDataset::new(sites, records, self.t_len, self.domain, names, self.unit)?;
        Ok(ds)
    }
}

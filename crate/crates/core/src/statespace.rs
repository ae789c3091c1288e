//! Kalman filtering and Rauch-Tung-Striebel smoothing for block-structured
//! observation designs.
//!
//! The state is `n` blocks of `p` coefficients (site-major). Each observed
//! row loads on exactly one block, so `Phi' R^-1 Phi` is block diagonal and
//! the update runs in information form: cost is cubic in the state size and
//! linear in the number of rows. Missing rows (`NaN`) are deleted before the
//! update; a step with nothing observed only predicts.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Observation rows at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeStep {
    /// `NaN` marks a missing value.
    pub y: Vec<f64>,
    /// State block each row loads on.
    pub blocks: Vec<usize>,
    /// `rows x p`; row `r` holds the coefficients on block `blocks[r]`.
    pub phi: DMatrix<f64>,
    pub offset: Vec<f64>,
    pub variance: Vec<f64>,
}

impl TimeStep {
    pub fn empty(p: usize) -> Self {
        TimeStep {
            y: Vec::new(),
            blocks: Vec::new(),
            phi: DMatrix::zeros(0, p),
            offset: Vec::new(),
            variance: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    fn observed_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.y.len()).filter(|&r| !self.y[r].is_nan())
    }
}

/// `z_t = diag(transition) z_{t-1} + eta_t`, `eta_t ~ N(0, innovation_cov)`,
/// `y_t = offset_t + Phi_t z_t + eps_t`, `eps_t ~ N(0, diag(variance_t))`.
#[derive(Debug, Clone)]
pub struct StateSpaceSystem {
    pub n_blocks: usize,
    pub block_dim: usize,
    pub transition: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    /// Entry `t - 1` holds the observations at time `t`.
    pub steps: Vec<TimeStep>,
}

impl StateSpaceSystem {
    pub fn state_dim(&self) -> usize {
        self.n_blocks * self.block_dim
    }

    pub fn t_len(&self) -> usize {
        self.steps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.state_dim();
        let bad = |m: String| Err(Error::Build(m));
        if self.transition.len() != s
            || self.innovation_cov.shape() != (s, s)
            || self.init_mean.len() != s
            || self.init_cov.shape() != (s, s)
        {
            return bad(format!("state matrices must all have dimension {s}"));
        }
        for (t, st) in self.steps.iter().enumerate() {
            let r = st.y.len();
            if st.blocks.len() != r
                || st.phi.nrows() != r
                || st.phi.ncols() != self.block_dim
                || st.offset.len() != r
                || st.variance.len() != r
            {
                return bad(format!(
                    "observation arrays at t = {} disagree in length",
                    t + 1
                ));
            }
            if st.blocks.iter().any(|&b| b >= self.n_blocks) {
                return bad(format!("block index out of range at t = {}", t + 1));
            }
            if st.variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad(format!(
                    "measurement variances must be positive at t = {}",
                    t + 1
                ));
            }
        }
        Ok(())
    }
}

/// Everything produced by one predict/update step.
#[derive(Debug, Clone)]
pub struct StepMoments {
    pub pred_mean: DVector<f64>,
    pub pred_cov: DMatrix<f64>,
    /// Inverse of `pred_cov`.
    pub pred_precision: DMatrix<f64>,
    pub filt_mean: DVector<f64>,
    pub filt_cov: DMatrix<f64>,
    pub loglik: f64,
    pub observed: usize,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn cholesky(m: DMatrix<f64>, t: usize, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Numerical {
        t,
        msg: format!("{what} is not positive definite"),
    })
}

fn log_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// One predict/update step from the filtered moments at `t - 1`.
pub fn filter_step(
    sys: &StateSpaceSystem,
    t: usize,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<StepMoments> {
    filter_update(
        &sys.transition,
        &sys.innovation_cov,
        sys.block_dim,
        &sys.steps[t - 1],
        t,
        mean,
        cov,
    )
}

/// [`filter_step`] with the dynamics and the observations at `t` given
/// separately, for callers that build steps on the fly.
pub fn filter_update(
    g: &DVector<f64>,
    innovation_cov: &DMatrix<f64>,
    p: usize,
    step: &TimeStep,
    t: usize,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<StepMoments> {
    let s = g.len();
    let pred_mean = mean.component_mul(g);
    let mut pred_cov = DMatrix::from_fn(s, s, |i, j| g[i] * g[j] * cov[(i, j)]);
    pred_cov += innovation_cov;
    symmetrize(&mut pred_cov);
    let ch_pred = cholesky(pred_cov.clone(), t, "predicted covariance")?;
    let mut pred_precision = ch_pred.inverse();
    symmetrize(&mut pred_precision);

    let mut info = pred_precision.clone();
    let mut w = DVector::zeros(s);
    let mut quad = 0.0;
    let mut log_r = 0.0;
    let mut observed = 0;
    for r in step.observed_rows() {
        let b = step.blocks[r] * p;
        let var = step.variance[r];
        let phi = step.phi.row(r);
        let mut fit = step.offset[r];
        for a in 0..p {
            fit += phi[a] * pred_mean[b + a];
        }
        let e = step.y[r] - fit;
        quad += e * e / var;
        log_r += var.ln();
        for a in 0..p {
            w[b + a] += phi[a] * e / var;
            for c in 0..p {
                info[(b + a, b + c)] += phi[a] * phi[c] / var;
            }
        }
        observed += 1;
    }
    if observed == 0 {
        return Ok(StepMoments {
            filt_mean: pred_mean.clone(),
            filt_cov: pred_cov.clone(),
            pred_mean,
            pred_cov,
            pred_precision,
            loglik: 0.0,
            observed: 0,
        });
    }
    let ch_info = cholesky(info, t, "posterior information")?;
    let gain = ch_info.solve(&w);
    let mut filt_cov = ch_info.inverse();
    symmetrize(&mut filt_cov);
    let filt_mean = &pred_mean + &gain;
    let log_det_s = log_r + log_det(&ch_pred) + log_det(&ch_info);
    let quad_s = quad - w.dot(&gain);
    let loglik = -0.5 * (observed as f64 * LN_2PI + log_det_s + quad_s);
    if !loglik.is_finite() || filt_mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            t,
            msg: "non-finite filter output".into(),
        });
    }
    Ok(StepMoments {
        pred_mean,
        pred_cov,
        pred_precision,
        filt_mean,
        filt_cov,
        loglik,
        observed,
    })
}

/// Filtered moments for `t = 0..=T` (entry 0 is the prior) and the
/// innovations log-likelihood.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub filt_mean: Vec<DVector<f64>>,
    pub filt_cov: Vec<DMatrix<f64>>,
    /// Per-time log-likelihood contributions, entry `t - 1` for time `t`.
    pub loglik_terms: Vec<f64>,
    pub loglik: f64,
}

pub fn kalman_filter(sys: &StateSpaceSystem) -> Result<FilterOutput> {
    sys.validate()?;
    let mut filt_mean = vec![sys.init_mean.clone()];
    let mut filt_cov = vec![sys.init_cov.clone()];
    let mut terms = Vec::with_capacity(sys.t_len());
    for t in 1..=sys.t_len() {
        let m = filter_step(sys, t, &filt_mean[t - 1], &filt_cov[t - 1])?;
        terms.push(m.loglik);
        filt_mean.push(m.filt_mean);
        filt_cov.push(m.filt_cov);
    }
    Ok(FilterOutput {
        filt_mean,
        filt_cov,
        loglik: terms.iter().sum(),
        loglik_terms: terms,
    })
}

/// Per-time log-likelihood contributions without storing moments.
pub fn loglik_terms(sys: &StateSpaceSystem) -> Result<Vec<f64>> {
    let mut run = FilterRun::new(sys)?;
    (1..=sys.t_len()).map(|_| run.advance(sys)).collect()
}

/// A filter that can be advanced one step at a time.
#[derive(Debug, Clone)]
pub struct FilterRun {
    t: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl FilterRun {
    pub fn new(sys: &StateSpaceSystem) -> Result<Self> {
        sys.validate()?;
        Ok(FilterRun {
            t: 0,
            mean: sys.init_mean.clone(),
            cov: sys.init_cov.clone(),
        })
    }

    /// Starts from an explicit prior for `z_0`.
    pub fn from_prior(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        FilterRun { t: 0, mean, cov }
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Advances with dynamics and observations supplied by the caller.
    pub fn advance_with(
        &mut self,
        g: &DVector<f64>,
        innovation_cov: &DMatrix<f64>,
        p: usize,
        step: &TimeStep,
    ) -> Result<f64> {
        let m = filter_update(
            g,
            innovation_cov,
            p,
            step,
            self.t + 1,
            &self.mean,
            &self.cov,
        )?;
        self.t += 1;
        self.mean = m.filt_mean;
        self.cov = m.filt_cov;
        Ok(m.loglik)
    }

    /// Advances to the next time and returns its log-likelihood term.
    pub fn advance(&mut self, sys: &StateSpaceSystem) -> Result<f64> {
        let m = filter_step(sys, self.t + 1, &self.mean, &self.cov)?;
        self.t += 1;
        self.mean = m.filt_mean;
        self.cov = m.filt_cov;
        Ok(m.loglik)
    }
}

#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// `E[z_t | Y]` for `t = 0..=T`.
    pub z_smooth: Vec<DVector<f64>>,
    /// `Var[z_t | Y]` for `t = 0..=T`.
    pub p_smooth: Vec<DMatrix<f64>>,
    /// Entry `t - 1` holds `Cov[z_t, z_{t-1} | Y]` for `t = 1..=T`.
    pub p_lag: Vec<DMatrix<f64>>,
    pub loglik_terms: Vec<f64>,
    pub loglik: f64,
}

pub fn kalman_smoother(sys: &StateSpaceSystem) -> Result<SmootherOutput> {
    sys.validate()?;
    let tl = sys.t_len();
    let g = &sys.transition;
    let mut filt_mean = vec![sys.init_mean.clone()];
    let mut filt_cov = vec![sys.init_cov.clone()];
    let mut pred_mean = vec![DVector::zeros(0)];
    let mut pred_cov = vec![DMatrix::zeros(0, 0)];
    let mut pred_prec = vec![DMatrix::zeros(0, 0)];
    let mut terms = Vec::with_capacity(tl);
    for t in 1..=tl {
        let m = filter_step(sys, t, &filt_mean[t - 1], &filt_cov[t - 1])?;
        terms.push(m.loglik);
        filt_mean.push(m.filt_mean);
        filt_cov.push(m.filt_cov);
        pred_mean.push(m.pred_mean);
        pred_cov.push(m.pred_cov);
        pred_prec.push(m.pred_precision);
    }

    let mut z_smooth = filt_mean.clone();
    let mut p_smooth = filt_cov.clone();
    let mut p_lag = vec![DMatrix::zeros(0, 0); tl];
    for t in (0..tl).rev() {
        // J_t = P_{t|t} G' P_{t+1|t}^{-1}
        let mut pg = filt_cov[t].clone();
        for (j, mut col) in pg.column_iter_mut().enumerate() {
            col *= g[j];
        }
        let j_t = &pg * &pred_prec[t + 1];
        let dm = &z_smooth[t + 1] - &pred_mean[t + 1];
        z_smooth[t] = &filt_mean[t] + &j_t * dm;
        let dp = &p_smooth[t + 1] - &pred_cov[t + 1];
        let mut ps = &filt_cov[t] + &j_t * dp * j_t.transpose();
        symmetrize(&mut ps);
        p_lag[t] = &p_smooth[t + 1] * j_t.transpose();
        p_smooth[t] = ps;
    }
    Ok(SmootherOutput {
        z_smooth,
        p_smooth,
        p_lag,
        loglik: terms.iter().sum(),
        loglik_terms: terms,
    })
}

/// Second moment of one observation's residual under the smoothed law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualMoment {
    /// `y - offset - phi' E[z]`.
    pub mean: f64,
    /// `phi' Var[z] phi`.
    pub var: f64,
}

impl ResidualMoment {
    pub fn second_moment(&self) -> f64 {
        self.mean * self.mean + self.var
    }
}

/// Smoothed sufficient statistics over `t = 1..=T`.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// `sum_t E[z_t z_t']`
    pub s11: DMatrix<f64>,
    /// `sum_t E[z_t z_{t-1}']`
    pub s10: DMatrix<f64>,
    /// `sum_t E[z_{t-1} z_{t-1}']`
    pub s00: DMatrix<f64>,
    /// `E[z_0 z_0']`
    pub z0: DMatrix<f64>,
    /// Per time, per row; `None` for missing rows.
    pub residuals: Vec<Vec<Option<ResidualMoment>>>,
}

fn outer_plus(m: &DVector<f64>, n: &DVector<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    m * n.transpose() + c
}

pub fn expected_sufficient_stats(sys: &StateSpaceSystem, out: &SmootherOutput) -> SufficientStats {
    let s = sys.state_dim();
    let p = sys.block_dim;
    let mut s11 = DMatrix::zeros(s, s);
    let mut s10 = DMatrix::zeros(s, s);
    let mut s00 = DMatrix::zeros(s, s);
    for t in 1..=sys.t_len() {
        s11 += outer_plus(&out.z_smooth[t], &out.z_smooth[t], &out.p_smooth[t]);
        s10 += outer_plus(&out.z_smooth[t], &out.z_smooth[t - 1], &out.p_lag[t - 1]);
        s00 += outer_plus(
            &out.z_smooth[t - 1],
            &out.z_smooth[t - 1],
            &out.p_smooth[t - 1],
        );
    }
    let z0 = outer_plus(&out.z_smooth[0], &out.z_smooth[0], &out.p_smooth[0]);
    let residuals = sys
        .steps
        .iter()
        .enumerate()
        .map(|(ti, st)| {
            let z = &out.z_smooth[ti + 1];
            let pm = &out.p_smooth[ti + 1];
            (0..st.rows())
                .map(|r| {
                    if st.y[r].is_nan() {
                        return None;
                    }
                    let b = st.blocks[r] * p;
                    let phi = st.phi.row(r);
                    let mut fit = st.offset[r];
                    let mut var = 0.0;
                    for a in 0..p {
                        fit += phi[a] * z[b + a];
                        for c in 0..p {
                            var += phi[a] * pm[(b + a, b + c)] * phi[c];
                        }
                    }
                    Some(ResidualMoment {
                        mean: st.y[r] - fit,
                        var: var.max(0.0),
                    })
                })
                .collect()
        })
        .collect();
    SufficientStats {
        s11,
        s10,
        s00,
        z0,
        residuals,
    }
}

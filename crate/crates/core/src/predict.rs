//! Kriging of the functional field at new locations and out-of-sample
//! validation.
//!
//! A target is conditioned on the data at its nearest sites. Given the
//! neighbor states, the latent value at a target is their projection plus
//! an AR(1) remainder that is independent of every observation, so one
//! smoother run over a neighbor union serves every target that shares it.
//! Targets are split into contiguous blocks; unions are deduplicated
//! before any smoother runs.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::basis::BasisTriple;
use crate::error::{Error, Result};
use crate::estimation::{Design, ModelParams};
use crate::exec::Executor;
use crate::ingest::{Coordinate, ProfileDataset, Unit};
use crate::spatial::{distance, distance_matrix, exp_correlation};
use crate::statespace::kalman_smoother;

/// Estimation data together with the fitted parameters.
#[derive(Debug, Clone, Copy)]
pub struct KrigingModel<'a> {
    pub ds: &'a ProfileDataset,
    pub bt: &'a BasisTriple,
    pub params: &'a ModelParams,
}

impl<'a> KrigingModel<'a> {
    pub fn new(
        ds: &'a ProfileDataset,
        bt: &'a BasisTriple,
        params: &'a ModelParams,
    ) -> Result<Self> {
        if bt.range() != ds.domain {
            return Err(Error::Build(format!(
                "basis range {:?} differs from the dataset domain {:?}",
                bt.range(),
                ds.domain
            )));
        }
        if params.p() != bt.z.count()
            || params.c_beta.len() != bt.beta.count() * ds.n_covariates()
            || params.c_eps.len() != bt.sigma.count()
        {
            return Err(Error::Build(
                "parameters do not match the basis triple".into(),
            ));
        }
        if ds.n_sites() == 0 {
            return Err(Error::Argument("no estimation sites".into()));
        }
        Ok(KrigingModel { ds, bt, params })
    }

    fn n_sites(&self) -> usize {
        self.ds.n_sites()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    /// First row and column coordinate.
    pub origin: (f64, f64),
    /// Cell size along rows (`lat_or_y`) and columns (`lon_or_x`).
    pub cell: (f64, f64),
}

/// Prediction locations, flattened row-major when they form a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigingGrid {
    pub targets: Vec<Coordinate>,
    pub shape: Option<GridShape>,
}

fn axis(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Argument(format!(
            "invalid grid axis {lo}:{hi}:{step}"
        )));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| lo + i as f64 * step).collect())
}

impl KrigingGrid {
    /// Regular grid; rows run over `lat_or_y`, columns over `lon_or_x`.
    pub fn regular(y: (f64, f64, f64), x: (f64, f64, f64), unit: Unit) -> Result<Self> {
        let ys = axis(y.0, y.1, y.2)?;
        let xs = axis(x.0, x.1, x.2)?;
        let mut targets = Vec::with_capacity(ys.len() * xs.len());
        for &a in &ys {
            for &b in &xs {
                targets.push(Coordinate::new(a, b, unit)?);
            }
        }
        Ok(KrigingGrid {
            shape: Some(GridShape {
                rows: ys.len(),
                cols: xs.len(),
                origin: (y.0, x.0),
                cell: (y.2, x.2),
            }),
            targets,
        })
    }

    pub fn from_targets(targets: Vec<Coordinate>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Argument("no kriging targets".into()));
        }
        Ok(KrigingGrid {
            targets,
            shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingOptions {
    /// Neighbors per target; `None` conditions on every site.
    pub nn_size: Option<usize>,
    /// Targets per block.
    pub block_size: usize,
    pub workers: usize,
    pub compute_variance: bool,
}

impl Default for KrigingOptions {
    fn default() -> Self {
        KrigingOptions {
            nn_size: None,
            block_size: 100,
            workers: 1,
            compute_variance: true,
        }
    }
}

/// Covariate values at the targets, laid out target, time, `h`, covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCovariates {
    values: Vec<f64>,
    dims: [usize; 4],
}

impl TargetCovariates {
    pub fn new(
        values: Vec<f64>,
        targets: usize,
        times: usize,
        h: usize,
        covariates: usize,
    ) -> Result<Self> {
        if values.len() != targets * times * h * covariates {
            return Err(Error::Argument(format!(
                "covariate array has {} values, expected {targets} x {times} x {h} x {covariates}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("target covariates must be finite".into()));
        }
        Ok(TargetCovariates {
            values,
            dims: [targets, times, h, covariates],
        })
    }

    pub fn get(&self, target: usize, time: usize, h: usize) -> &[f64] {
        let [_, nt, nh, b] = self.dims;
        let start = ((target * nt + time) * nh + h) * b;
        &self.values[start..start + b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingResult {
    pub targets: Vec<Coordinate>,
    pub times: Vec<usize>,
    pub h: Vec<f64>,
    /// Indexed by [`KrigingResult::index`].
    pub f_hat: Vec<f64>,
    pub var_f: Option<Vec<f64>>,
    /// Latent mean per target and time, entry `i * times.len() + k`.
    pub z_hat: Vec<DVector<f64>>,
    pub z_cov: Option<Vec<DMatrix<f64>>>,
}

impl KrigingResult {
    pub fn index(&self, target: usize, time: usize, h: usize) -> usize {
        (target * self.times.len() + time) * self.h.len() + h
    }
}

/// Indices of the `nn_size` sites closest to `target`, nearest first and
/// ties to the lower index.
pub fn nearest_neighbors(
    sites: &[Coordinate],
    target: &Coordinate,
    nn_size: usize,
) -> Result<Vec<usize>> {
    let mut d = sites
        .iter()
        .enumerate()
        .map(|(i, s)| distance(s, target).map(|d| (d, i)))
        .collect::<Result<Vec<_>>>()?;
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d.into_iter().take(nn_size).map(|(_, i)| i).collect())
}

/// Smoothed neighbor-union states at the requested times.
struct UnionFit {
    sites: Vec<usize>,
    z: Vec<DVector<f64>>,
    cov: Vec<DMatrix<f64>>,
    /// Correlation factor among the union sites, per latent basis.
    chol: Vec<Cholesky<f64, Dyn>>,
}

fn fit_union(
    model: &KrigingModel,
    sites: &[usize],
    times: &[usize],
    variance: bool,
) -> Result<UnionFit> {
    let sub = model.ds.subset_sites(sites);
    let sys = Design::new(&sub, model.bt)?.system(model.params)?;
    let sm = kalman_smoother(&sys)?;
    let dist = distance_matrix(&sub.sites)?;
    let chol = model
        .params
        .sp
        .theta
        .iter()
        .map(|&th| {
            Cholesky::new(dist.map(|d| exp_correlation(d, th))).ok_or_else(|| Error::Numerical {
                t: 0,
                msg: "neighbor correlation matrix is not positive definite".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnionFit {
        sites: sites.to_vec(),
        z: times.iter().map(|&t| sm.z_smooth[t].clone()).collect(),
        cov: if variance {
            times.iter().map(|&t| sm.p_smooth[t].clone()).collect()
        } else {
            Vec::new()
        },
        chol,
    })
}

type Latent = (DVector<f64>, Option<DMatrix<f64>>);

fn predict_target(
    model: &KrigingModel,
    fit: &UnionFit,
    target: &Coordinate,
    times: &[usize],
) -> Result<Vec<Latent>> {
    let p = model.params.p();
    let u = fit.sites.len();
    let sp = &model.params.sp;
    let g = model.params.g();
    let d = fit
        .sites
        .iter()
        .map(|&i| distance(&model.ds.sites[i], target))
        .collect::<Result<Vec<_>>>()?;
    let mut w = Vec::with_capacity(p);
    let mut resid = Vec::with_capacity(p);
    for a in 0..p {
        let r = DVector::from_fn(u, |i, _| exp_correlation(d[i], sp.theta[a]));
        let wa = fit.chol[a].solve(&r);
        resid.push((sp.v[a] * (1.0 - r.dot(&wa))).max(0.0));
        w.push(wa);
    }
    let mut out = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let zs = &fit.z[k];
        let z = DVector::from_fn(p, |a, _| (0..u).map(|i| w[a][i] * zs[i * p + a]).sum());
        let cov = if fit.cov.is_empty() {
            None
        } else {
            let ps = &fit.cov[k];
            let mut c = DMatrix::zeros(p, p);
            for a in 0..p {
                for b in a..p {
                    let mut s = 0.0;
                    for i in 0..u {
                        let mut row = 0.0;
                        for l in 0..u {
                            row += ps[(i * p + a, l * p + b)] * w[b][l];
                        }
                        s += w[a][i] * row;
                    }
                    c[(a, b)] = s;
                    c[(b, a)] = s;
                }
                // Var of the remainder after t steps from its stationary start.
                let g2 = g[a] * g[a];
                let steps = if g2 == 0.0 {
                    1.0
                } else {
                    (1.0 - g2.powi(t as i32 + 1)) / (1.0 - g2)
                };
                c[(a, a)] += resid[a] * steps;
            }
            Some(c)
        };
        out.push((z, cov));
    }
    Ok(out)
}

fn check_times(times: &[usize], t_len: usize) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Argument("no kriging times".into()));
    }
    if let Some(t) = times.iter().find(|&&t| t == 0 || t > t_len) {
        return Err(Error::Argument(format!("time {t} outside 1..={t_len}")));
    }
    Ok(())
}

fn resolve_nn(model: &KrigingModel, opts: &KrigingOptions) -> Result<usize> {
    let n = model.n_sites();
    let nn = opts.nn_size.unwrap_or(n);
    if nn == 0 || nn > n {
        return Err(Error::Argument(format!("nn_size {nn} outside 1..={n}")));
    }
    if opts.block_size == 0 {
        return Err(Error::Argument("block_size must be at least 1".into()));
    }
    Ok(nn)
}

/// Latent predictions for `targets`, processed in the given blocks.
fn latent(
    model: &KrigingModel,
    targets: &[Coordinate],
    blocks: &[Range<usize>],
    times: &[usize],
    nn: usize,
    variance: bool,
    exec: &Executor,
) -> Result<Vec<Vec<Latent>>> {
    let mut unions: Vec<Vec<usize>> = Vec::new();
    let mut lookup: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut block_union = Vec::with_capacity(blocks.len());
    for b in blocks {
        let mut members = vec![false; model.n_sites()];
        for t in &targets[b.clone()] {
            for i in nearest_neighbors(&model.ds.sites, t, nn)? {
                members[i] = true;
            }
        }
        let key: Vec<usize> = (0..members.len()).filter(|&i| members[i]).collect();
        let next = unions.len();
        let id = *lookup.entry(key.clone()).or_insert(next);
        if id == next {
            unions.push(key);
        }
        block_union.push(id);
    }
    log::debug!(
        "kriging: {} blocks, {} distinct neighbor unions",
        blocks.len(),
        unions.len()
    );
    let fits = exec
        .map(&unions, |s| fit_union(model, s, times, variance))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = (0..blocks.len()).collect();
    let per_block = exec.map(&ids, |&b| {
        targets[blocks[b].clone()]
            .iter()
            .map(|t| predict_target(model, &fits[block_union[b]], t, times))
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(targets.len());
    for b in per_block {
        out.extend(b?);
    }
    Ok(out)
}

fn assemble(
    model: &KrigingModel,
    targets: &[Coordinate],
    times: &[usize],
    h: &[f64],
    lat: Vec<Vec<Latent>>,
    covariates: Option<&TargetCovariates>,
) -> Result<KrigingResult> {
    let bt = model.bt;
    let p = bt.z.count();
    let pb = bt.beta.count();
    let b = model.ds.n_covariates();
    let phi_z = bt.z.matrix(h)?.values;
    let phi_b = bt.beta.matrix(h)?.values;
    let beta = DMatrix::from_fn(h.len(), b, |r, j| {
        (0..pb)
            .map(|a| phi_b[(r, a)] * model.params.c_beta[j * pb + a])
            .sum::<f64>()
    });
    let variance = lat
        .first()
        .and_then(|l| l.first())
        .is_some_and(|l| l.1.is_some());
    let mut f_hat = Vec::with_capacity(targets.len() * times.len() * h.len());
    let mut var_f = Vec::new();
    let mut z_hat = Vec::with_capacity(targets.len() * times.len());
    let mut z_cov = Vec::new();
    for (i, per_t) in lat.into_iter().enumerate() {
        for (k, (z, cov)) in per_t.into_iter().enumerate() {
            for r in 0..h.len() {
                let phi = phi_z.row(r);
                let mut f = (0..p).map(|a| phi[a] * z[a]).sum::<f64>();
                if let Some(x) = covariates {
                    f += x
                        .get(i, k, r)
                        .iter()
                        .enumerate()
                        .map(|(j, xv)| xv * beta[(r, j)])
                        .sum::<f64>();
                }
                f_hat.push(f);
                if let Some(c) = &cov {
                    let v = (phi * c * phi.transpose())[(0, 0)];
                    var_f.push(v.max(0.0));
                }
            }
            z_hat.push(z);
            if let Some(c) = cov {
                z_cov.push(c);
            }
        }
    }
    Ok(KrigingResult {
        targets: targets.to_vec(),
        times: times.to_vec(),
        h: h.to_vec(),
        f_hat,
        var_f: variance.then_some(var_f),
        z_hat,
        z_cov: variance.then_some(z_cov),
    })
}

fn check_request(
    model: &KrigingModel,
    m: usize,
    times: &[usize],
    h: &[f64],
    covariates: Option<&TargetCovariates>,
) -> Result<()> {
    check_times(times, model.ds.t_len)?;
    if h.is_empty() {
        return Err(Error::Argument("no kriging h points".into()));
    }
    let (lo, hi) = model.ds.domain;
    if let Some(&x) = h.iter().find(|&&x| !(x >= lo && x <= hi)) {
        return Err(Error::Domain { h: x, lo, hi });
    }
    if let Some(c) = covariates {
        if c.dims != [m, times.len(), h.len(), model.ds.n_covariates()] {
            return Err(Error::Argument(format!(
                "target covariates have shape {:?}, expected [{m}, {}, {}, {}]",
                c.dims,
                times.len(),
                h.len(),
                model.ds.n_covariates()
            )));
        }
    }
    Ok(())
}

/// Kriging for one block of targets conditioned on the union of their
/// neighbor sets. Without covariates only the latent part is mapped.
pub fn krige_block(
    model: &KrigingModel,
    targets: &[Coordinate],
    times: &[usize],
    h: &[f64],
    opts: &KrigingOptions,
    covariates: Option<&TargetCovariates>,
) -> Result<KrigingResult> {
    let nn = resolve_nn(model, opts)?;
    if targets.is_empty() {
        return Err(Error::Argument("no kriging targets".into()));
    }
    check_request(model, targets.len(), times, h, covariates)?;
    let exec = Executor::new(opts.workers);
    let lat = latent(
        model,
        targets,
        &[0..targets.len()],
        times,
        nn,
        opts.compute_variance,
        &exec,
    )?;
    assemble(model, targets, times, h, lat, covariates)
}

/// Kriging over a grid split into contiguous blocks of `block_size`.
pub fn krige(
    model: &KrigingModel,
    grid: &KrigingGrid,
    times: &[usize],
    h: &[f64],
    opts: &KrigingOptions,
    covariates: Option<&TargetCovariates>,
) -> Result<KrigingResult> {
    let nn = resolve_nn(model, opts)?;
    if grid.is_empty() {
        return Err(Error::Argument("no kriging targets".into()));
    }
    check_request(model, grid.len(), times, h, covariates)?;
    let m = grid.len();
    let blocks: Vec<Range<usize>> = (0..m)
        .step_by(opts.block_size)
        .map(|s| s..(s + opts.block_size).min(m))
        .collect();
    let exec = Executor::new(opts.workers);
    let lat = latent(
        model,
        &grid.targets,
        &blocks,
        times,
        nn,
        opts.compute_variance,
        &exec,
    )?;
    assemble(model, &grid.targets, times, h, lat, covariates)
}

/// Predicted `f` at every measurement point of `val`, one vector per record.
pub fn predict_records(
    model: &KrigingModel,
    val: &ProfileDataset,
    opts: &KrigingOptions,
) -> Result<Vec<Vec<f64>>> {
    let nn = resolve_nn(model, opts)?;
    if val.unit != model.ds.unit {
        return Err(Error::Argument(
            "validation sites use a different unit".into(),
        ));
    }
    if val.t_len != model.ds.t_len || val.n_covariates() != model.ds.n_covariates() {
        return Err(Error::Argument(
            "validation data do not match the estimation layout".into(),
        ));
    }
    for (i, s) in val.sites.iter().enumerate() {
        for e in &model.ds.sites {
            if distance(s, e)? == 0.0 {
                return Err(Error::Argument(format!(
                    "validation site {i} coincides with an estimation site"
                )));
            }
        }
    }
    let mut times: Vec<usize> = val.records.iter().map(|r| r.time).collect();
    times.sort_unstable();
    times.dedup();
    if times.is_empty() {
        return Ok(vec![Vec::new(); val.records.len()]);
    }
    let slot: HashMap<usize, usize> = times.iter().enumerate().map(|(k, &t)| (t, k)).collect();
    let m = val.n_sites();
    let blocks: Vec<Range<usize>> = (0..m)
        .step_by(opts.block_size)
        .map(|s| s..(s + opts.block_size).min(m))
        .collect();
    let exec = Executor::new(opts.workers);
    let lat = latent(model, &val.sites, &blocks, &times, nn, false, &exec)?;
    let bt = model.bt;
    let pb = bt.beta.count();
    let mut phi_z = vec![0.0; bt.z.count()];
    let mut phi_b = vec![0.0; pb];
    let mut out = Vec::with_capacity(val.records.len());
    for r in &val.records {
        let z = &lat[r.site][slot[&r.time]].0;
        let mut pred = Vec::with_capacity(r.len());
        for (k, &h) in r.h.iter().enumerate() {
            bt.z.eval_into(h, &mut phi_z)?;
            bt.beta.eval_into(h, &mut phi_b)?;
            let mut f: f64 = phi_z.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
            for (j, x) in r.covariates.iter().enumerate() {
                let bj: f64 = (0..pb)
                    .map(|a| phi_b[a] * model.params.c_beta[j * pb + a])
                    .sum();
                f += x[k] * bj;
            }
            pred.push(f);
        }
        out.push(pred);
    }
    Ok(out)
}

/// Squared-error summary over one group of validation points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub count: usize,
    /// `None` when the group is empty.
    pub mse: Option<f64>,
    /// `None` when the group is empty, or when its observations are all
    /// equal and the predictions miss them.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    /// Mean of the observation points falling in the bin.
    pub h_mean: Option<f64>,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// Entry `t - 1` covers time `t`.
    pub by_time: Vec<MetricRow>,
    /// One row per validation site, in site order.
    pub by_site: Vec<MetricRow>,
    pub by_bin: Vec<BinRow>,
    pub total_squared_error: f64,
    pub n_observations: usize,
}

#[derive(Default, Clone)]
struct Acc {
    n: usize,
    sse: f64,
    sy: f64,
    syy: f64,
    sh: f64,
}

impl Acc {
    fn add(&mut self, y: f64, e: f64, h: f64) {
        self.n += 1;
        self.sse += e * e;
        self.sy += y;
        self.syy += y * y;
        self.sh += h;
    }

    fn row(&self) -> MetricRow {
        if self.n == 0 {
            return MetricRow {
                count: 0,
                mse: None,
                r2: None,
            };
        }
        let n = self.n as f64;
        let mse = self.sse / n;
        let mean = self.sy / n;
        let var = (self.syy / n - mean * mean).max(0.0);
        let r2 = if var > 0.0 {
            Some(1.0 - mse / var)
        } else if mse == 0.0 {
            Some(1.0)
        } else {
            None
        };
        MetricRow {
            count: self.n,
            mse: Some(mse),
            r2,
        }
    }
}

impl ValidationReport {
    /// Builds the report from predictions aligned with `val.records`.
    pub fn from_predictions(
        val: &ProfileDataset,
        predictions: &[Vec<f64>],
        bins: usize,
    ) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Argument("at least one bin is required".into()));
        }
        if predictions.len() != val.records.len()
            || predictions
                .iter()
                .zip(&val.records)
                .any(|(p, r)| p.len() != r.len())
        {
            return Err(Error::Argument(
                "predictions do not match the validation records".into(),
            ));
        }
        let (lo, hi) = val.domain;
        let width = (hi - lo) / bins as f64;
        let mut by_time = vec![Acc::default(); val.t_len];
        let mut by_site = vec![Acc::default(); val.n_sites()];
        let mut by_bin = vec![Acc::default(); bins];
        let mut total = Acc::default();
        for (r, pred) in val.records.iter().zip(predictions) {
            for k in 0..r.len() {
                let y = r.y[k];
                if y.is_nan() {
                    continue;
                }
                let e = y - pred[k];
                let h = r.h[k];
                let bin = (((h - lo) / width).floor() as usize).min(bins - 1);
                by_time[r.time - 1].add(y, e, h);
                by_site[r.site].add(y, e, h);
                by_bin[bin].add(y, e, h);
                total.add(y, e, h);
            }
        }
        Ok(ValidationReport {
            by_time: by_time.iter().map(Acc::row).collect(),
            by_site: by_site.iter().map(Acc::row).collect(),
            by_bin: by_bin
                .iter()
                .enumerate()
                .map(|(i, a)| BinRow {
                    lo: lo + i as f64 * width,
                    hi: if i + 1 == bins {
                        hi
                    } else {
                        lo + (i + 1) as f64 * width
                    },
                    h_mean: (a.n > 0).then(|| a.sh / a.n as f64),
                    metrics: a.row(),
                })
                .collect(),
            total_squared_error: total.sse,
            n_observations: total.n,
        })
    }

    pub fn bins(&self) -> usize {
        self.by_bin.len()
    }
}

/// Kriging predictions at the validation sites scored against their data.
pub fn validate(
    model: &KrigingModel,
    val: &ProfileDataset,
    bins: usize,
    opts: &KrigingOptions,
) -> Result<ValidationReport> {
    let opts = KrigingOptions {
        compute_variance: false,
        ..opts.clone()
    };
    let pred = predict_records(model, val, &opts)?;
    ValidationReport::from_predictions(val, &pred, bins)
}

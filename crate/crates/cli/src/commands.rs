use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fhdgm::estimation::{em_fit, initialize, simulate, EmOptions, FitResult, Layout, Model};
use fhdgm::exec::Executor;
use fhdgm::inference::{
    beta_chi2_test, beta_confidence_bands, missing_data_warning, varcov_truncated, InfoOptions,
    InformationKind, VarCov,
};
use fhdgm::ingest::{split_validation, write_csv_file, Coordinate, ProfileDataset};
use fhdgm::partition::{fit_kmeans, Partitioning};
use fhdgm::predict::{
    krige, validate, KrigingGrid, KrigingModel, KrigingOptions, TargetCovariates,
};

use crate::config::{parse_list, substream, Config};
use crate::error::{CliError, Result};
use crate::setup;

const BAND_LEVELS: [f64; 3] = [0.90, 0.95, 0.99];

/// Wall times and run facts written to `run_manifest.txt`.
pub struct Manifest {
    command: String,
    phases: Vec<(String, f64)>,
    facts: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Manifest {
            command: command.to_string(),
            phases: Vec::new(),
            facts: Vec::new(),
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.phases
            .push((phase.to_string(), start.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn fact(&mut self, key: &str, value: impl ToString) {
        self.facts.push((key.to_string(), value.to_string()));
    }

    pub fn write(&self, dir: &Path, cfg: &Config) -> Result<()> {
        let mut f = fs::File::create(dir.join("run_manifest.txt"))?;
        writeln!(f, "command: {}", self.command)?;
        writeln!(f, "config_hash: {}", cfg.hash())?;
        writeln!(f, "seed: {}", setup::seed(cfg)?)?;
        writeln!(f, "fhdgm_version: {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(f, "parallel_feature: {}", cfg!(feature = "parallel"))?;
        writeln!(f, "workers: {}", setup::workers(cfg)?)?;
        for (k, v) in &self.facts {
            writeln!(f, "{k}: {v}")?;
        }
        for (phase, secs) in &self.phases {
            writeln!(f, "wall_time_{phase}_s: {secs:.3}")?;
        }
        writeln!(f, "[effective config]")?;
        f.write_all(cfg.render().as_bytes())?;
        Ok(())
    }
}

fn csv_writer(path: PathBuf) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn simulate_cmd(cfg: &Config, m: &mut Manifest) -> Result<()> {
    let dir = setup::out_dir(cfg)?;
    let domain = setup::domain(cfg)?;
    let bt = setup::bases(cfg)?;
    let params = setup::simulation_params(cfg)?;
    let h_points = match cfg.list::<f64>("simulate.h")? {
        Some(h) => h,
        None => (0..5)
            .map(|i| domain.0 + (domain.1 - domain.0) * i as f64 / 4.0)
            .collect(),
    };
    let layout = Layout {
        n_sites: cfg.require("simulate.n_sites")?,
        t_len: cfg.require("simulate.t_len")?,
        h_points,
        domain,
        n_covariates: cfg.get_or("simulate.n_covariates", 1)?,
        unit: setup::unit(cfg)?,
        extent: cfg.get_or("simulate.extent", 1.0)?,
    };
    let seed = setup::seed(cfg)?;
    let ds = m.time("simulate", || {
        let template = layout.generate(substream(seed, "layout"))?;
        Ok(simulate(
            &template,
            &bt,
            &params,
            substream(seed, "simulate"),
        )?)
    })?;
    let path = dir.join("data.csv");
    write_csv_file(&ds, &path)?;
    m.fact("sites", ds.n_sites());
    m.fact("observations", ds.n_observations());
    println!("wrote {}", path.display());
    Ok(())
}

fn partitioning(
    cfg: &Config,
    sites: &[Coordinate],
    exec: &Executor,
) -> Result<Option<Partitioning>> {
    let k: usize = cfg.get_or("partition.k", 1)?;
    if k <= 1 {
        return Ok(None);
    }
    let lambda: f64 = cfg
        .get("partition.lambda")?
        .ok_or_else(|| CliError::Usage("`partition.lambda` is required when k > 1".into()))?;
    let trials = cfg.get_or("partition.trials", 10)?;
    let seed = substream(setup::seed(cfg)?, "kmeans");
    Ok(Some(fit_kmeans(sites, k, lambda, trials, seed, exec)?))
}

fn write_partition(path: PathBuf, p: &Partitioning) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["site_index", "cluster", "centroid_lat", "centroid_lon"])?;
    for (i, &c) in p.assignment.iter().enumerate() {
        let cen = p.centroids[c];
        w.write_record([
            i.to_string(),
            c.to_string(),
            cen.lat_or_y.to_string(),
            cen.lon_or_x.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn partition_cmd(cfg: &Config, m: &mut Manifest) -> Result<()> {
    let dir = setup::out_dir(cfg)?;
    let ds = setup::load_data(cfg)?;
    let exec = Executor::new(setup::workers(cfg)?);
    if cfg.get_or::<usize>("partition.k", 1)? == 0 {
        return Err(CliError::Usage("`partition.k` must be at least 1".into()));
    }
    let p = m.time("partition", || match partitioning(cfg, &ds.sites, &exec)? {
        Some(p) => Ok(p),
        None => Ok(Partitioning::single(&ds.sites)?),
    })?;
    write_partition(dir.join("partition.csv"), &p)?;
    m.fact("objective", p.objective);
    println!("objective {}", p.objective);
    println!("sizes {:?}", p.sizes);
    Ok(())
}

fn em_options(cfg: &Config, partitions: Option<Partitioning>, workers: usize) -> Result<EmOptions> {
    let d = EmOptions::default();
    Ok(EmOptions {
        exit_toll_par: cfg.get_or("em.toll_par", d.exit_toll_par)?,
        exit_toll_loglike: cfg.get_or("em.toll_loglik", d.exit_toll_loglike)?,
        max_iterations: cfg.get_or("em.max_iterations", d.max_iterations)?,
        partitions,
        workers,
        seed: substream(setup::seed(cfg)?, "em"),
    })
}

/// Partitioning, initialization and EM; writes the estimation outputs.
fn fit_and_write(
    cfg: &Config,
    ds: &ProfileDataset,
    dir: &Path,
    m: &mut Manifest,
) -> Result<FitResult> {
    let bt = setup::bases(cfg)?;
    let workers = setup::workers(cfg)?;
    let exec = Executor::new(workers);
    let part = m.time("partition", || partitioning(cfg, &ds.sites, &exec))?;
    if let Some(p) = &part {
        write_partition(dir.join("partition.csv"), p)?;
    }
    let opts = em_options(cfg, part, workers)?;
    let fit = m.time("em", || {
        let init = initialize(ds, &bt)?;
        Ok(em_fit(ds, &bt, &init, &opts)?)
    })?;
    setup::write_params(&dir.join("params.csv"), &fit.params, &ds.covariate_names)?;
    let mut w = csv_writer(dir.join("loglik_trace.csv"))?;
    w.write_record(["iteration", "loglik"])?;
    for (i, l) in fit.loglik_trace.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    m.fact("iterations", fit.iterations);
    m.fact("exit_reason", fit.exit_reason);
    m.fact("loglik", fit.loglik());
    Ok(fit)
}

fn info_options(cfg: &Config, workers: usize) -> Result<InfoOptions> {
    let kind = match cfg.str("varcov.kind").unwrap_or("opg") {
        "opg" => InformationKind::OuterProduct,
        "hessian" => InformationKind::Hessian,
        other => {
            return Err(CliError::Usage(format!(
                "unknown `varcov.kind` `{other}` (expected opg or hessian)"
            )))
        }
    };
    Ok(InfoOptions {
        kind,
        workers,
        ..Default::default()
    })
}

fn write_varcov(dir: &Path, vc: &VarCov) -> Result<()> {
    let mut w = csv_writer(dir.join("varcov.csv"))?;
    let mut header = vec!["parameter".to_string()];
    header.extend(vc.labels.iter().cloned());
    w.write_record(&header)?;
    for (i, label) in vc.labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(vc.matrix.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fit_cmd(cfg: &Config, m: &mut Manifest) -> Result<()> {
    let dir = setup::out_dir(cfg)?;
    let ds = setup::load_data(cfg)?;
    let fit = fit_and_write(cfg, &ds, &dir, m)?;
    let mut meta = format!(
        "iterations: {}\nexit_reason: {}\nloglik: {}\nparameters: {}\n",
        fit.iterations,
        fit.exit_reason,
        fit.loglik(),
        fit.params.len()
    );
    if cfg.flag("varcov.enabled")? {
        if let Some(w) = missing_data_warning(&ds) {
            eprintln!("warning: {w}");
        }
        let bt = setup::bases(cfg)?;
        let delta: f64 = cfg.get_or("varcov.delta", 1e-3)?;
        let opts = info_options(cfg, setup::workers(cfg)?)?;
        let vc = m.time("varcov", || {
            let model = Model::new(&ds, &bt, None)?;
            Ok(varcov_truncated(
                &model,
                &fit.params,
                &ds.covariate_names,
                delta,
                &opts,
            )?)
        })?;
        write_varcov(&dir, &vc)?;
        let mut w = csv_writer(dir.join("chi2.csv"))?;
        w.write_record(["covariate", "statistic", "df", "p_value"])?;
        for (name, row) in ds
            .covariate_names
            .iter()
            .zip(beta_chi2_test(&vc, &fit.params, &ds.covariate_names)?.rows)
        {
            match row {
                Ok(r) => w.write_record([
                    r.covariate,
                    r.statistic.to_string(),
                    r.df.to_string(),
                    r.p_value.to_string(),
                ])?,
                Err(e) => {
                    eprintln!("warning: {e}");
                    w.write_record([name.as_str(), "NA", "NA", "NA"])?
                }
            }
        }
        w.flush()?;
        let points: usize = cfg.get_or("varcov.band_points", 21)?;
        if points < 2 {
            return Err(CliError::Usage(
                "`varcov.band_points` must be at least 2".into(),
            ));
        }
        let (lo, hi) = ds.domain;
        let grid: Vec<f64> = (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect();
        let bands = beta_confidence_bands(
            &vc,
            &fit.params,
            &bt,
            &ds.covariate_names,
            &grid,
            &BAND_LEVELS,
        )?;
        let mut w = csv_writer(dir.join("beta_bands.csv"))?;
        let mut header: Vec<String> = ["h", "covariate", "estimate", "se"]
            .map(String::from)
            .to_vec();
        for l in BAND_LEVELS {
            header.push(format!("lo_{}", (l * 100.0).round()));
            header.push(format!("hi_{}", (l * 100.0).round()));
        }
        w.write_record(&header)?;
        for b in &bands {
            let mut row = vec![
                b.h.to_string(),
                b.component.clone(),
                b.estimate.to_string(),
                b.se.to_string(),
            ];
            for band in &b.bands {
                row.push(band.lo.to_string());
                row.push(band.hi.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        meta.push_str(&format!(
            "t_star: {}\ndelta: {}\ntruncated: {}\n",
            vc.t_star, vc.delta_used, vc.truncated
        ));
        m.fact("t_star", vc.t_star);
    }
    fs::write(dir.join("fit_meta.txt"), meta)?;
    println!(
        "{} after {} iterations, loglik {}",
        fit.exit_reason,
        fit.iterations,
        fit.loglik()
    );
    Ok(())
}

pub fn validate_cmd(cfg: &Config, m: &mut Manifest) -> Result<()> {
    let dir = setup::out_dir(cfg)?;
    let ds = setup::load_data(cfg)?;
    let val_sites: Vec<usize> = cfg
        .list("validate.val_sites")?
        .ok_or_else(|| CliError::Usage("missing required setting `validate.val_sites`".into()))?;
    let bins: usize = cfg.get_or("validate.bins", 1)?;
    let (est, val) = split_validation(&ds, &val_sites)?;
    let fit = fit_and_write(cfg, &est, &dir, m)?;
    let bt = setup::bases(cfg)?;
    let opts = KrigingOptions {
        nn_size: cfg.get("validate.nn_size")?,
        block_size: cfg.get_or("krige.block_size", 100)?,
        workers: setup::workers(cfg)?,
        compute_variance: false,
    };
    let rep = m.time("validate", || {
        let model = KrigingModel::new(&est, &bt, &fit.params)?;
        Ok(validate(&model, &val, bins, &opts)?)
    })?;

    let mut w = csv_writer(dir.join("mse_t.csv"))?;
    w.write_record(["t", "count", "mse"])?;
    for (t, r) in rep.by_time.iter().enumerate() {
        w.write_record([(t + 1).to_string(), r.count.to_string(), opt(r.mse)])?;
    }
    w.flush()?;
    let mut w = csv_writer(dir.join("mse_s.csv"))?;
    w.write_record(["site", "coord_y", "coord_x", "count", "mse"])?;
    for (i, r) in rep.by_site.iter().enumerate() {
        let c = val.sites[i];
        w.write_record([
            val.source_sites[i].to_string(),
            c.lat_or_y.to_string(),
            c.lon_or_x.to_string(),
            r.count.to_string(),
            opt(r.mse),
        ])?;
    }
    w.flush()?;
    let mut w = csv_writer(dir.join("mse_h.csv"))?;
    w.write_record(["bin", "lo", "hi", "h_mean", "count", "mse"])?;
    for (i, b) in rep.by_bin.iter().enumerate() {
        if b.metrics.count == 0 {
            eprintln!(
                "warning: bin {i} [{}, {}] holds no observations",
                b.lo, b.hi
            );
        }
        w.write_record([
            i.to_string(),
            b.lo.to_string(),
            b.hi.to_string(),
            opt(b.h_mean),
            b.metrics.count.to_string(),
            opt(b.metrics.mse),
        ])?;
    }
    w.flush()?;
    let mut w = csv_writer(dir.join("r2.csv"))?;
    w.write_record(["group", "key", "count", "r2"])?;
    for (t, r) in rep.by_time.iter().enumerate() {
        w.write_record([
            "time".to_string(),
            (t + 1).to_string(),
            r.count.to_string(),
            opt(r.r2),
        ])?;
    }
    for (i, r) in rep.by_site.iter().enumerate() {
        w.write_record([
            "site".to_string(),
            val.source_sites[i].to_string(),
            r.count.to_string(),
            opt(r.r2),
        ])?;
    }
    for (i, b) in rep.by_bin.iter().enumerate() {
        w.write_record([
            "bin".to_string(),
            i.to_string(),
            b.metrics.count.to_string(),
            opt(b.metrics.r2),
        ])?;
    }
    w.flush()?;
    let pooled = rep.total_squared_error / rep.n_observations.max(1) as f64;
    m.fact("validation_observations", rep.n_observations);
    println!(
        "validation MSE {pooled} over {} observations",
        rep.n_observations
    );
    Ok(())
}

fn parse_axis(s: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = s
        .split(':')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("invalid grid axis `{s}`")))
        })
        .collect::<Result<_>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(CliError::Usage(format!(
            "grid axis `{s}` must be lo:hi:step"
        ))),
    }
}

fn read_targets(path: &str, unit: fhdgm::ingest::Unit) -> Result<Vec<Coordinate>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read targets {path}: {e}")))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("{path}: missing column `{name}`")))
    };
    let (cy, cx) = (col("coord_y")?, col("coord_x")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| CliError::Usage(format!("{path}: malformed row {rec:?}")))
        };
        out.push(Coordinate::new(num(cy)?, num(cx)?, unit)?);
    }
    Ok(out)
}

/// Covariates at every (target, time, h) from a long-format CSV.
fn read_target_covariates(
    path: &str,
    targets: &[Coordinate],
    times: &[usize],
    h: &[f64],
    names: &[String],
    prefix: &str,
) -> Result<TargetCovariates> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read covariates {path}: {e}")))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::Usage(format!("{path}: missing column `{name}`")))
    };
    let (cy, cx, ct, ch) = (col("coord_y")?, col("coord_x")?, col("time")?, col("h")?);
    let xcols: Vec<usize> = names
        .iter()
        .map(|n| col(&format!("{prefix}{n}")))
        .collect::<Result<_>>()?;
    let b = names.len();
    let mut values = vec![f64::NAN; targets.len() * times.len() * h.len() * b];
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| {
            rec.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| CliError::Usage(format!("{path}: malformed row {rec:?}")))
        };
        let (y, x, t, hv) = (num(cy)?, num(cx)?, num(ct)?, num(ch)?);
        let Some(i) = targets
            .iter()
            .position(|c| c.lat_or_y == y && c.lon_or_x == x)
        else {
            continue;
        };
        let Some(k) = times.iter().position(|&tt| tt as f64 == t) else {
            continue;
        };
        let Some(r) = h.iter().position(|&hh| hh == hv) else {
            continue;
        };
        for (j, &c) in xcols.iter().enumerate() {
            values[((i * times.len() + k) * h.len() + r) * b + j] = num(c)?;
        }
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(CliError::Usage(format!(
            "{path} does not cover every (target, time, h) combination"
        )));
    }
    Ok(TargetCovariates::new(
        values,
        targets.len(),
        times.len(),
        h.len(),
        b,
    )?)
}

pub fn krige_cmd(cfg: &Config, m: &mut Manifest) -> Result<()> {
    let dir = setup::out_dir(cfg)?;
    let ds = setup::load_data(cfg)?;
    let bt = setup::bases(cfg)?;
    let params_path = cfg
        .str("krige.params")
        .map_or_else(|| dir.join("params.csv"), PathBuf::from);
    let params = setup::read_params(&params_path, &ds.covariate_names)?;
    let grid = match (cfg.str("krige.grid"), cfg.str("krige.targets")) {
        (Some(g), None) => {
            let (ys, xs) = g.split_once(',').ok_or_else(|| {
                CliError::Usage("`krige.grid` must be lat0:lat1:step,lon0:lon1:step".into())
            })?;
            KrigingGrid::regular(parse_axis(ys)?, parse_axis(xs)?, ds.unit)?
        }
        (None, Some(path)) => KrigingGrid::from_targets(read_targets(path, ds.unit)?)?,
        _ => {
            return Err(CliError::Usage(
                "give exactly one of `krige.grid` and `krige.targets`".into(),
            ))
        }
    };
    let h: Vec<f64> = parse_list("krige.h", cfg.require_str("krige.h")?)?;
    let times: Vec<usize> = parse_list("krige.t", cfg.require_str("krige.t")?)?;
    let variance = !cfg.flag("krige.no_varcov")?;
    let covariates = cfg
        .str("krige.covariates")
        .map(|p| {
            let prefix = cfg.str("data.covariate_prefix").unwrap_or("x_beta_");
            read_target_covariates(p, &grid.targets, &times, &h, &ds.covariate_names, prefix)
        })
        .transpose()?;
    let opts = KrigingOptions {
        nn_size: cfg.get("krige.nn_size")?,
        block_size: cfg.get_or("krige.block_size", 100)?,
        workers: setup::workers(cfg)?,
        compute_variance: variance,
    };
    let res = m.time("krige", || {
        let model = KrigingModel::new(&ds, &bt, &params)?;
        Ok(krige(
            &model,
            &grid,
            &times,
            &h,
            &opts,
            covariates.as_ref(),
        )?)
    })?;
    let mut w = csv_writer(dir.join("kriging.csv"))?;
    let mut header = vec!["lat", "lon", "t", "h", "f_hat"];
    if variance {
        header.push("var_f");
    }
    w.write_record(&header)?;
    for (i, c) in res.targets.iter().enumerate() {
        for (k, t) in res.times.iter().enumerate() {
            for (r, hv) in res.h.iter().enumerate() {
                let idx = res.index(i, k, r);
                let mut row = vec![
                    c.lat_or_y.to_string(),
                    c.lon_or_x.to_string(),
                    t.to_string(),
                    hv.to_string(),
                ];
                row.push(res.f_hat[idx].to_string());
                if let Some(v) = &res.var_f {
                    row.push(v[idx].to_string());
                }
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    if let Some(shape) = grid.shape {
        m.fact("grid", format!("{} x {}", shape.rows, shape.cols));
    }
    m.fact("targets", res.targets.len());
    println!(
        "kriged {} targets at {} times",
        res.targets.len(),
        res.times.len()
    );
    Ok(())
}

fn read_table(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| Ok(rec?.iter().map(String::from).collect()))
        .collect()
}

/// The report text for the fit outputs in `dir`.
pub fn report_text(dir: &Path) -> Result<String> {
    let params = dir.join("params.csv");
    if !params.is_file() {
        return Err(CliError::Usage(format!(
            "{} not found; run `fit` first",
            params.display()
        )));
    }
    let rows = read_table(&params)?;
    let varcov = dir.join("varcov.csv");
    let se: Option<Vec<f64>> = if varcov.is_file() {
        let table = read_table(&varcov)?;
        if table.len() != rows.len() {
            return Err(CliError::Usage(
                "varcov.csv does not match params.csv".into(),
            ));
        }
        Some(
            table
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r.get(i + 1)
                        .and_then(|v| v.parse::<f64>().ok())
                        .map_or(f64::NAN, |v| v.max(0.0).sqrt())
                })
                .collect(),
        )
    } else {
        None
    };
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>6} {:>16} {:>14}\n",
        "parameter", "index", "estimate", "std_error"
    ));
    for (i, r) in rows.iter().enumerate() {
        let est: f64 = r.get(2).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
        let s = se
            .as_ref()
            .map_or_else(|| "--".to_string(), |s| format!("{:.6e}", s[i]));
        out.push_str(&format!(
            "{:<24} {:>6} {:>16.6e} {:>14}\n",
            r[0], r[1], est, s
        ));
    }
    let chi2 = dir.join("chi2.csv");
    if chi2.is_file() {
        out.push_str("\nchi-square test of beta_j(h) = 0\n");
        out.push_str(&format!(
            "{:<24} {:>14} {:>4} {:>14}\n",
            "covariate", "statistic", "df", "p_value"
        ));
        for r in read_table(&chi2)? {
            let f = |i: usize| r.get(i).and_then(|v| v.parse::<f64>().ok());
            let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6e}"));
            out.push_str(&format!(
                "{:<24} {:>14} {:>4} {:>14}\n",
                r[0],
                fmt(f(1)),
                r[2],
                fmt(f(3))
            ));
        }
    }
    let meta = dir.join("fit_meta.txt");
    if meta.is_file() {
        out.push('\n');
        out.push_str(&fs::read_to_string(meta)?);
    }
    Ok(out)
}

pub fn report_cmd(cfg: &Config) -> Result<()> {
    let dir = PathBuf::from(cfg.str("run.out").unwrap_or("."));
    print!("{}", report_text(&dir)?);
    Ok(())
}
